"""Feature extraction for the poolsift selection engine."""

__version__ = "0.1.0"
