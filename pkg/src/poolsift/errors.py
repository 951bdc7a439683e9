"""Exception types shared across the package.

Exit-code contract for the CLI: 0 success, 1 usage error, 2 data/validation
error. Exceptions carry the code so `cli.main` can map them uniformly.
"""


class PoolsiftError(Exception):
    """Base class for data and validation failures (CLI exit code 2)."""

    exit_code = 2


class UsageError(PoolsiftError):
    """Bad arguments or incompatible configuration (CLI exit code 1)."""

    exit_code = 1


class ParseError(PoolsiftError):
    """Malformed pool/query file; message names the offending line."""


class StoreError(PoolsiftError):
    """Corrupt, truncated, or mismatched binary artifact."""


class ExhaustedError(PoolsiftError):
    """A ranked candidate list ran out before the target size was reached."""
