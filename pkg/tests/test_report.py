import pytest

from poolsift import report
from poolsift.selection import SelectionManifest


def manifest(method, counts, pool_size=1000):
    indices = list(range(sum(counts.values())))
    return SelectionManifest(
        method=method,
        parameters={"n": len(indices), "pool_size": pool_size},
        selected_indices=indices,
        per_source_counts=counts,
        pool_fingerprint="sha256:test",
    )


def test_fractions_sum_to_one_and_match_counts():
    rows = report.composition_rows({"m": manifest("random", {"a": 2, "b": 1})},
                                   model_params=7e9)
    by_source = {source: fraction for _m, source, _c, fraction, _f in rows}
    assert by_source["a"] == pytest.approx(2 / 3, abs=1e-3)
    assert by_source["b"] == pytest.approx(1 / 3, abs=1e-3)
    assert sum(by_source.values()) == pytest.approx(1.0, abs=1e-6)


def test_one_row_per_manifest_source_pair():
    manifests = {
        "one": manifest("random", {"a": 5, "b": 5, "c": 5}),
        "two": manifest("rds", {"a": 5, "b": 5, "c": 5}),
    }
    rows = report.composition_rows(manifests, model_params=7e9)
    assert len(rows) == 6


def test_flops_column_uses_manifest_method_and_pool():
    from poolsift.flops import CostModelParams, estimate

    m = manifest("rds", {"a": 10}, pool_size=500)
    rows = report.composition_rows({"m": m}, model_params=1e9)
    expected = estimate("rds", CostModelParams(model_params=1e9, selected_size=10,
                                               pool_size=500))
    assert rows[0][4] == expected


def test_unknown_method_rejected():
    with pytest.raises(Exception, match="cost model"):
        report.composition_rows({"m": manifest("astrology", {"a": 1})}, model_params=1e9)


def test_figures_render(tmp_path):
    manifests = {"m1": manifest("random", {"a": 3, "b": 7}),
                 "m2": manifest("rds", {"b": 4, "c": 6})}
    rows = report.composition_rows(manifests, model_params=7e9)
    report.render_composition_figure(manifests, tmp_path / "comp.png")
    report.render_flops_figure(rows, tmp_path / "flops.png")
    assert (tmp_path / "comp.png").stat().st_size > 1000
    assert (tmp_path / "flops.png").stat().st_size > 1000
