import csv
import io
import json
import math

import numpy as np
import pytest

from ttmerge import bench
from ttmerge.bench import (
    CorruptionSpec,
    MethodSpec,
    ScenarioParams,
    corrupt,
    corruption_error,
    gen_scenario,
    lambda_histogram,
    mean_over_shifts,
    pearson,
    quadrant_analysis,
    run_benchmark,
    top1_accuracy,
)
from ttmerge.errors import DomainError, ValidationError
from ttmerge.models import accuracy
from ttmerge.rng import SplitMix64


class ZeroRng:
    def normal(self, size=None):
        return np.zeros(size)


# -- metrics -----------------------------------------------------------------------------


def test_top1_examples():
    assert top1_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert top1_accuracy([0, 0], [1, 1]) == 0.0
    assert top1_accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 0.75
    with pytest.raises(ValidationError):
        top1_accuracy([0, 1], [0])


def test_corruption_error_examples():
    assert abs(corruption_error(0.9868, 0.1616) - 1.57) < 0.01
    assert abs(corruption_error(0.8333, 0.5897) - 40.63) < 0.01
    assert corruption_error(0.42, 0.42) == 100.0
    with pytest.raises(DomainError):
        corruption_error(0.9, 1.0)


def test_mean_over_shifts_examples():
    assert abs(mean_over_shifts(31.21, 88.07, 64.40) - 61.23) < 0.01
    assert abs(mean_over_shifts(79.74, 14.21, 39.62) - 44.52) < 0.01
    assert mean_over_shifts(0.37, 0.37, 0.37) == 0.37


def test_every_published_mean_column_reproduces():
    tables = bench.load_published_tables()
    n = 0
    for kind in ("accuracy", "err"):
        for rows in tables[kind].values():
            for row in rows.values():
                assert abs(mean_over_shifts(row["b2n"], row["noise"], row["digital"]) - row["mean"]) <= 0.01
                n += 1
    assert n == 84


def test_every_published_err_cell_reproduces():
    tables = bench.load_published_tables()
    ours = bench.reproduce_err_table(tables)
    n = 0
    for modality, rows in tables["err"].items():
        for method, row in rows.items():
            for col, published in row.items():
                assert abs(ours[modality][method][col] - published) <= 0.01, (modality, method, col)
                n += 1
    assert n == 200


def test_pearson():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 1, 1], [1, 2, 3]) == 0.0
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=500), rng.normal(size=500)
    assert pearson(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)


def test_lambda_histogram():
    h = lambda_histogram([0.5] * 13, 10)
    assert h["counts"][5] == 13 and sum(h["counts"]) == 13
    grid = np.linspace(0, 1, 101)
    counts = lambda_histogram(grid, 10)["counts"]
    assert sum(counts) == 101 and max(counts) - min(counts) <= 1
    assert lambda_histogram([1.0, 0.0], 4)["counts"] == [1, 0, 0, 1]
    with pytest.raises(DomainError):
        lambda_histogram([0.5], 0)


# -- corruption -----------------------------------------------------------------------------


def test_corrupt_examples():
    X = np.random.default_rng(1).normal(size=(50, 4))
    np.testing.assert_array_equal(corrupt(X, CorruptionSpec("noise", 3), ZeroRng()), X)
    q = corrupt(X, CorruptionSpec("quantize", 5), None)
    np.testing.assert_array_equal(q * 2, np.round(q * 2))
    with pytest.raises(DomainError):
        CorruptionSpec("noise", 6)
    with pytest.raises(DomainError):
        CorruptionSpec("blur", 1)


def test_noise_second_moment():
    X = np.zeros((10_000, 1))
    out = corrupt(X, CorruptionSpec("noise", 1), SplitMix64(11))
    assert abs(float(np.mean(out**2)) - 0.01) < 0.002


def test_corrupt_deterministic():
    X = np.ones((5, 3))
    a = corrupt(X, CorruptionSpec("noise", 2), SplitMix64(4))
    b = corrupt(X, CorruptionSpec("noise", 2), SplitMix64(4))
    np.testing.assert_array_equal(a, b)


# -- scenario ---------------------------------------------------------------------------------


def test_scenario_deterministic(tiny_scenario):
    again = gen_scenario(7, tiny_scenario.params)
    assert again.files() == tiny_scenario.files()


def test_scenario_roundtrip(tiny_scenario, tmp_path):
    tiny_scenario.save(tmp_path)
    back = bench.ShiftScenario.load(tmp_path)
    assert back.files() == tiny_scenario.files()


def test_novel_labels_disjoint_from_expert(tiny_scenario):
    novel = set(tiny_scenario.test_novel.y.tolist())
    assert novel.isdisjoint(tiny_scenario.expert_data.y.tolist())
    assert novel == set(range(4, 7))


def test_degenerate_params_rejected():
    with pytest.raises(ValidationError):
        ScenarioParams(c_base=1)
    with pytest.raises(ValidationError):
        ScenarioParams(d=0)


def test_pinned_scenario_shape(scenario):
    assert scenario.seed == 42
    assert len(scenario.test_in_domain) == 2048 and len(scenario.test_novel) == 2048
    acc_pt = accuracy(scenario.theta_pt, scenario.test_in_domain)
    acc_ft = accuracy(scenario.theta_ft, scenario.test_in_domain)
    assert acc_ft - acc_pt >= 0.10
    assert accuracy(scenario.theta_pt, scenario.test_novel) > accuracy(scenario.theta_ft, scenario.test_novel)


def test_expert_monotone_in_severity(scenario):
    for kind in bench.CORRUPTIONS:
        accs = [accuracy(scenario.theta_ft, scenario.test_corrupted[(kind, s)]) for s in (1, 3, 5)]
        assert accs[0] >= accs[1] - 0.01 and accs[1] >= accs[2] - 0.01, (kind, accs)


# -- benchmark -------------------------------------------------------------------------------


def test_method_spec_parse():
    assert MethodSpec.parse("ties:0.5") == MethodSpec("ties", 0.5)
    assert str(MethodSpec.parse("fixed:0.25")) == "fixed:0.25"
    for bad in ("bogus", "fixed", "soup:x"):
        with pytest.raises(ValidationError):
            MethodSpec.parse(bad)


def test_run_benchmark_identities(tiny_scenario):
    reports = {r.method: r for r in run_benchmark(tiny_scenario, ["pretrained", "expert", "fixed:0", "fixed:1"])}
    pt = reports["pretrained"]
    assert all(v == 100.0 for v in pt.err.values())
    assert reports["fixed:0"].accuracy == pt.accuracy
    assert reports["fixed:1"].accuracy == reports["expert"].accuracy
    for r in reports.values():
        shifts = [r.accuracy[s] for s in bench.SHIFT_SETTINGS]
        assert abs(r.mean_shift_acc - sum(shifts) / 3) < 1e-9
        assert abs(r.mCE - sum(r.err[s] for s in bench.SHIFT_SETTINGS) / 3) < 1e-9


def test_run_benchmark_deterministic(tiny_scenario):
    methods = ["mixup", "t3", "t3_batch", "dawin"]
    a = bench.reports_json(run_benchmark(tiny_scenario, methods))
    b = bench.reports_json(run_benchmark(tiny_scenario, methods))
    assert a == b


def test_run_benchmark_thread_independent(tiny_scenario, monkeypatch):
    methods = ["soup", "slerp", "ties", "t3_batch"]
    serial = bench.reports_json(run_benchmark(tiny_scenario, methods))
    monkeypatch.setenv("TTMC_THREADS", "4")
    assert bench.reports_json(run_benchmark(tiny_scenario, methods)) == serial


def test_run_benchmark_needs_models(tiny_scenario):
    bare = gen_scenario(7, tiny_scenario.params, train_models=False)
    with pytest.raises(ValidationError):
        run_benchmark(bare, ["expert"])


def test_reports_csv_matches_json(tiny_scenario):
    reports = run_benchmark(tiny_scenario, ["pretrained", "soup", "t3"])
    data = json.loads(bench.reports_json(reports))["reports"]
    rows = list(csv.DictReader(io.StringIO(bench.reports_csv(reports))))
    by_key = {(r["method"], r["setting"]): r for r in rows}
    for rep in data:
        for setting, acc in rep["accuracy"].items():
            row = by_key[(rep["method"], setting)]
            assert float(row["accuracy"]) == acc and float(row["err"]) == rep["err"][setting]
        assert float(by_key[(rep["method"], "mean_shift")]["accuracy"]) == rep["mean_shift_acc"]


def test_quadrants_identical_models(tiny_scenario):
    q = quadrant_analysis(tiny_scenario.theta_pt, tiny_scenario.theta_pt, tiny_scenario.test_in_domain)
    assert q.counts["TrueFalse"] == 0 and q.counts["FalseTrue"] == 0
    assert q.mean_I["TrueFalse"] is None
    assert all(v == 0.0 for v in q.mean_I.values() if v is not None)
    assert sum(q.counts.values()) == q.n == len(tiny_scenario.test_in_domain)


def test_quadrants_sum_and_range(tiny_scenario):
    q = quadrant_analysis(tiny_scenario.theta_pt, tiny_scenario.theta_ft, tiny_scenario.test_novel)
    assert sum(q.counts.values()) == len(tiny_scenario.test_novel)
    assert all(-1.0 <= r <= 1.0 for r in q.rho.values() if r is not None)
    assert math.isfinite(q.rho_all)


def test_cost_table(tiny_scenario):
    data = tiny_scenario.test_in_domain
    costs = bench.cost_table(tiny_scenario.theta_pt, tiny_scenario.theta_ft, data, batch_size=32)
    n, b = len(data), math.ceil(len(data) / 32)
    assert costs["t3"]["sample_forwards"] == 3 * n
    assert costs["t3_batch"]["batch_forwards"] == 3 * b
    assert costs["t3_cached"]["sample_forwards"] == n
    assert costs["t3_batch_cached"]["batch_forwards"] == b
    assert costs["single"]["batch_forwards"] == b
    assert costs["ensemble"]["batch_forwards"] == 2 * b


def test_pinned_scenario_is_frozen(scenario):
    import hashlib

    spec = bench.pinned_scenario_spec()
    assert spec["seed"] == scenario.seed == 42
    assert ScenarioParams.from_json(spec["params"]) == ScenarioParams()
    digests = {k: hashlib.sha256(v).hexdigest() for k, v in scenario.files().items()}
    assert digests == spec["sha256"]
