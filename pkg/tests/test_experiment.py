import json
import math

import numpy as np
import pytest

from wdlms import __version__
from wdlms.config import ConfigError, parse_config
from wdlms.experiment import (SIMULATION, THEORY, MsdTrace, ResultBundle,
                              compare_combiners, run_experiment, to_db)
from wdlms.outputs import (STEADY_FIELDS, TRACE_FIELDS, OutputError, emit_outputs,
                           read_trace_csv)

SMALL = {
    "topology": {"generate": {"seed": 1, "node_count": 4, "r_o": 0.6}},
    "nodes": {"step_size": 0.05, "meas_noise_var": 0.01, "regressor_cov": 1.0},
    "horizon": 60, "trials": 4, "seed": 11, "moment_samples": 2000,
    "combiners": {"names": ["optimal", "uniform"]},
}


def small(**over):
    doc = json.loads(json.dumps(SMALL))
    doc.update(over)
    return parse_config(doc)


@pytest.fixture(scope="module")
def bundle():
    return run_experiment(small())


def test_bundle_covers_every_pair(bundle):
    keys = {(t.combiner, t.equalizer, t.source) for t in bundle.traces}
    assert keys == {(c, e, s) for c in ("optimal", "uniform") for e in ("zf", "mmse")
                    for s in (SIMULATION, THEORY)}
    t = bundle.trace("optimal", "zf")
    assert t.node.shape == (60, 4) and t.network.shape == (60,)
    assert np.allclose(t.network, t.node.mean(axis=1), rtol=1e-15)
    assert len(bundle.meta["runs"]) == 4


def test_meta_contract(bundle):
    m = bundle.meta
    assert m["config_hash"] == small().digest()
    assert m["seed"] == 11 and m["version"] == __version__
    assert m["tail_window"] == 12
    run = m["runs"][0]
    assert {"diverged_trials", "max_column_deviation", "rho_B", "msd_upper_bound"} <= set(run)
    assert all(r["max_column_deviation"] < 1e-10 for r in m["runs"])


def test_theory_only_run():
    b = run_experiment(small(), simulate_runs=False, theory=True)
    assert {t.source for t in b.traces} == {THEORY}
    b = run_experiment(small(theory=False))
    assert {t.source for t in b.traces} == {SIMULATION}


def test_single_trial_single_iteration():
    b = run_experiment(small(trials=1, horizon=1, theory=False))
    t = b.trace("optimal", "zf")
    assert t.node.shape == (1, 4)
    assert b.steady_state("optimal", "zf").network == pytest.approx(t.network[0])
    assert math.isnan(b.steady_state("optimal", "zf").stderr)


def test_rerun_gives_identical_csv(tmp_path):
    a = emit_outputs(run_experiment(small(theory=False)), tmp_path / "a")
    b = emit_outputs(run_experiment(small(theory=False)), tmp_path / "b")
    for key in ("trace", "steady_state"):
        assert a[key].read_bytes() == b[key].read_bytes()


def test_worker_count_does_not_change_results(tmp_path):
    a = emit_outputs(run_experiment(small(theory=False, trials=5)), tmp_path / "a")
    b = emit_outputs(run_experiment(small(theory=False, trials=5, workers=3)), tmp_path / "b")
    assert a["trace"].read_bytes() == b["trace"].read_bytes()


def test_emitted_files_and_round_trip(bundle, tmp_path):
    files = emit_outputs(bundle, tmp_path / "out")
    assert set(files) == {"trace", "steady_state", "meta", "plot"}
    back = read_trace_csv(files["trace"])
    assert len(back) == len(bundle.traces)
    for orig, got in zip(bundle.traces, back):
        assert (orig.combiner, orig.equalizer, orig.source) == (got.combiner, got.equalizer, got.source)
        assert np.array_equal(orig.node, got.node)
        assert np.array_equal(orig.network, got.network)
    meta = json.loads(files["meta"].read_text())
    assert meta["config_hash"] == bundle.meta["config_hash"]
    compile(files["plot"].read_text(), "plot_msd.py", "exec")
    assert not list((tmp_path / "out").glob(".*tmp"))


def test_db_columns_agree_with_linear(bundle, tmp_path):
    files = emit_outputs(bundle, tmp_path)
    import csv
    with open(files["trace"]) as fh:
        for row in csv.DictReader(fh):
            lin, db = float(row["msd_linear"]), float(row["msd_db"])
            assert db == pytest.approx(10 * math.log10(lin), rel=1e-9)


def test_empty_bundle_writes_headers_only(tmp_path):
    files = emit_outputs(ResultBundle(), tmp_path)
    assert files["trace"].read_text() == ",".join(TRACE_FIELDS) + "\n"
    assert files["steady_state"].read_text() == ",".join(STEADY_FIELDS) + "\n"
    assert read_trace_csv(files["trace"]) == []


def test_unwritable_output_reports_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OutputError, match=str(blocker)):
        emit_outputs(ResultBundle(), blocker / "sub")


def test_diverged_values_serialise(tmp_path):
    b = ResultBundle(traces=[MsdTrace("uniform", "zf", SIMULATION, np.array([[math.inf]]),
                                      np.array([math.inf]))],
                     meta={"x": math.nan})
    files = emit_outputs(b, tmp_path)
    assert json.loads(files["meta"].read_text()) == {"x": "nan"}
    assert read_trace_csv(files["trace"])[0].network[0] == math.inf


def test_compare_ranks_best_first():
    rows = compare_combiners(small(equalizers=["zf"]), ["uniform", "optimal"])
    assert [r.combiner for r in rows] == ["optimal", "uniform"]
    assert rows[0].network_db <= rows[1].network_db
    assert rows[0].node_db.shape == (4,)


def test_compare_repeated_combiner_gives_identical_rows():
    rows = compare_combiners(small(equalizers=["zf"]), ["uniform", "uniform"])
    assert rows[0].network_db == rows[1].network_db
    assert np.array_equal(rows[0].node_db, rows[1].node_db)


def test_compare_validation():
    with pytest.raises(ValueError):
        compare_combiners(small(), ["optimal"])
    with pytest.raises(ConfigError):
        compare_combiners(small(), ["optimal", "nope"])


def test_doubling_trials_moves_estimate_less_than_its_stderr():
    cfg = small(theory=False, equalizers=["zf"], horizon=200, trials=20)
    a = run_experiment(cfg).steady_state("optimal", "zf")
    b = run_experiment(cfg.with_overrides(trials=40)).steady_state("optimal", "zf")
    assert abs(b.network - a.network) < a.stderr


def test_to_db():
    assert to_db(10.0) == 10.0 and to_db(0.0) == -np.inf


def test_bound_constant_scales_the_bound_quadratically():
    default = run_experiment(small(bound_constant=1.0), simulate_runs=False)
    doubled = run_experiment(small(bound_constant=2.0), simulate_runs=False)
    for a, b in zip(default.meta["runs"], doubled.meta["runs"]):
        assert b["msd_upper_bound"] == pytest.approx(4 * a["msd_upper_bound"])


def test_sources_are_tagged_sim_and_theory(bundle):
    assert {t.source for t in bundle.traces} == {"sim", "theory"}
