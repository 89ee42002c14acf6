import json
import subprocess
import sys

import pytest

from wdlms.cli import main

from test_experiment import SMALL


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**SMALL, "horizon": 20, "trials": 2, "output_dir": str(tmp_path / "res")}))
    return p


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_run_writes_outputs(capsys, config_file, tmp_path):
    code, out, _ = run(capsys, "run", str(config_file), "--equalizer", "zf")
    assert code == 0
    doc = json.loads(out)
    assert {r["equalizer"] for r in doc["steady_state_db"]} == {"zf"}
    assert (tmp_path / "res" / "trace.csv").exists()


def test_run_overrides(capsys, config_file, tmp_path):
    out_dir = tmp_path / "other"
    code, _, _ = run(capsys, "run", str(config_file), "--seed", "3", "--trials", "1",
                     "--out", str(out_dir))
    assert code == 0
    meta = json.loads((out_dir / "meta.json").read_text())
    assert meta["seed"] == 3 and meta["trials"] == 1


def test_theory_subcommand(capsys, config_file):
    code, out, _ = run(capsys, "theory", str(config_file))
    assert code == 0
    assert {r["source"] for r in json.loads(out)["steady_state_db"]} == {"theory"}


def test_compare_subcommand(capsys, config_file):
    code, out, _ = run(capsys, "compare", str(config_file), "--combiners", "uniform,optimal",
                       "--equalizer", "zf")
    assert code == 0
    ranking = json.loads(out)["ranking"]
    assert [r["combiner"] for r in ranking] == ["optimal", "uniform"]
    assert len(ranking[0]["node_msd_db"]) == 4


def test_topology_gen_and_show(capsys, tmp_path):
    code, out, _ = run(capsys, "topology", "gen", "--seed", "2", "--nodes", "5")
    assert code == 0 and len(json.loads(out)["positions"]) == 5
    path = tmp_path / "t.json"
    assert run(capsys, "topology", "gen", "--nodes", "3", "--out", str(path))[0] == 0
    code, out, _ = run(capsys, "topology", "show", str(path))
    doc = json.loads(out)
    assert code == 0 and doc["nodes"] == 3 and len(doc["neighbors"]) == 3


@pytest.mark.parametrize("doc, kind, code, field", [
    ({"trials": 0}, "config", 2, "trials"),
    ({"topology": {"inline": {"positions": [[0, 0]]}}}, "config", 2, "topology.inline"),
])
def test_config_errors_are_json(capsys, tmp_path, doc, kind, code, field):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    rc, _, err = run(capsys, "run", str(p))
    assert rc == code
    e = json.loads(err)
    assert e["error"] == kind and e["field"] == field


def test_bad_topology_file(capsys, tmp_path):
    p = tmp_path / "t.json"
    p.write_text('{"positions": [[0, 0]]}')
    rc, _, err = run(capsys, "topology", "show", str(p))
    assert rc == 1 and json.loads(err)["error"] == "topology"
    rc, _, err = run(capsys, "topology", "show", str(tmp_path / "missing.json"))
    assert rc == 1 and json.loads(err)["error"] == "io"


def test_compare_needs_two_combiners(capsys, config_file):
    rc, _, err = run(capsys, "compare", str(config_file), "--combiners", "optimal")
    assert rc == 1 and json.loads(err)["error"] == "runtime"


def test_usage_errors_are_json(capsys):
    with pytest.raises(SystemExit) as info:
        main(["compare", "cfg.json"])
    assert info.value.code == 2
    assert json.loads(capsys.readouterr().err)["error"] == "usage"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "wdlms", "topology", "gen", "--nodes", "2"],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["r_o"] == 0.5
