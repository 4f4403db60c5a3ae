import csv
import io
import json
import os
import subprocess
import sys

import pytest

from dyadgrid.cli import ConfigError, main, parse_config
from dyadgrid.cubes import build_system
from dyadgrid.haar import CellFunction, make_haar
from dyadgrid.model import make_model
from dyadgrid.norms import StripeOperator
from dyadgrid.stripe import make_classical_stripes, make_stripe_functions


def _run(tmp_path, command, config="", *extra, name="run"):
    out = tmp_path / name
    out.mkdir(exist_ok=True)
    cfg = tmp_path / f"{name}.cfg"
    cfg.write_text(config)
    code = main([command, "--config", str(cfg), "--out", str(out), *extra])
    return code, out


def _report(out, name):
    return json.loads((out / name).read_text())


def _csv(out, name):
    return list(csv.DictReader(io.StringIO((out / name).read_text())))


# -- config ------------------------------------------------------------------------

def test_parse_config_defaults_and_ranges():
    cfg = parse_config("# comment\nJ = 6\nm_list = 0..3, 8\nclasses = yes  # trailing\n")
    assert cfg["J"] == 6 and cfg["m_list"] == [0, 1, 2, 3, 8] and cfg["classes"] is True
    assert cfg["model"] == "TorusSup"


@pytest.mark.parametrize("text", ["bogus = 1", "J 4", "J = four", "classes = maybe"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("config", ["bogus = 1\n", "J = 0\n", "model = Sphere\n", "lambda_list = 0\n",
                                    "p_list = 1\n", "m_list = -1\n"])
def test_config_errors_exit_1(tmp_path, config):
    code, _ = _run(tmp_path, "verify-cubes" if "lambda" not in config else "stripe-norms", config)
    assert code == 1


def test_missing_output_dir(tmp_path):
    assert main(["shift-norms", "--out", str(tmp_path / "nope")]) == 1


def test_faults_only_for_suites(tmp_path):
    code, _ = _run(tmp_path, "stripe-norms", "J = 6\n", "--faults")
    assert code == 1


def test_bad_usage_exit_1(tmp_path):
    assert main(["no-such-command"]) == 1
    assert main(["verify-cubes", "--out", str(tmp_path), "--threads", "0"]) == 1


# -- verify-cubes ---------------------------------------------------------------------

def test_verify_cubes_default(tmp_path):
    code, out = _run(tmp_path, "verify-cubes", "lemma_instances = 50\n")
    rep = _report(out, "verify_cubes.json")
    assert code == 0 and rep["ok"] and rep["schema_version"] == 1
    assert rep["config"]["J"] == 8 and rep["system"]["N"] == 2


def test_verify_cubes_k2(tmp_path):
    code, out = _run(tmp_path, "verify-cubes", "k = 2\nJ = 5\nlemma_instances = 20\n")
    assert code == 0 and _report(out, "verify_cubes.json")["system"]["N"] == 4


def test_verify_cubes_fault(tmp_path):
    code, out = _run(tmp_path, "verify-cubes", "J = 6\nlemma_instances = 5\n", "--faults")
    rep = _report(out, "verify_cubes.json")
    assert code == 2 and not rep["ok"] and rep["properties"]["4_ball_sandwich"] > 0


# -- adapt-demo ------------------------------------------------------------------------

def test_adapt_demo_runs(tmp_path):
    code, out = _run(tmp_path, "adapt-demo", "J = 10\nmu = 3\ninstances = 8\n", "--threads", "2")
    rep = _report(out, "adapt_demo.json")
    assert code == 0 and len(rep["instances"]) == 8 and rep["worst_ratio"] <= 20


def test_adapt_demo_empty(tmp_path):
    code, out = _run(tmp_path, "adapt-demo", "instances = 0\n")
    rep = _report(out, "adapt_demo.json")
    assert code == 0 and rep["instances"] == [] and rep["worst_ratio"] == 0.0


def test_adapt_demo_fault_named(tmp_path):
    code, out = _run(tmp_path, "adapt-demo", "J = 10\ninstances = 3\n", "--faults")
    rep = _report(out, "adapt_demo.json")
    assert code == 2 and "contains_cube" in rep["instances"][0]["violations"]


def test_adapt_demo_bad_mu_is_invariant_error(tmp_path):
    code, _ = _run(tmp_path, "adapt-demo", "J = 8\nmu = 1\ninstances = 2\n")
    assert code == 2


# -- norm sweeps -------------------------------------------------------------------------

def test_shift_norms_p2_all_ones(tmp_path):
    code, out = _run(tmp_path, "shift-norms", "J = 10\nm_list = 0..5\nclasses = true\n")
    rows = _csv(out, "shift_norms.csv")
    assert code == 0 and len(rows) > 6
    assert all(abs(float(r["norm"]) - 1) < 1e-9 for r in rows)
    assert {r["kind"] for r in rows} == {"Exact2"}


def test_stripe_norms_p2_column(tmp_path):
    code, out = _run(tmp_path, "stripe-norms", "J = 10\nlambda_list = 1..5\n")
    rows = _csv(out, "stripe_norms.csv")
    assert code == 0
    assert [int(r["M"]) for r in rows] == [2, 4, 8, 16, 32]
    assert all(abs(float(r["norm"]) - 2 ** (-int(r["lambda"]) / 2)) < 1e-9 for r in rows)


def test_stripe_index_out_of_range(tmp_path):
    code, _ = _run(tmp_path, "stripe-norms", "J = 8\nlambda_list = 1,2\nstripe_index = 3\n")
    assert code == 1


def test_stripe_witness_files_reproduce_norms(tmp_path):
    code, out = _run(tmp_path, "stripe-norms", "J = 9\nlambda_list = 2,3\np_list = 4\nwitnesses = on\n")
    assert code == 0
    system = build_system(make_model("TorusSup", 1, 9), max_certify_level=2)
    haar = make_haar(system)
    for r in _csv(out, "stripe_norms.csv"):
        f = CellFunction.from_csv((out / r["witness_file"]).read_text(), system.model)
        op = StripeOperator(make_stripe_functions(make_classical_stripes(system, int(r["lambda"])), haar), 1)
        value = op.apply(op.project(f)).norm(4.0) / f.norm(4.0)
        assert abs(value - float(r["norm"])) < 1e-12


@pytest.mark.parametrize("command,config", [
    ("shift-norms", "J = 9\nm_list = 1,2,3\np_list = 2,3\nclasses = on\nclass_restarts = 0\nrestarts = 1\n"),
    ("stripe-norms", "J = 9\nlambda_list = 1..3\np_list = 1.5,4\nrestarts = 2\n"),
    ("adapt-demo", "J = 9\ninstances = 6\n"),
])
def test_byte_identical_reruns(tmp_path, command, config):
    _, a = _run(tmp_path, command, config, "--threads", "1", name="a")
    _, b = _run(tmp_path, command, config, "--threads", "3", name="b")
    files = sorted(os.listdir(a))
    assert files == sorted(os.listdir(b)) and files
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert not any(n.startswith(".tmp-") for n in files)


def test_seed_flag_overrides_config(tmp_path):
    _, out = _run(tmp_path, "adapt-demo", "J = 8\ninstances = 1\nseed = 3\n", "--seed", "11")
    assert _report(out, "adapt_demo.json")["config"]["seed"] == 11


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dyadgrid", "verify-cubes", "--out", str(tmp_path)],
                          input="", capture_output=True, text=True,
                          env={**os.environ, "PYTHONHASHSEED": "0"})
    assert proc.returncode == 0, proc.stderr
    assert json.loads((tmp_path / "verify_cubes.json").read_text())["ok"]
