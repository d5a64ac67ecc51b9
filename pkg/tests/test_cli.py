import json
import subprocess
import sys

import pytest

from mbfsim import io
from mbfsim.cli import main


def cli(*args, input=None):
    return subprocess.run([sys.executable, "-m", "mbfsim", *args], capture_output=True,
                          text=True, input=input)


def run_json(capsys, *args):
    assert main(list(args)) == 0
    return json.loads(capsys.readouterr().out)


def test_symmetric_simulate_always_flips(capsys):
    doc = run_json(capsys, "simulate", "--variant", "dtmc", "--n", "200", "--p", "0.5",
                   "--q", "0.5", "--r", "0", "--start", "0", "--threshold-frac", "0.3334",
                   "--steps", "1000000", "--runs", "100", "--seed", "7")
    assert doc["threshold"] == 66
    assert doc["stats"]["percent_flipped"] == 100.0
    assert doc["stats"]["n_flipped"] == 100


def test_recovery_bias_simulate_stays_good(capsys):
    doc = run_json(capsys, "simulate", "--n", "200", "--p", "0.6", "--q", "0.4",
                   "--threshold-frac", "0.3334", "--steps", "1000000", "--runs", "100",
                   "--seed", "7", "--jobs", "2")
    assert doc["stats"]["percent_purely_good"] == 100.0


def test_trace_and_histogram_files(tmp_path, capsys):
    trace, hist = tmp_path / "t.csv", tmp_path / "h.csv"
    run_json(capsys, "simulate", "--variant", "ctmc-internal", "--n", "30", "--p", "0.3",
             "--q", "0.6", "--time", "50", "--runs", "1", "--seed", "2",
             "--trace", str(trace), "--histogram", str(hist))
    lines = trace.read_text().splitlines()
    assert lines[0] == "time,state" and lines[1] == "0.0,0"
    h = io.histogram_from_csv(hist.read_text())
    assert h.n == 30


@pytest.mark.parametrize("args", [
    ["simulate", "--n", "10", "--p", "0.5", "--q", "0.5", "--steps", "10"],  # no seed
    ["simulate", "--n", "10", "--p", "0.8", "--q", "0.5", "--steps", "10", "--seed", "1"],
    ["simulate", "--n", "10", "--p", "0.5", "--q", "0.5", "--time", "10", "--seed", "1"],
    ["simulate", "--n", "10", "--p", "0.5", "--q", "0.5", "--steps", "10", "--seed", "1",
     "--entropy"],
    ["simulate", "--n", "10", "--p", "0.5", "--q", "0.5", "--steps", "10", "--seed", "1",
     "--runs", "2", "--trace", "x.csv"],
    ["simulate", "--variant", "ctmc-external", "--n", "10", "--p", "0.5", "--q", "0.5",
     "--time", "10", "--seed", "1", "--r", "0.2"],
    ["simulate", "--n", "10", "--p", "0.5", "--q", "0.5", "--steps", "10", "--seed", "1",
     "--threshold", "11"],
    ["analytic", "hitting", "--n", "10"],
    ["analytic", "recovery-bound", "--p", "0.4", "--q", "0.6", "--n", "15"],
    ["simulate", "--steps", "5", "--threshold", "2", "--threshold-frac", "0.3"],
])
def test_validation_errors_exit_2(args):
    r = cli(*args)
    assert r.returncode == 2, r.stderr
    assert r.stdout == ""


def test_entropy_seed_runs():
    r = cli("simulate", "--n", "10", "--p", "0.5", "--q", "0.5", "--steps", "10", "--entropy")
    assert r.returncode == 0 and "entropy seed" in r.stderr


def test_analytic_examples(capsys):
    st = run_json(capsys, "analytic", "stationary", "--variant", "ctmc-internal", "--n", "200",
                  "--p", "0.4", "--q", "0.6")
    assert abs(st["argmax"] - 66) <= 1
    hit = run_json(capsys, "analytic", "hitting", "--variant", "dtmc", "--n", "200",
                   "--p", "0.5", "--q", "0.5", "--r", "0", "--target", "66")
    assert hit["f_start"] == 4422.0 and hit["f"][0] == 4422.0
    reg = run_json(capsys, "analytic", "regime", "--p", "0.3", "--q", "0.6")
    assert reg["regime"] == "log-time"
    assert run_json(capsys, "analytic", "scaling", "--f0", "4422", "--r", "0.5")["value"] == 8844
    ruin = run_json(capsys, "analytic", "ruin", "--p", "0.6", "--q", "0.4", "--m", "5")
    assert ruin["value"] == pytest.approx(0.5 / 6.59375)
    assert run_json(capsys, "analytic", "infection-bound", "--p", "0.4",
                    "--n", "200")["value"] == pytest.approx(3000)
    co = run_json(capsys, "analytic", "coordinated", "--p", "0.5", "--q", "1", "--n", "9")
    assert co["reconciled"] == pytest.approx(2.75) and co["closed_form"] == pytest.approx(1.0)
    qu = run_json(capsys, "analytic", "quantile", "--n", "60", "--p", "0.5", "--q", "0.5",
                  "--target", "21")
    assert qu["quantile"] == 58.0 and qu["truncated"] is False


def test_unreachable_hitting_reports_inf(capsys):
    doc = run_json(capsys, "analytic", "hitting", "--variant", "ctmc-internal", "--n", "20",
                   "--p", "0.4", "--q", "0.6", "--seed-rate", "0", "--target", "7")
    assert doc["f_start"] == "inf"


def _scenario(tmp_path, **over):
    doc = {"spec": {"n": 60, "variant": "dtmc", "p": 0.5, "q": 0.5, "r": 0.0},
           "policy": {"f": 20}, "method": {"kind": "quantile", "epsilon": 0.01},
           "delta": 0, "monitor_period": 1, "horizon": 20000, "seed": 5}
    doc.update(over)
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_mapek_examples(tmp_path, capsys):
    calm = run_json(capsys, "mapek", _scenario(tmp_path, spec={"n": 60, "variant": "dtmc",
                                                                 "p": 0.5, "q": 0.0, "r": 0.5}))
    assert calm["n_reconfigurations"] == 0
    safe = run_json(capsys, "mapek", _scenario(tmp_path))
    assert safe["unsafe_fraction"] < 0.05 and not safe["thrashing"]
    thrash = run_json(capsys, "mapek", _scenario(tmp_path, delta=100))
    assert thrash["thrashing"]
    full = run_json(capsys, "mapek", _scenario(tmp_path, horizon=500), "--intervals")
    assert len(full["intervals"]) == full["n_intervals"]


def test_sweep_and_occupancy_outputs(capsys):
    assert main(["sweep", "--n", "12", "--steps", "200", "--runs", "4", "--seed", "1",
                 "--p-values", "0.3,0.7", "--q-values", "0.2,0.5"]) == 0
    rows = io.sweep_from_csv(capsys.readouterr().out)
    assert len(rows) == 4 and [r["valid"] for r in rows] == [True, True, True, False]
    assert main(["occupancy", "--variant", "ctmc-external", "--n", "10", "--p", "0.5",
                 "--q", "0.5", "--time", "2000", "--runs", "2", "--seed", "1"]) == 0
    emp, pi = io.occupancy_from_csv(capsys.readouterr().out)
    assert len(emp) == 11 and pi is not None


DETERMINISM_COMMANDS = [
    ["simulate", "--variant", "ctmc-coordinated", "--n", "30", "--p", "0.5", "--q", "0.45",
     "--time", "2000", "--runs", "12", "--seed", "3"],
    ["sweep", "--preset", "desk", "--steps", "5000", "--runs", "8", "--threshold", "16",
     "--seed", "9"],
    ["occupancy", "--variant", "ctmc-internal", "--n", "40", "--p", "0.3", "--q", "0.6",
     "--time", "500", "--runs", "6", "--seed", "4"],
]


@pytest.mark.parametrize("args", DETERMINISM_COMMANDS, ids=lambda a: a[0])
def test_byte_identical_across_processes_and_jobs(args):
    outs = {cli(*args, "--jobs", j).stdout for j in ("1", "3")}
    outs.add(cli(*args, "--jobs", "1").stdout)
    assert len(outs) == 1 and next(iter(outs))


def test_mapek_byte_identical(tmp_path):
    path = _scenario(tmp_path, horizon=5000)
    a, b = cli("mapek", path), cli("mapek", path)
    assert a.returncode == 0 and a.stdout == b.stdout
    c = cli("mapek", path, "--seed", "6")
    assert c.stdout != a.stdout
