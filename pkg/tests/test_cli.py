"""End-to-end checks of the command line interface via subprocess."""

import subprocess
import sys


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "fractalsim.cli", *args],
        capture_output=True, text=True)


def test_validate_bundled_scenario():
    res = run_cli("validate", "--scenario", "steady-band")
    assert res.returncode == 0
    assert res.stdout.strip() == "ok"


def test_validate_rejects_inverted_band():
    res = run_cli("validate", "--scenario", "steady-band",
                  "--set", "scaling.lo_rps=5000")
    assert res.returncode == 2
    assert "scaling" in res.stderr


def test_missing_scenario_exits_2():
    res = run_cli("run", "--scenario", "no-such-scenario", "--out", "/tmp/x")
    assert res.returncode == 2
    assert "no-such-scenario" in res.stderr
    assert "bundled:" in res.stderr


def test_run_writes_metrics_and_summary(tmp_path):
    out = tmp_path / "out"
    res = run_cli("run", "--scenario", "steady-band",
                  "--until", "5", "--out", str(out))
    assert res.returncode == 0, res.stderr
    csv = (out / "metrics.csv").read_text().splitlines()
    assert csv[0].startswith("time_s,service,replica_id,host_id,rps")
    assert len(csv) > 1
    summary = (out / "summary.txt").read_text()
    assert "service=web" in summary
    assert res.stdout == summary


def test_scenario_name_accepts_scn_suffix(tmp_path):
    res = run_cli("run", "--scenario", "steady-band.scn",
                  "--until", "2", "--out", str(tmp_path / "o"))
    assert res.returncode == 0, res.stderr


def test_until_caps_the_run(tmp_path):
    out = tmp_path / "out"
    run_cli("run", "--scenario", "steady-band", "--until", "3",
            "--out", str(out))
    rows = (out / "metrics.csv").read_text().splitlines()[1:]
    assert rows
    assert all(float(r.split(",")[0]) <= 3.0 for r in rows)


def test_until_rejects_nonpositive(tmp_path):
    res = run_cli("run", "--scenario", "steady-band", "--until", "0",
                  "--out", str(tmp_path / "o"))
    assert res.returncode == 2


def test_identical_runs_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        res = run_cli("run", "--scenario", "remote-golden", "--out", str(out))
        assert res.returncode == 0, res.stderr
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "summary.txt").read_bytes() == (b / "summary.txt").read_bytes()


def test_seed_override_changes_arrivals(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_cli("run", "--scenario", "steady-band", "--until", "4",
            "--seed", "1", "--out", str(a))
    run_cli("run", "--scenario", "steady-band", "--until", "4",
            "--seed", "2", "--out", str(b))
    assert (a / "metrics.csv").read_bytes() != (b / "metrics.csv").read_bytes()


def test_backend_override_runs_clean(tmp_path):
    res = run_cli("run", "--scenario", "steady-band", "--until", "3",
                  "--backend", "learn", "--out", str(tmp_path / "o"))
    assert res.returncode == 0, res.stderr


def test_dump_state_is_stable():
    a = run_cli("dump-state", "--scenario", "remote-golden")
    b = run_cli("dump-state", "--scenario", "remote-golden")
    assert a.returncode == 0, a.stderr
    assert a.stdout == b.stdout
    assert "== store HOSTNAME ==" in a.stdout


def test_report_renders_figures(tmp_path):
    out = tmp_path / "out"
    run_cli("run", "--scenario", "steady-band", "--until", "5",
            "--out", str(out))
    res = run_cli("report", "--csv", str(out / "metrics.csv"))
    assert res.returncode == 0, res.stderr
    printed = res.stdout.splitlines()
    assert len(printed) == 4
    for path in printed:
        assert path.endswith(".png")
        with open(path, "rb") as fh:
            assert fh.read(8).startswith(b"\x89PNG")


def test_report_missing_csv_exits_2(tmp_path):
    res = run_cli("report", "--csv", str(tmp_path / "nope.csv"))
    assert res.returncode == 2
