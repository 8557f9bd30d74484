import json
import subprocess
import sys
from pathlib import Path

import pytest

from prefillsim.cli import main
from prefillsim.workload import read_trace

CONFIGS = Path(__file__).parent.parent / "configs"
DEMO = str(CONFIGS / "demo.json")


def _run(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr()
    return rc, out.out, out.err


def test_calc_single_gpu_dp_ep_zero_comm(capsys):
    rc, out, _ = _run(capsys, "calc", "--strategy", "dp_ep", "--gpus", "1", "--batch", "4")
    assert rc == 0
    row = next(line for line in out.splitlines() if line.startswith("dp_ep,1,"))
    assert row.split(",")[2] == "0"
    assert "calibrated T" in out and "literal T" in out


def test_calc_from_config(capsys):
    rc, out, _ = _run(capsys, "calc", "--config", DEMO)
    assert rc == 0
    assert "dp_asyncep+offload,2," in out


def test_gen_short_regime(tmp_path, capsys):
    out = tmp_path / "short.jsonl"
    rc, text, _ = _run(capsys, "gen", "--regime", "short", "--out", str(out))
    assert rc == 0 and "40960 requests" in text
    assert len(read_trace(out)) == 40_960
    assert len(out.read_text().splitlines()) == 40_961  # header + records


def test_gen_options(tmp_path, capsys):
    out = tmp_path / "t.jsonl"
    rc, _, _ = _run(capsys, "gen", "--seq-len", "512", "--requests", "32", "--prefix-share", "high",
                    "--group-size", "4", "--seed", "2", "--out", str(out))
    assert rc == 0
    trace = read_trace(out)
    assert len(trace) == 32 and trace.total_tokens == 512 * 32
    rc, _, err = _run(capsys, "gen", "--prefix-share", "lots", "--out", str(out))
    assert rc == 2 and "prefillsim: error:" in err


def test_simulate_infeasible_cell_exits_zero(capsys):
    rc, out, _ = _run(capsys, "simulate", "--config", DEMO, "--strategy", "dp_ep", "--gpus", "2")
    assert rc == 0
    lines = out.splitlines()
    assert len(lines) == 2 and lines[1].startswith("dp_ep,2,false,")


def test_simulate_takes_one_cell(capsys):
    rc, _, err = _run(capsys, "simulate", "--config", DEMO, "--gpus", "2,8", "--strategy", "dp_ep")
    assert rc == 2 and "--gpus" in err


def test_sweep_overrides_and_json_lines(tmp_path, capsys):
    out = tmp_path / "r.jsonl"
    rc, _, _ = _run(capsys, "sweep", "--config", DEMO, "--strategy", "dp_asyncep,pp_pp",
                    "--gpus", "8,4", "--offload", "on", "--window", "1", "--format", "json-lines",
                    "--seed", "11", "--out", str(out))
    assert rc == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert [(r["strategy"], r["P"]) for r in rows] == [
        ("dp_asyncep+offload", 4), ("dp_asyncep+offload", 8), ("pp_pp", 4), ("pp_pp", 8)]


def test_validate_passes(capsys):
    rc, out, _ = _run(capsys, "validate", "--config", DEMO)
    assert rc == 0
    assert out.count("PASS") == 6 and "FAIL" not in out


def test_errors_exit_nonzero(tmp_path, capsys):
    rc, _, err = _run(capsys, "simulate", "--config", str(tmp_path / "none.json"))
    assert rc == 2 and "prefillsim: error:" in err
    rc, _, err = _run(capsys, "sweep", "--config", DEMO, "--strategy", "nope")
    assert rc == 2 and "--strategy" in err
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["sweep", "--config", DEMO, "--turbo"])
    assert info.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_console_script_module():
    proc = subprocess.run([sys.executable, "-m", "prefillsim.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert all(cmd in proc.stdout for cmd in ("simulate", "sweep", "gen", "calc", "validate"))
