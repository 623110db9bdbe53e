import os
import re
import subprocess
import sys
import time
from pathlib import Path

import pytest

from goldilocks import cli, harness

DATA_DIR = Path(__file__).parent / "data"
GOLDEN_CONFIG = DATA_DIR / "golden.toml"
GOLDEN_TRANSCRIPT = DATA_DIR / "golden_transcript.txt"

TINY_CONFIG = """\
config_version = 1

[run]
total_steps = 20
batch_size = 2
group_size = 8
eval_every = 4
validation_size = 30

[dataset]
kind = "irt"
size = 200
feature_dim = 6
difficulty_low = -2.0
difficulty_high = 6.0

[student]
kind = "irt"
discrimination = 2.0
learn_rate = 0.01

[teacher]
learn_rate = 0.02

[seeds]
dataset = 1
student = 2
teacher = 3
selection = 4
"""


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_CONFIG)
    return path


# ---------------------------------------------------------------------------
# argument surface


def test_no_args_prints_usage_and_exits_nonzero(capsys):
    assert cli.main([]) == 2
    out = capsys.readouterr().out
    assert "usage" in out.lower()
    for sub in ("gen-data", "run", "serve", "client", "compare", "report"):
        assert sub in out


EXPECTED_FLAGS = {
    "gen-data": ["--config", "--set", "--seed", "--out"],
    "run": ["--config", "--set", "--seed", "--mode", "--out-csv", "--save-teacher"],
    "serve": ["--config", "--set", "--seed", "--host", "--port", "--save-teacher"],
    "client": ["--config", "--set", "--seed", "--host", "--port", "--out-csv",
               "--transcript", "--shutdown-server"],
    "compare": ["--config", "--set", "--seed", "--out-dir"],
    "report": ["--goldilocks", "--baseline", "--out-dir"],
}


@pytest.mark.parametrize("subcommand", sorted(EXPECTED_FLAGS))
def test_help_documents_every_flag(subcommand, capsys):
    with pytest.raises(SystemExit) as exit_info:
        cli.main([subcommand, "--help"])
    assert exit_info.value.code == 0
    out = capsys.readouterr().out
    for flag in EXPECTED_FLAGS[subcommand]:
        assert flag in out
    # and nothing undocumented: every option string in the parser is expected
    parser = cli.build_parser()
    sub = next(a for a in parser._actions
               if isinstance(a, type(parser._subparsers._group_actions[0])))
    flags = [s for action in sub.choices[subcommand]._actions
             for s in action.option_strings if s != "-h"]
    assert sorted(set(flags)) == sorted(set(EXPECTED_FLAGS[subcommand] + ["--help"]))


# ---------------------------------------------------------------------------
# config errors


def test_unknown_config_key_names_the_key(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(TINY_CONFIG + "\n[teacher2]\nx = 1\n")
    rc = cli.main(["run", "--config", str(bad), "--mode", "baseline",
                   "--out-csv", str(tmp_path / "m.csv")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "teacher2" in err
    assert not (tmp_path / "m.csv").exists()


def test_unknown_override_key_names_the_key(tiny_config_path, tmp_path, capsys):
    rc = cli.main(["run", "--config", str(tiny_config_path), "--mode", "baseline",
                   "--out-csv", str(tmp_path / "m.csv"),
                   "--set", "teacher.vibes=1"])
    assert rc == 2
    assert "vibes" in capsys.readouterr().err


def test_failed_run_removes_partial_outputs(tiny_config_path, tmp_path, capsys):
    out = tmp_path / "teach.json"
    rc = cli.main(["run", "--config", str(tiny_config_path), "--mode", "baseline",
                   "--out-csv", str(tmp_path / "m.csv"),
                   "--save-teacher", str(out)])
    assert rc == 2  # baseline cannot save a teacher
    assert not (tmp_path / "m.csv").exists()
    assert not out.exists()


# ---------------------------------------------------------------------------
# gen-data / run / compare


def test_gen_data_writes_loadable_dataset(tiny_config_path, tmp_path):
    out = tmp_path / "data.jsonl"
    assert cli.main(["gen-data", "--config", str(tiny_config_path),
                     "--out", str(out)]) == 0
    from goldilocks.students import load_dataset
    qs = load_dataset(out)
    assert len(qs) == 200


def test_run_baseline_logs_teacher_disabled(tiny_config_path, tmp_path, caplog):
    out = tmp_path / "m.csv"
    with caplog.at_level("INFO", logger="goldilocks"):
        assert cli.main(["run", "--config", str(tiny_config_path),
                         "--mode", "baseline", "--out-csv", str(out)]) == 0
    assert any("teacher disabled" in r.message for r in caplog.records)
    assert len(harness.read_metrics_csv(out)) == 40


def test_run_goldilocks_saves_teacher_checkpoint(tiny_config_path, tmp_path):
    out = tmp_path / "m.csv"
    ckpt = tmp_path / "teacher.json"
    assert cli.main(["run", "--config", str(tiny_config_path),
                     "--mode", "goldilocks", "--out-csv", str(out),
                     "--save-teacher", str(ckpt)]) == 0
    from goldilocks.teacher import load_teacher
    model = load_teacher(ckpt)
    assert model.version > 0


def test_compare_twice_is_byte_identical(tiny_config_path, tmp_path):
    outs = []
    for name in ("one", "two"):
        out_dir = tmp_path / name
        assert cli.main(["compare", "--config", str(tiny_config_path),
                         "--seed", "1", "--out-dir", str(out_dir)]) == 0
        outs.append(out_dir)
    for fname in ("goldilocks.csv", "baseline.csv", "aligned.csv"):
        a = (outs[0] / fname).read_bytes()
        b = (outs[1] / fname).read_bytes()
        assert a == b, fname
    for fname in ("validation_accuracy.svg", "teacher_predictions.svg"):
        assert (outs[0] / fname).exists()


def test_report_from_existing_csvs(tiny_config_path, tmp_path):
    run_dir = tmp_path / "runs"
    assert cli.main(["compare", "--config", str(tiny_config_path),
                     "--out-dir", str(run_dir)]) == 0
    report_dir = tmp_path / "replot"
    assert cli.main(["report", "--goldilocks", str(run_dir / "goldilocks.csv"),
                     "--baseline", str(run_dir / "baseline.csv"),
                     "--out-dir", str(report_dir)]) == 0
    svgs = list(report_dir.glob("*.svg"))
    assert len(svgs) == 7


# ---------------------------------------------------------------------------
# serve + client end to end


def _spawn(args, **kwargs):
    return subprocess.Popen(
        [sys.executable, "-m", "goldilocks.cli", *args],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        cwd=str(Path(__file__).parent.parent), **kwargs,
    )


def test_serve_client_loopback_end_to_end(tmp_path):
    serve_proc = _spawn(["serve", "--config", str(GOLDEN_CONFIG), "--port", "0"])
    try:
        banner = serve_proc.stdout.readline()
        match = re.match(r"serving on ([\d.]+):(\d+)", banner)
        assert match, f"unexpected serve banner: {banner!r}"
        host, port = match.group(1), match.group(2)

        transcript = tmp_path / "transcript.txt"
        out_csv = tmp_path / "client.csv"
        client_proc = _spawn(["client", "--config", str(GOLDEN_CONFIG),
                              "--host", host, "--port", port,
                              "--out-csv", str(out_csv),
                              "--transcript", str(transcript),
                              "--shutdown-server"])
        client_out, client_err = client_proc.communicate(timeout=60)
        assert client_proc.returncode == 0, client_err
        serve_out, serve_err = serve_proc.communicate(timeout=60)
        assert serve_proc.returncode == 0, serve_err

        got = transcript.read_bytes()
        if os.environ.get("GOLDEN_REGEN"):
            GOLDEN_TRANSCRIPT.write_bytes(got)
            pytest.skip("regenerated the golden transcript")
        assert got == GOLDEN_TRANSCRIPT.read_bytes()

        # metrics written by the client match an in-process run exactly
        from goldilocks.config import load_config
        cfg = load_config(GOLDEN_CONFIG)
        local = harness.run_experiment(cfg, "goldilocks")
        local_csv = tmp_path / "local.csv"
        harness.write_metrics_csv(local.metrics, local_csv)
        assert out_csv.read_bytes() == local_csv.read_bytes()
    finally:
        serve_proc.kill()


def test_client_against_dead_server_fails_cleanly(tmp_path):
    import socket
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    rc = cli.main(["client", "--config", str(GOLDEN_CONFIG),
                   "--host", "127.0.0.1", "--port", str(port),
                   "--out-csv", str(tmp_path / "m.csv")])
    assert rc == 1
    assert not (tmp_path / "m.csv").exists()
