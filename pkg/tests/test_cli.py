import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mfhi import cli
from mfhi.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main, parse_grid
from mfhi.dataset import load_dataset, load_planted, validate_manifest, load_manifest
from mfhi.tensor_io import read_tensor

HERE = Path(__file__).parent
FIXTURE = HERE / "fixtures" / "selftest"
GOLDEN = HERE / "golden"
sys.path.insert(0, str(GOLDEN))
from regen import COMMANDS, help_text  # noqa: E402

SMALL_CFG = (FIXTURE / "config.ini").read_text()


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text(SMALL_CFG)
    return path


@pytest.fixture
def data(tmp_path, cfg):
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "data")]) == EXIT_OK
    return tmp_path / "data"


@pytest.fixture
def run(tmp_path, cfg, data):
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "run"), "--episodes", "12"]) == EXIT_OK
    return tmp_path / "run"


# -- help ------------------------------------------------------------------------------


@pytest.mark.parametrize("command", COMMANDS)
def test_help_matches_golden(command):
    assert help_text(command) == (GOLDEN / f"help_{command or 'mfhi'}.txt").read_text()


@pytest.mark.parametrize("command", COMMANDS[1:])
def test_help_lists_every_flag_with_a_default(command):
    text = help_text(command)
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
        if action.option_strings and action.dest != "help":
            assert "(default:" in action.help or "(required)" in action.help


# -- gen -------------------------------------------------------------------------------


def test_gen_output_validates_and_is_deterministic(tmp_path, cfg, data, capsys):
    validate_manifest(load_manifest(data), data)
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "again")]) == EXIT_OK
    assert tree_bytes(data) == tree_bytes(tmp_path / "again")
    assert "K=8 seen, L=4 unseen, Q=6" in capsys.readouterr().out


def test_gen_refuses_non_empty_dir(tmp_path, cfg, data, capsys):
    assert main(["gen", "--config", str(cfg), "--out", str(data)]) == EXIT_IO
    assert "--force" in capsys.readouterr().err
    (data / "stray.txt").write_text("x")
    assert main(["gen", "--config", str(cfg), "--out", str(data), "--force"]) == EXIT_OK
    assert not (data / "stray.txt").exists()


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores permission bits")
def test_gen_into_read_only_location(tmp_path, cfg):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    try:
        assert main(["gen", "--config", str(cfg), "--out", str(ro / "data")]) == EXIT_IO
    finally:
        ro.chmod(0o700)


def test_gen_into_path_under_a_file(tmp_path, cfg, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--config", str(cfg), "--out", str(blocker / "data")]) == EXIT_IO
    assert "error:" in capsys.readouterr().err


def test_seed_precedence(tmp_path, cfg, monkeypatch):
    monkeypatch.setenv("MFHI_SEED", "11")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "env")]) == EXIT_OK
    assert load_planted(tmp_path / "env")[0]["config"]["seed"] == 11
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "flag"), "--seed", "12"]) == EXIT_OK
    assert load_planted(tmp_path / "flag")[0]["config"]["seed"] == 12
    monkeypatch.delenv("MFHI_SEED")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "file")]) == EXIT_OK
    assert load_planted(tmp_path / "file")[0]["config"]["seed"] == 5


def test_unknown_config_key_is_an_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[gen]\nnum_identities = 3\n")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_VALIDATION
    assert "num_identities" in capsys.readouterr().err


# -- train -------------------------------------------------------------------------------


def test_train_zero_episodes(tmp_path, cfg, data):
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "r0"), "--episodes", "0"]) == EXIT_OK
    doc = json.loads((tmp_path / "r0" / "checkpoint" / "checkpoint.json").read_text())
    assert doc["episode"] == 0
    assert len((tmp_path / "r0" / "train_log.tsv").read_text().splitlines()) == 2


def test_train_log_lines(run):
    lines = (run / "train_log.tsv").read_text().splitlines()
    assert len(lines) == 12 + 2 and lines[1] == "episode\tcea\tdcm\ttotal"


def test_train_numeric_failure_exit_code(tmp_path, cfg, data, monkeypatch):
    from mfhi import trainer

    def boom(*a, **k):
        raise trainer.TrainingAbort("non-finite value in dcm at step 3")

    monkeypatch.setattr(trainer, "train_step", boom)
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "nan")]) == EXIT_NUMERIC


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) == EXIT_VALIDATION


def test_i2i_training_via_cli(tmp_path, cfg, data):
    out = tmp_path / "i2i"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--mode", "i2i", "--episodes", "3"]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(out), "--data", str(data), "--protocol", "i2i"]) == EXIT_OK
    # an fc-prototype model has no attribute MLP
    assert main(["eval", "--checkpoint", str(out), "--data", str(data), "--protocol", "i2a"]) == EXIT_VALIDATION


# -- eval --------------------------------------------------------------------------------


def test_eval_reproduces_stored_fixture_report(tmp_path):
    out = tmp_path / "reports"
    assert main(["eval", "--config", str(FIXTURE / "config.ini"), "--checkpoint", str(FIXTURE / "run"),
                 "--data", str(FIXTURE / "data"), "--protocol", "i2a", "--out", str(out)]) == EXIT_OK
    assert tree_bytes(out) == tree_bytes(FIXTURE / "expected")


def test_all_protocols_from_one_checkpoint(run, data):
    for protocol in ("i2a", "a2i", "i2i"):
        assert main(["eval", "--checkpoint", str(run), "--data", str(data), "--protocol", protocol]) == EXIT_OK
    names = sorted(p.name for p in (run / "reports").glob("*.json"))
    assert [n.split("_")[1] for n in names] == ["a2i", "i2a", "i2i"]


def test_eval_unknown_protocol_is_usage_error(run, data):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--checkpoint", str(run), "--data", str(data), "--protocol", "x2y"])
    assert exc.value.code == EXIT_USAGE


def test_eval_shape_mismatch(tmp_path, run, capsys):
    other = tmp_path / "other.ini"
    other.write_text(SMALL_CFG.replace("num_attributes = 6", "num_attributes = 7"))
    assert main(["gen", "--config", str(other), "--out", str(tmp_path / "d7")]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(run), "--data", str(tmp_path / "d7"), "--protocol", "i2a"]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "Q=6" in err and "Q=7" in err


def test_eval_corrupt_checkpoint_is_io_error(tmp_path, run, data):
    bad = tmp_path / "bad"
    shutil.copytree(run / "checkpoint", bad)
    victim = next((bad / "tensors").glob("*.mft"))
    victim.write_bytes(victim.read_bytes()[:-3])
    assert main(["eval", "--checkpoint", str(bad), "--data", str(data), "--protocol", "i2a"]) == EXIT_IO


# -- sweep -------------------------------------------------------------------------------


def test_parse_grid_product_order():
    pts = parse_grid(["r=8,64", "d=0.15,0.3", "D=2,6,12"])
    assert len(pts) == 12
    assert pts[0] == {"r": 8.0, "d": 0.15, "top_d": 2} and pts[-1] == {"r": 64.0, "d": 0.3, "top_d": 12}
    for bad in (["x=1"], ["r=1", "r=2"], ["D=a"], ["r="]):
        with pytest.raises(cli.UsageError):
            parse_grid(bad)


def test_sweep_table_shape_and_rerun(tmp_path, cfg, data):
    args = ["sweep", "--config", str(cfg), "--data", str(data), "--grid", "D=1,3", "r=8",
            "--seeds", "0,1", "--episodes", "3"]
    assert main(args + ["--out", str(tmp_path / "s1")]) == EXIT_OK
    rows = (tmp_path / "s1" / "sweep.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["D", "r", "d", "seed", "I2A Top-1", "I2A Top-5", "I2A Top-10",
                                   "A2I R@1", "A2I R@5", "A2I R@10"]
    assert len(rows) == 1 + 2 * 2
    assert all(cell != "" for row in rows[1:] for cell in row.split("\t"))
    assert main(args + ["--checkpoint-dir", str(tmp_path / "s2")]) == EXIT_OK
    assert (tmp_path / "s1" / "sweep.tsv").read_bytes() == (tmp_path / "s2" / "sweep.tsv").read_bytes()


def test_degenerate_grid_matches_single_run(tmp_path, cfg, data):
    assert main(["sweep", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "s"),
                 "--grid", "D=3", "--episodes", "4"]) == EXIT_OK
    row = (tmp_path / "s" / "sweep.tsv").read_text().splitlines()[1].split("\t")
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "one"),
                 "--episodes", "4", "--seed", "0"]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(tmp_path / "one"), "--data", str(data), "--protocol", "i2a"]) == EXIT_OK
    rep = json.loads(next((tmp_path / "one" / "reports").glob("*.json")).read_text())
    assert float(row[4]) == rep["top_p"]["1"]


def test_sweep_rejects_out_of_range_grid(tmp_path, cfg, data):
    assert main(["sweep", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "s"),
                 "--grid", "d=2.0"]) == EXIT_VALIDATION
    assert not any((tmp_path / "s").glob("D*"))
    assert main(["sweep", "--data", str(data), "--out", str(tmp_path / "s"), "--grid", "q=1"]) == EXIT_USAGE


# -- dump-attention ------------------------------------------------------------------------


def test_dump_attention_skips_unknown_ids(tmp_path, run, data, capsys):
    out = tmp_path / "att"
    code = main(["dump-attention", "--checkpoint", str(run), "--data", str(data), "--images", "0,4242,3", "--out", str(out)])
    assert code == EXIT_VALIDATION
    assert "4242" in capsys.readouterr().err
    assert sorted(p.name for p in out.iterdir()) == [f"00000{i}.{ext}" for i in (0, 3) for ext in ("mft", "pgm", "txt")]
    M = read_tensor(out / "000000.mft")
    assert M.shape == (1, 4, 4) and M.min() >= 0 and M.max() <= 1
    pgm = (out / "000000.pgm").read_bytes()
    pixels = pgm[len(b"P5\n4 4\n255\n"):]
    assert max(pixels) == 255 and min(pixels) == 0
    again = tmp_path / "att2"
    main(["dump-attention", "--checkpoint", str(run), "--data", str(data), "--images", "0,3", "--out", str(again)])
    assert tree_bytes(out) == tree_bytes(again)


def test_console_script_runs():
    exe = shutil.which("mfhi")
    if exe is None:
        pytest.skip("console script not installed")
    res = subprocess.run([exe, "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("mfhi ")
