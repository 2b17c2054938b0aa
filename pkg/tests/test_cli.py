import csv
import json
import subprocess
import sys

import pytest

from sgad.cli import main, output_lock
from sgad.checkpoint import read_manifest

TINY = """
widths = 4,8
blocks_per_stage = 3
image_size = 8
num_classes = 5
bmnet_channels = 4
sgnet_widths = 4,4,8,8
epochs = 2
batch_size = 16
decay_epochs = 1
grad_log_start_epoch = 1
ramp_epochs = 2
n_train = 64
n_test = 32
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "run"
    assert main(["--command", "train", "--config", str(cfg), "--output-dir", str(out), "--smax", "0.5"]) == 0
    return cfg, out


def _args(cfg, out, command, *extra):
    return ["--command", command, "--config", str(cfg), "--output-dir", str(out), *extra]


def test_train_outputs(trained):
    _, out = trained
    assert (out / "checkpoint" / "manifest.json").exists()
    recs = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert recs[0]["kind"] == "header" and recs[0]["config"]["mapping"]["s_max"] == 0.5
    assert [r["epoch"] for r in recs if r["kind"] == "epoch"] == [0, 1]
    manifest = read_manifest(out / "checkpoint")
    assert manifest["state"]["epoch"] == 2
    assert "accuracy" in json.loads((out / "eval_report.json").read_text())


def test_eval_is_reproducible(trained, tmp_path):
    cfg, out = trained
    ck = ["--checkpoint", str(out / "checkpoint")]
    assert main(_args(cfg, tmp_path / "a", "eval", *ck)) == 0
    assert main(_args(cfg, tmp_path / "b", "eval", *ck)) == 0
    assert (tmp_path / "a" / "eval_report.json").read_bytes() == (tmp_path / "b" / "eval_report.json").read_bytes()


def test_eval_without_bmnet_flops(trained, tmp_path):
    cfg, out = trained
    ck = ["--checkpoint", str(out / "checkpoint")]
    main(_args(cfg, tmp_path / "a", "eval", *ck))
    main(_args(cfg, tmp_path / "b", "eval", *ck, "--include-bmnet-flops", "false"))
    with_bm = json.loads((tmp_path / "a" / "eval_report.json").read_text())["flops"]
    without = json.loads((tmp_path / "b" / "eval_report.json").read_text())["flops"]
    assert without["n_flops"] < with_bm["n_flops"]
    assert not without["include_bmnet"]


def test_analyze_writes_one_row_per_block(trained):
    cfg, out = trained
    assert main(_args(cfg, out, "analyze")) == 0
    rows = list(csv.DictReader(open(out / "analysis.csv")))
    assert len(rows) == 6
    assert [int(r["forced"]) for r in rows] == [0, 0, 0, 1, 0, 1]
    assert all(float(r["grad_l1_mean"]) >= 0 for r in rows)
    assert json.loads((out / "flops_report.json").read_text())["per_block_macs"][0] == int(rows[0]["macs"])


def test_prune_and_export(trained):
    cfg, out = trained
    assert main(_args(cfg, out, "prune")) == 0
    report = json.loads((out / "prune_report.json").read_text())
    assert report["params_after"] <= report["params_before"]
    assert (out / "pruned" / "manifest.json").exists()
    assert main(_args(cfg, out, "export")) == 0
    assert read_manifest(out / "inference")["kind"] == "inference"


def test_report_csvs(trained):
    cfg, out = trained
    assert main(_args(cfg, out, "report")) == 0
    steps = list(csv.DictReader(open(out / "report_steps.csv")))
    epochs = list(csv.DictReader(open(out / "report_epochs.csv")))
    assert len(steps) == 2 * 4 and len(epochs) == 2


def test_resume_extends_training(trained, tmp_path):
    cfg, out = trained
    longer = tmp_path / "longer.cfg"
    longer.write_text(TINY.replace("epochs = 2", "epochs = 3"))
    res = tmp_path / "res"
    assert main(_args(longer, res, "train", "--smax", "0.5", "--resume", str(out / "checkpoint"))) == 0
    assert read_manifest(res / "checkpoint")["state"]["epoch"] == 3
    recs = [json.loads(l) for l in (res / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs if r["kind"] == "epoch"] == [2]


def test_unknown_command_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["--command", "fly"])
    assert exc.value.code != 0


def test_bad_config_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 3\n")
    assert main(["--command", "train", "--config", str(bad), "--output-dir", str(tmp_path / "o")]) == 1
    assert "no_such_key" in capsys.readouterr().err


def test_missing_checkpoint_exits_nonzero(tmp_path):
    assert main(["--command", "eval", "--output-dir", str(tmp_path / "none")]) == 1


def test_locked_output_dir_is_refused(trained, tmp_path):
    cfg, _ = trained
    out = tmp_path / "locked"
    with output_lock(out):
        assert main(_args(cfg, out, "train")) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sgad", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--command" in res.stdout
