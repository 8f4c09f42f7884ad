import json

import numpy as np
import pytest

from flowvo import formats
from flowvo.cli import main
from flowvo.evaluation import integrate
from flowvo.geometry import RelativeMotion
from flowvo.model import load_checkpoint, save_checkpoint
from flowvo.trainer import TrainConfig, new_net, train

TINY_TRAIN = "iterations = 4\nbatch_size = 4\neval_every = 2\nlr = 1e-3\n"


@pytest.fixture
def dataset(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("count = 12  # samples\nseed = 3\nenvironments = 0 2\n")
    assert main(["generate", str(cfg), str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def test_generate_layout(dataset, tmp_path):
    names = sorted(p.name for p in dataset.iterdir())
    assert "meta" in names and "motions.txt" in names and "manifest.jsonl" in names
    assert sum(n.endswith(".uvfl") for n in names) == 12
    assert sum(n.endswith(".msk") for n in names) == 12
    record = json.loads((dataset / "manifest.jsonl").read_text())
    assert record["command"] == "generate" and record["seed"] == 3
    again = tmp_path / "again"
    assert main(["generate", str(tmp_path / "gen.cfg"), str(again)]) == 0
    assert (again / "motions.txt").read_bytes() == (dataset / "motions.txt").read_bytes()


def test_generate_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("count = 3\ncolour = red\n")
    assert main(["generate", str(cfg), str(tmp_path / "o")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_generate_unwritable(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("count = 2\n")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["generate", str(cfg), str(blocker / "sub")]) == 3


def test_output_root_from_environment(tmp_path, monkeypatch):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("count = 2\n")
    monkeypatch.setenv("FLOWVO_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["generate", str(cfg)]) == 0
    assert (tmp_path / "root" / "motions.txt").exists()


def test_train_writes_curve_and_checkpoint(dataset, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"dataset = data\ntest_dataset = data\n{TINY_TRAIN}")
    run = tmp_path / "run"
    assert main(["--seed", "1", "--threads", "1", "train", str(cfg), str(run)]) == 0
    header = (run / "curve.tsv").read_text().splitlines()[0].split("\t")
    assert header[:2] == ["step", "train"] and "test_test" in header
    final = (run / "checkpoint.bin").read_bytes()
    # resuming a finished run is a no-op
    assert main(["--seed", "1", "train", str(cfg), str(run), "--resume"]) == 0
    assert (run / "checkpoint.bin").read_bytes() == final
    assert len((run / "manifest.jsonl").read_text().splitlines()) == 2
    assert main(["--seed", "2", "train", str(cfg), str(run), "--resume"]) == 2


def test_resume_mid_run(dataset, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"dataset = data\n{TINY_TRAIN.replace('= 4', '= 8', 1)}")
    full = tmp_path / "full"
    assert main(["train", str(cfg), str(full)]) == 0
    # rebuild the step-4 checkpoint an interrupted run would have left behind
    ds, _ = formats.read_dataset(dataset)
    tc = TrainConfig(iterations=8, batch_size=4, eval_every=2, lr=1e-3)
    saved = {}

    def grab(step, net, opt):
        if step == 4:
            saved["args"] = (net.copy(), opt.t, [a.copy() for a in opt.state_arrays()])

    train(new_net(tc), ds, {}, tc, checkpoint=grab)
    net, t, arrays = saved["args"]
    echo = load_checkpoint(full / "checkpoint.bin")[1]["train_config"]
    part = tmp_path / "part"
    part.mkdir()
    save_checkpoint(part / "checkpoint.bin", net,
                    {"step": 4, "optimizer_t": t, "train_config": echo}, arrays)
    assert main(["train", str(cfg), str(part), "--resume"]) == 0
    assert (part / "checkpoint.bin").read_bytes() == (full / "checkpoint.bin").read_bytes()


def test_experiment_table_and_plotdata(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(TINY_TRAIN + "train_count = 16\ntest_count = 8\n")
    out = tmp_path / "exp"
    assert main(["experiment", "rcr_il", str(cfg), "--out", str(out)]) == 0
    rows = (out / "table.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["run", "rcr", "il", "train", "test_rcr", "test_fixed"]
    assert len(rows) == 5
    assert main(["plotdata", str(out)]) == 0
    panel = (out / "plot" / "rcr_il_fixed.tsv").read_text().splitlines()
    assert panel[0] == "step\ttrain_loss\ttest_loss"
    assert all(np.isfinite([float(v) for v in line.split("\t")]).all() for line in panel[1:])


def test_data_quantity_plotdata_per_size(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(TINY_TRAIN + "sizes = 8 16 32\ntest_count = 8\n")
    out = tmp_path / "dq"
    assert main(["experiment", "data_quantity", str(cfg), "--out", str(out)]) == 0
    assert main(["plotdata", str(out)]) == 0
    assert sorted(p.name for p in (out / "plot").iterdir()) == [
        "size_16.tsv", "size_32.tsv", "size_8.tsv"]


def test_experiment_is_reproducible(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(TINY_TRAIN + "train_count = 16\ntest_count = 8\n")
    for name in ("a", "b"):
        assert main(["experiment", "up_to_scale", str(cfg), "--out", str(tmp_path / name)]) == 0
    for f in ("table.tsv", "curves/full.tsv", "curves/norm.tsv", "curves/norm.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_unknown_experiment(tmp_path):
    assert main(["experiment", "bogus", "--out", str(tmp_path)]) == 2


def test_divergence_exit_code(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("iterations = 3\nbatch_size = 4\nlr = 1e300\noptimizer = sgd\n"
                   "train_count = 8\ntest_count = 4\n")
    assert main(["experiment", "rcr_il", str(cfg), "--out", str(tmp_path / "o")]) == 4


def test_plotdata_empty(tmp_path):
    assert main(["plotdata", str(tmp_path)]) == 3


def write_pair(tmp_path, est_fmt="kitti", gt_fmt="kitti", scale=1.0, n=120):
    rng = np.random.default_rng(0)
    gt = integrate([RelativeMotion(rng.normal(0, 0.2, 3) + [0, 0, 0.5], rng.normal(0, 0.05, 3))
                    for _ in range(n - 1)])
    est = gt.transformed(scale, np.eye(3), np.zeros(3))
    formats.write_trajectory(tmp_path / "est.txt", est, est_fmt)
    formats.write_trajectory(tmp_path / "gt.txt", gt, gt_fmt)
    return str(tmp_path / "est.txt"), str(tmp_path / "gt.txt")


def report_values(text):
    return dict(line.split("\t") for line in text.splitlines() if "\t" in line)


def test_eval_identical(tmp_path, capsys):
    est, gt = write_pair(tmp_path)
    assert main(["eval", est, gt, "--segments", "5", "10"]) == 0
    values = report_values(capsys.readouterr().out)
    assert float(values["ate"]) < 1e-9 and values["alignment"] == "similarity"


def test_eval_mixed_formats_and_scaled(tmp_path, capsys):
    est, gt = write_pair(tmp_path, "tum", "kitti", scale=0.5)
    out = tmp_path / "report.tsv"
    assert main(["eval", est, gt, "--segments", "5", "--output", str(out)]) == 0
    values = report_values(out.read_text())
    assert float(values["ate"]) < 1e-9
    assert main(["eval", est, gt, "--segments", "5", "--align", "none"]) == 0
    assert float(report_values(capsys.readouterr().out.split("metric")[-1])["ate"]) > 0.1


def test_eval_errors(tmp_path):
    est, gt = write_pair(tmp_path)
    lines = open(est).read().splitlines()
    (tmp_path / "short.txt").write_text("\n".join(lines[:50]) + "\n")
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    assert main(["eval", str(tmp_path / "short.txt"), gt]) == 5
    assert main(["eval", str(tmp_path / "bad.txt"), gt]) == 2
    assert main(["eval", str(tmp_path / "missing.txt"), gt]) == 3
