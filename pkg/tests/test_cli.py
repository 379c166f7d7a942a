import numpy as np
import pytest

from dscnet.cli import BAND_BOTH, BAND_LABEL_ONLY, BAND_PRED_ONLY, main, render_overlay
from dscnet.snake import parse_kernel_trace
from dscnet.tensorio import load_checkpoint, read_pgm

FAST = ["--set", "train.batch_size=2", "--set", "train.val_limit=2"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen", "--n", "6", "--size", "16", "--seed", "3", "--out", str(data)]) == 0
    out = root / "run"
    assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--deterministic"] + FAST) == 0
    return root, data, out


def test_gen_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--n", "3", "--size", "16", "--out", str(tmp_path / name)]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b and "manifest.txt" in a and "images/0002.pgm" in a


def test_train_is_byte_identical(run, tmp_path):
    root, data, out = run
    again = tmp_path / "again"
    assert main(["train", "--data", str(data), "--out", str(again), "--epochs", "1", "--deterministic"] + FAST) == 0
    assert tree(out) == tree(again)
    assert set(tree(out)) >= {"checkpoint.dstn", "train_log.csv", "run_config.txt", "training_curve.png"}


def test_train_outputs(run, capsys):
    _, _, out = run
    log = (out / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss_ce,loss_topo,val_dice,val_betti0_err" and len(log) == 2
    _, meta = load_checkpoint(out / "checkpoint.dstn")
    assert meta["model.use_dsconv"] == "true" and meta["fusion.m"] == "3"


def test_eval_writes_report(run, capsys):
    root, data, out = run
    report = root / "rep" / "report.csv"
    assert main(["eval", "--checkpoint", str(out / "checkpoint.dstn"), "--data", str(data), "--report", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "image,dice,cldice,betti0_err,betti1_err,hausdorff,acc,auc"
    assert len(lines) == 1 + 3 + 1 and lines[-1].startswith("mean±std,")
    assert report.with_suffix(".png").exists()
    assert "dice" in capsys.readouterr().out


def test_inspect_traces_and_diagrams(run):
    root, data, out = run
    dest = root / "inspect"
    args = ["inspect", "--checkpoint", str(out / "checkpoint.dstn"), "--image", str(data / "images" / "0000.pgm")]
    args += ["--label", str(data / "masks" / "0000.pgm"), "--point", "8,8", "--diagrams", "--out", str(dest)]
    assert main(args) == 0
    traces = sorted(p.name for p in dest.glob("trace_*.txt"))
    assert len(traces) == 5 * 2  # two snake templates in each of five blocks
    rows = parse_kernel_trace((dest / "trace_enc0.t1.txt").read_text())
    assert [c for c, _, _ in rows] == list(range(-4, 5))
    for name in ("diagrams_pred.txt", "diagrams_label.txt", "diagrams.png", "kernel_traces.png", "overlay.pgm"):
        assert (dest / name).exists()
    assert read_pgm(dest / "overlay.pgm").shape == (16, 16)


@pytest.mark.parametrize(
    "argv",
    [
        ["gen", "--n", "0", "--out", "x"],
        ["gen", "--size", "4", "--out", "x"],
        ["gen", "--set", "data.bogus=1", "--out", "x"],
        ["eval", "--checkpoint", "missing.dstn", "--report", "r.csv"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_checkpoint_config_mismatch_exits_2(run, tmp_path):
    _, data, out = run
    argv = ["eval", "--checkpoint", str(out / "checkpoint.dstn"), "--data", str(data), "--report", str(tmp_path / "r.csv")]
    assert main(argv + ["--set", "model.base_channels=4"]) == 2


def test_inspect_point_outside_exits_2(run, tmp_path):
    _, data, out = run
    argv = ["inspect", "--checkpoint", str(out / "checkpoint.dstn"), "--image", str(data / "images" / "0000.pgm")]
    assert main(argv + ["--point", "16,0", "--out", str(tmp_path)]) == 2
    assert main(argv + ["--out", str(tmp_path)]) == 2


def test_missing_dataset_exits_2(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_overlay_bands():
    image = np.full((2, 2), 1.0)
    pred = np.array([[1, 1], [0, 0]])
    label = np.array([[1, 0], [1, 0]])
    out = render_overlay(image, pred, label)
    assert out.tolist() == [[BAND_BOTH, BAND_PRED_ONLY], [BAND_LABEL_ONLY, 80]]
