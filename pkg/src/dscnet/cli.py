"""``dscnet`` command line: gen, train, eval, inspect.

Exit status is 0 on success, 2 for usage, configuration or input errors,
and 1 when a run fails (for example a diverging loss).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .autodiff import ShapeError, Tensor
from .config import ConfigError, RunConfig
from .metrics import binarize
from .network import DSCNetModel, NetworkConfig, TrainConfig, evaluate, format_log, forward, predict, train
from .snake import export_kernel_trace, format_kernel_trace
from .synthdata import SceneTemplate, load_dataset, make_dataset, save_dataset
from .tensorio import FormatError, load_checkpoint, load_tensor, read_pgm, save_checkpoint, write_pgm
from .topology import compute_persistence, format_diagrams

logger = logging.getLogger("dscnet")

CHECKPOINT = "checkpoint.dstn"
LOG_CSV = "train_log.csv"

# overlay grey levels: dimmed image underneath, then agreement and the two
# kinds of disagreement
IMAGE_CEILING = 80
BAND_BOTH = 140
BAND_LABEL_ONLY = 200
BAND_PRED_ONLY = 255


class UsageError(Exception):
    pass


# -- helpers ----------------------------------------------------------------


@contextlib.contextmanager
def _threads(deterministic: bool):
    if not deterministic:
        yield
        return
    # the numba kernels are serial; BLAS is the only thread pool
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _run_config(args, extra: Optional[dict] = None) -> RunConfig:
    cfg = RunConfig()
    for k, v in (extra or {}).items():
        cfg.set(k, v)
    if getattr(args, "config", None):
        cfg.update_file(args.config)
    cfg.update_pairs(getattr(args, "set", None) or [])
    return cfg


def _network_config(cfg: RunConfig) -> NetworkConfig:
    try:
        return NetworkConfig(
            levels=cfg["model.levels"],
            base_channels=cfg["model.base_channels"],
            m=cfg["fusion.m"],
            p=cfg["fusion.p"],
            use_dsconv=cfg["model.use_dsconv"],
            eval_mode=cfg["fusion.eval_mode"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _model_meta(cfg: RunConfig) -> dict[str, str]:
    out = {}
    for k, v in cfg.items():
        if k.startswith(("model.", "fusion.")):
            out[k] = str(v).lower() if isinstance(v, bool) else str(v)
    return out


def _load_model(path, args) -> tuple[DSCNetModel, RunConfig]:
    ckpt = Path(path)
    try:
        tensors, meta = load_checkpoint(ckpt)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except FormatError as exc:
        raise UsageError(f"unreadable checkpoint {ckpt}: {exc}") from None
    known = {k: v for k, v in meta.items() if k in cfgmod.KEYS}
    cfg = _run_config(args, known)
    model = DSCNetModel(_network_config(cfg), seed=cfg["model.seed"])
    model.load_state(tensors)
    return model, cfg


def _read_map(path, binary: bool = False) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    try:
        if p.suffix.lower() == ".pgm":
            raw = read_pgm(p)
            return (raw >= 128).astype(np.float32) if binary else raw.astype(np.float32) / 255.0
        arr = load_tensor(p)
    except (FormatError, ValueError) as exc:
        raise UsageError(f"cannot read {p}: {exc}") from None
    arr = arr.reshape(arr.shape[-2:])
    return (arr > 0.5).astype(np.float32) if binary else arr.astype(np.float32)


def _dataset(directory, split=None):
    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise UsageError(f"no dataset at {d} (run `dscnet gen` first)")
    samples = load_dataset(d, split)
    if not samples:
        raise UsageError(f"dataset {d} has no {split} images")
    return samples


def _print_summary(report) -> None:
    for key, (m, s) in report.summary().items():
        print(f"{key:>10}  {m:.4f} ± {s:.4f}")


def _parse_point(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--point expects x,y integers, got {text!r}") from None
    return x, y


# -- commands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _run_config(args)
    for flag, key in (("n", "data.n"), ("seed", "data.seed"), ("size", "data.size")):
        if getattr(args, flag) is not None:
            cfg.set(key, getattr(args, flag))
    n, size = cfg["data.n"], cfg["data.size"]
    if n < 1:
        raise UsageError(f"--n must be at least 1, got {n}")
    if size < 8:
        raise UsageError(f"--size must be at least 8, got {size}")
    out = Path(args.out or cfg["data.dir"])
    template = SceneTemplate(
        size=(size, size),
        width=(cfg["data.width_min"], cfg["data.width_max"]),
        noise=cfg["data.noise"],
        branch_prob=cfg["data.branch_prob"],
    )
    samples = make_dataset(n, cfg["data.seed"], template)
    save_dataset(samples, out)
    print(f"wrote {n} images to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.loss:
        cfg.set("loss.type", args.loss)
    if args.epochs is not None:
        cfg.set("train.epochs", args.epochs)
    if args.data:
        cfg.set("data.dir", args.data)
    train_set = _dataset(cfg["data.dir"], "train")
    val_set = load_dataset(cfg["data.dir"], "test")
    netcfg = _network_config(cfg)
    try:
        tcfg = TrainConfig(
            epochs=cfg["train.epochs"],
            lr=cfg["train.lr"],
            momentum=cfg["train.momentum"],
            batch_size=cfg["train.batch_size"],
            seed=cfg["train.seed"],
            loss=cfg["loss.type"],
            topo_weight=cfg["loss.topo_weight"],
            warmup=cfg["loss.warmup"],
            patch=cfg["loss.patch"],
            val_limit=cfg["train.val_limit"],
            clip_norm=cfg["train.clip_norm"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    model = DSCNetModel(netcfg, seed=cfg["model.seed"])
    logger.info("model has %d parameters", model.parameter_count())
    log = train(model, train_set, val_set, tcfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / CHECKPOINT, model.state(), _model_meta(cfg))
    (out / LOG_CSV).write_text(format_log(log))
    (out / "run_config.txt").write_text(cfg.to_text())
    from . import plotting

    plotting.training_curve(log, out / "training_curve.png")
    if val_set:
        report = evaluate(model, val_set, threshold=cfg["eval.threshold"])
        print(f"validation ({len(val_set)} images)")
        _print_summary(report)
    print(f"checkpoint: {out / CHECKPOINT}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = _load_model(args.checkpoint, args)
    data = args.data or cfg["data.dir"]
    split = cfg["eval.split"]
    samples = _dataset(data, None if split == "all" else split)
    size = samples[0].image.shape[-1]
    if samples[0].image.shape[-2] % 2**model.config.levels or size % 2**model.config.levels:
        raise UsageError(f"image size {samples[0].image.shape[-2:]} does not fit a {model.config.levels}-level model")
    names = [f"{s.seed}" for s in samples]
    report = evaluate(model, samples, names, threshold=cfg["eval.threshold"])
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_csv())
    from . import plotting

    plotting.metric_summary(report, path.with_suffix(".png"))
    print(f"{len(samples)} images from {data} ({split})")
    _print_summary(report)
    return 0


def _layer_scale(block: str, levels: int) -> int:
    if block == "mid":
        return 2**levels
    return 2 ** int(block[3:])


def cmd_inspect(args) -> int:
    if args.point is None and not args.diagrams:
        raise UsageError("inspect needs --point x,y and/or --diagrams")
    model, cfg = _load_model(args.checkpoint, args)
    image = _read_map(args.image)
    label = _read_map(args.label, binary=True) if args.label else None
    H, W = image.shape
    if label is not None and label.shape != image.shape:
        raise UsageError(f"label shape {label.shape} differs from image shape {image.shape}")
    L = model.config.levels
    if H % 2**L or W % 2**L:
        raise UsageError(f"image size {H}x{W} not divisible by 2**{L}")
    point = _parse_point(args.point) if args.point is not None else None
    if point is not None and not (0 <= point[0] < W and 0 <= point[1] < H):
        raise UsageError(f"point {point[0]},{point[1]} outside the {W}x{H} image")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from . import plotting

    if args.pred:
        prob = _read_map(args.pred)
        if prob.shape != image.shape:
            raise UsageError(f"prediction shape {prob.shape} differs from image shape {image.shape}")
    else:
        prob = predict(model, image[None, None])[0, 0]

    if point is not None:
        capture: dict = {}
        forward(model, Tensor(image[None, None]), training=False, capture=capture)
        layers = {}
        for bname, blk in model.blocks().items():
            for tname, layer in blk.dsconv_layers().items():
                layers[f"{bname}.{tname}"] = (bname, layer)
        mapped = {}
        for name, (bname, layer) in layers.items():
            s = _layer_scale(bname, L)
            trace = export_kernel_trace(capture[name], layer, (point[0] // s, point[1] // s))
            (out / f"trace_{name}.txt").write_text(format_kernel_trace(trace))
            mapped[name] = [(x * s + (s - 1) / 2, y * s + (s - 1) / 2) for x, y in trace]
        if not layers:
            print("checkpoint has no DSConv layers; no kernel traces written")
        else:
            plotting.kernel_traces(image, mapped, out / "kernel_traces.png")
            write_pgm(out / "trace_overlay.pgm", _trace_overlay(image, mapped))
            print(f"kernel traces for {len(layers)} layers at ({point[0]},{point[1]})")

    if args.diagrams:
        dgm = compute_persistence(prob)
        (out / "diagrams_pred.txt").write_text(format_diagrams(*dgm))
        shown = {"prediction": dgm}
        if label is not None:
            ldgm = compute_persistence(label)
            (out / "diagrams_label.txt").write_text(format_diagrams(*ldgm))
            shown["label"] = ldgm
        plotting.persistence_diagrams(shown, out / "diagrams.png")
        print(f"prediction diagram: {len(dgm[0])} dim-0 and {len(dgm[1])} dim-1 points")

    write_pgm(out / "overlay.pgm", render_overlay(image, binarize(prob, cfg["eval.threshold"]), label))
    return 0


def render_overlay(image: np.ndarray, pred: np.ndarray, label: Optional[np.ndarray]) -> np.ndarray:
    """uint8 overlay: dimmed image, agreement, label-only and prediction-only bands."""
    out = np.rint(np.clip(image, 0.0, 1.0) * IMAGE_CEILING).astype(np.uint8)
    p = pred > 0
    if label is None:
        out[p] = BAND_BOTH
        return out
    lab = label > 0
    out[p & lab] = BAND_BOTH
    out[lab & ~p] = BAND_LABEL_ONLY
    out[p & ~lab] = BAND_PRED_ONLY
    return out


def _trace_overlay(image: np.ndarray, traces: dict) -> np.ndarray:
    out = np.rint(np.clip(image, 0.0, 1.0) * IMAGE_CEILING).astype(np.uint8)
    H, W = out.shape
    for pts in traces.values():
        for x, y in pts:
            c, r = int(round(x)), int(round(y))
            if 0 <= r < H and 0 <= c < W:
                out[r, c] = 255
    return out


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (see `dscnet keys`)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="dscnet",
        description="Snake-convolution segmentation toy: data, training, evaluation, inspection.",
        epilog="Config keys and defaults:\n" + cfgmod.describe(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--n", type=int, help="number of images (data.n)")
    g.add_argument("--seed", type=int, help="base seed (data.seed)")
    g.add_argument("--size", type=int, help="image side (data.size)")
    g.add_argument("--out", help="output directory (data.dir)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train and write checkpoint plus log")
    t.add_argument("--loss", choices=["ce", "tc"], help="loss.type")
    t.add_argument("--epochs", type=int, help="train.epochs")
    t.add_argument("--data", help="dataset directory (data.dir)")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint, write a report CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (data.dir)")
    e.add_argument("--report", required=True, help="CSV path; a box plot PNG is written beside it")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", parents=[common], help="kernel traces, diagrams and overlays")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True, help="input image (.pgm or .dstn)")
    i.add_argument("--label", help="ground-truth mask (.pgm or .dstn)")
    i.add_argument("--pred", help="use this probability map instead of the model output")
    i.add_argument("--point", help="x,y output position for kernel traces")
    i.add_argument("--diagrams", action="store_true", help="dump persistence diagrams")
    i.add_argument("--out", required=True, help="output directory")
    i.set_defaults(func=cmd_inspect)

    k = sub.add_parser("keys", help="list config keys and defaults")
    k.set_defaults(func=lambda a: print(cfgmod.describe()) or 0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with _threads(getattr(args, "deterministic", False)):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dscnet: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ShapeError) as exc:
        print(f"dscnet: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        logger.debug("failure", exc_info=True)
        print(f"dscnet: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
