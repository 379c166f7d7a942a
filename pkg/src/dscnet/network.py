"""Toy U-shaped segmentation network with snake-convolution fusion blocks,
its plain-convolution baseline, and the training loop."""

from __future__ import annotations

import logging
import math
import copy
from dataclasses import dataclass, asdict
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor
from .fusion import DEFAULT_COMPOSITION, SNAKE_X, SNAKE_Y, DropMask, build_templates, fuse, kept_count, sample_drop_mask
from .metrics import MetricsReport, betti_error, binarize, dice
from .snake import Axis, DSConvLayer
from .topology import tc_loss_terms

logger = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "loss_ce", "loss_topo", "val_dice", "val_betti0_err"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    levels: int = 2
    base_channels: int = 8
    m: int = 3
    p: float = 1.0
    use_dsconv: bool = True
    eval_mode: str = "expectation"  # or "saved_mask"

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("levels and base_channels must be >= 1")
        if self.m < 1:
            raise ValueError("fusion needs m >= 1 templates")
        if self.eval_mode not in ("expectation", "saved_mask"):
            raise ValueError(f"unknown fusion eval mode {self.eval_mode!r}")
        if self.use_dsconv and kept_count(self.m, self.p) < 1:
            raise ValueError(f"floor(m*p) = 0 for m={self.m}, p={self.p}")


class Conv:
    def __init__(self, cin: int, cout: int, k: int, rng, bias: bool = True, gain: float = 1.0):
        std = gain * math.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.k = k

    def parameters(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, padding=self.k // 2)


class FusionBlock:
    """``m`` bias-free template branches, fused, plus a shared bias and ReLU."""

    def __init__(self, cin: int, cout: int, m: int, p: float, rng, eval_mode: str = "expectation"):
        gain = 1.0 / math.sqrt(m)
        self.composition = tuple(DEFAULT_COMPOSITION[i % 3] for i in range(m))
        self.branches = []
        for kind in self.composition:
            if kind == SNAKE_X or kind == SNAKE_Y:
                layer = DSConvLayer(cin, cout, Axis.X if kind == SNAKE_X else Axis.Y, bias=False, rng=rng)
                layer.path_weights.data *= gain
                self.branches.append(layer)
            else:
                self.branches.append(Conv(cin, cout, 3, rng, bias=False, gain=gain))
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.m, self.p = m, p
        self.eval_mode = eval_mode
        self.last_mask: Optional[DropMask] = None
        self.saved_mask: Optional[DropMask] = None

    def parameters(self) -> dict[str, Tensor]:
        out = {"bias": self.bias}
        for i, br in enumerate(self.branches):
            for k, v in br.parameters().items():
                out[f"t{i}.{k}"] = v
        return out

    def dsconv_layers(self) -> dict[str, DSConvLayer]:
        return {f"t{i}": br for i, br in enumerate(self.branches) if isinstance(br, DSConvLayer)}

    def __call__(self, x: Tensor, training: bool, rng, capture: Optional[dict] = None, name: str = "") -> Tensor:
        if capture is not None:
            for key in self.dsconv_layers():
                capture[f"{name}.{key}"] = x
        if training:
            mask = sample_drop_mask(self.m, self.p, rng)
            self.last_mask = mask
            y = fuse(build_templates(x, self.branches, self.composition, keep=mask.r), mask, training=True)
        elif self.eval_mode == "saved_mask" and self.saved_mask is not None:
            mask = self.saved_mask
            y = fuse(build_templates(x, self.branches, self.composition, keep=mask.r), mask, training=True)
        else:
            y = fuse(build_templates(x, self.branches, self.composition), None, training=False)
        return ad.relu(ad.channel_bias(y, self.bias))


class PlainBlock:
    def __init__(self, cin: int, cout: int, rng):
        self.conv = Conv(cin, cout, 3, rng)

    def parameters(self) -> dict[str, Tensor]:
        return self.conv.parameters()

    def dsconv_layers(self) -> dict:
        return {}

    def __call__(self, x: Tensor, training: bool, rng, capture=None, name: str = "") -> Tensor:
        return ad.relu(self.conv(x))


class DSCNetModel:
    """Encoder of ``levels`` blocks with 2x2 max pooling, a bottleneck block,
    and a mirrored decoder (nearest upsampling, 1x1 conv, skip concat,
    block) ending in a 1x1 logit head."""

    def __init__(self, config: NetworkConfig = NetworkConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        ch = [config.base_channels * 2**l for l in range(config.levels + 1)]

        def block(cin, cout):
            if config.use_dsconv:
                return FusionBlock(cin, cout, config.m, config.p, rng, config.eval_mode)
            return PlainBlock(cin, cout, rng)

        self.encoder = [block(1 if l == 0 else ch[l - 1], ch[l]) for l in range(config.levels)]
        self.bottleneck = block(ch[config.levels - 1], ch[config.levels])
        self.up = [Conv(ch[l + 1], ch[l], 1, rng) for l in range(config.levels)]
        self.decoder = [block(2 * ch[l], ch[l]) for l in range(config.levels)]
        self.head = Conv(ch[0], 1, 1, rng)
        self.head.bias.data[:] = -1.5

    def blocks(self) -> dict:
        out = {f"enc{l}": b for l, b in enumerate(self.encoder)}
        out["mid"] = self.bottleneck
        out.update({f"dec{l}": b for l, b in enumerate(self.decoder)})
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, blk in self.blocks().items():
            for k, v in blk.parameters().items():
                out[f"{name}.{k}"] = v
        for l, conv in enumerate(self.up):
            for k, v in conv.parameters().items():
                out[f"up{l}.{k}"] = v
        for k, v in self.head.parameters().items():
            out[f"head.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def fusion_blocks(self) -> dict[str, FusionBlock]:
        return {k: b for k, b in self.blocks().items() if isinstance(b, FusionBlock)}

    def save_masks(self) -> None:
        """Keep each block's most recent training mask for ``saved_mask`` evaluation."""
        for blk in self.fusion_blocks().values():
            if blk.last_mask is not None:
                blk.saved_mask = blk.last_mask

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.named_parameters().items()}
        for name, blk in self.fusion_blocks().items():
            if blk.saved_mask is not None:
                out[f"{name}.saved_mask"] = blk.saved_mask.r.astype(np.float32)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ShapeError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"checkpoint tensor {k} has shape {state[k].shape}, model expects {p.shape}")
            p.data[...] = state[k]
        for name, blk in self.fusion_blocks().items():
            r = state.get(f"{name}.saved_mask")
            if r is not None:
                blk.saved_mask = DropMask(r.astype(np.int64), blk.p)

    def __call__(self, image, training: bool = False, rng=None, capture: Optional[dict] = None) -> Tensor:
        return forward(self, image, training, rng, capture)


def forward(model: DSCNetModel, image, training: bool = False, rng=None, capture: Optional[dict] = None) -> Tensor:
    """Logits [B,1,H,W]. ``rng`` is consumed only for training-mode drop masks;
    ``capture`` (if given) receives the input of every DSConv layer."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    L = model.config.levels
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected [B,1,H,W] image, got {x.shape}")
    if x.shape[2] % 2**L or x.shape[3] % 2**L:
        raise ShapeError(f"spatial size {x.shape[2:]} not divisible by 2**{L}")
    if training and rng is None and model.config.use_dsconv:
        raise ValueError("training mode needs an rng for the drop masks")
    skips = []
    for l, blk in enumerate(model.encoder):
        x = blk(x, training, rng, capture, f"enc{l}")
        skips.append(x)
        x = ad.max_pool2x2(x)
    x = model.bottleneck(x, training, rng, capture, "mid")
    for l in reversed(range(L)):
        x = ad.relu(model.up[l](ad.upsample_nearest2x(x)))
        x = ad.concat_channels(x, skips[l])
        x = model.decoder[l](x, training, rng, capture, f"dec{l}")
    return model.head(x)


def predict(model: DSCNetModel, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Foreground probabilities for a stack of images [N,1,H,W]."""
    out = []
    with ad.no_grad():
        for s in range(0, len(images), batch_size):
            logits = forward(model, images[s : s + batch_size], training=False)
            out.append(ad.sigmoid(logits).data)
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:], np.float32)


def evaluate(model: DSCNetModel, samples, names=None, threshold: float = 0.5) -> MetricsReport:
    images = np.concatenate([s.image for s in samples])
    probs = predict(model, images)
    report = MetricsReport(threshold=threshold)
    for i, (s, prob) in enumerate(zip(samples, probs)):
        report.add(names[i] if names else f"{i:04d}", prob[0], s.mask)
    return report


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    loss: str = "ce"  # or "tc"
    topo_weight: float = 1.0
    warmup: int = 5
    patch: int = 32  # 0 = whole image
    val_limit: int = 32
    clip_norm: float = 1.0  # global gradient-norm cap, 0 = off

    def __post_init__(self):
        if self.loss not in ("ce", "tc"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class TrainState:
    """Everything needed to continue a run bit-identically after ``epoch``."""

    epoch: int
    params: dict[str, np.ndarray]
    velocity: list[np.ndarray]
    rng_state: dict
    log: list[dict]


def train(
    model: DSCNetModel,
    train_samples,
    val_samples,
    cfg: TrainConfig = TrainConfig(),
    resume: Optional[TrainState] = None,
    on_epoch: Optional[Callable[[TrainState], None]] = None,
) -> list[dict]:
    """SGD training; returns one log row per epoch (see ``LOG_HEADER``).

    ``on_epoch`` receives a :class:`TrainState` after every epoch and ``resume``
    continues from one. Because the topological term is off during warm-up, a
    CE run's state at ``epoch == warmup`` is a valid starting point for the
    matching TC run.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    images = np.concatenate([s.image for s in train_samples]).astype(np.float32)
    labels = np.stack([s.mask for s in train_samples])[:, None].astype(np.float32)
    opt = ad.SGD(model.parameters(), cfg.lr, cfg.momentum, skip_missing=True)
    val = list(val_samples)[: cfg.val_limit] if cfg.val_limit else list(val_samples)
    log = []
    first = 1
    if resume is not None:
        model.load_state(resume.params)
        for v, r in zip(opt._velocity, resume.velocity, strict=True):
            v[...] = r
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        log = copy.deepcopy(resume.log)
        first = resume.epoch + 1
    for epoch in range(first, cfg.epochs + 1):
        topo_on = cfg.loss == "tc" and epoch > cfg.warmup
        perm = rng.permutation(len(images))
        ce_sum = topo_sum = 0.0
        nb = 0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            x, y = Tensor(images[idx]), labels[idx]
            try:
                logits = forward(model, x, training=True, rng=rng)
                if topo_on:
                    ce, topo = tc_loss_terms(logits, y, patch=cfg.patch or None)
                    loss = ad.add(ce, ad.scale(topo, cfg.topo_weight))
                    topo_sum += topo.item()
                else:
                    ce = loss = ad.cross_entropy(logits, y)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {nb}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"epoch {epoch}, batch {nb}: loss {loss.item()}")
            ce_sum += ce.item()
            opt.zero_grad()
            ad.backward(loss)
            if cfg.clip_norm > 0:
                ad.clip_grad_norm(model.parameters(), cfg.clip_norm)
            opt.step()
            nb += 1
        row = {"epoch": epoch, "loss_ce": ce_sum / nb, "loss_topo": topo_sum / nb}
        if val:
            probs = predict(model, np.concatenate([v.image for v in val]))
            preds = [binarize(p[0]) for p in probs]
            row["val_dice"] = float(np.mean([dice(p, v.mask) for p, v in zip(preds, val)]))
            row["val_betti0_err"] = float(np.mean([betti_error(p, v.mask)[0] for p, v in zip(preds, val)]))
        else:
            row["val_dice"] = row["val_betti0_err"] = float("nan")
        logger.info("epoch %d: ce %.4f topo %.4f val dice %.4f", epoch, row["loss_ce"], row["loss_topo"], row["val_dice"])
        log.append(row)
        if on_epoch is not None:
            on_epoch(
                TrainState(
                    epoch,
                    {k: v.copy() for k, v in model.state().items()},
                    [v.copy() for v in opt._velocity],
                    copy.deepcopy(rng.bit_generator.state),
                    copy.deepcopy(log),
                )
            )
    model.save_masks()
    return log


def format_log(log: list[dict]) -> str:
    lines = [",".join(LOG_HEADER)]
    for r in log:
        lines.append(f"{r['epoch']},{r['loss_ce']:.6f},{r['loss_topo']:.6f},{r['val_dice']:.4f},{r['val_betti0_err']:.4f}")
    return "\n".join(lines) + "\n"


def config_meta(config: NetworkConfig) -> dict[str, str]:
    return {f"model.{k}": str(v) for k, v in asdict(config).items()}
