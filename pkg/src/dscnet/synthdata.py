"""Synthetic tubular images: thick quadratic Bezier curves with optional
branches and additive Gaussian noise, plus their exact masks.

Randomness comes from NumPy's Philox (4x64, 10 rounds) counter-based bit
generator keyed through a ``SeedSequence(seed)`` whose two spawned children
drive the scene layout and the rendering (branches, noise) respectively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensorio import load_tensor, read_pgm, save_tensor, write_pgm


@dataclass
class Curve:
    p0: tuple
    p1: tuple
    p2: tuple
    width: float

    def sample(self, spacing: float = 0.5) -> np.ndarray:
        ctrl = np.array([self.p0, self.p1, self.p2], dtype=np.float64)
        rough = np.linalg.norm(np.diff(ctrl, axis=0), axis=1).sum()
        n = max(2, int(np.ceil(rough / spacing)) + 1)
        t = np.linspace(0.0, 1.0, n)[:, None]
        return (1 - t) ** 2 * ctrl[0] + 2 * (1 - t) * t * ctrl[1] + t**2 * ctrl[2]

    def point(self, t: float) -> np.ndarray:
        ctrl = np.array([self.p0, self.p1, self.p2], dtype=np.float64)
        return (1 - t) ** 2 * ctrl[0] + 2 * (1 - t) * t * ctrl[1] + t**2 * ctrl[2]


@dataclass
class TubularScene:
    seed: int
    size: tuple = (64, 64)  # (H, W)
    curves: list = field(default_factory=list)
    branch_prob: float = 0.0
    noise: float = 0.0
    background: float = 0.2
    foreground: float = 0.8

    def validate(self) -> None:
        H, W = self.size
        for c in self.curves:
            if c.width < 1:
                raise ValueError(f"curve width must be >= 1, got {c.width}")
            for x, y in (c.p0, c.p1, c.p2):
                if not (0 <= x <= W - 1 and 0 <= y <= H - 1):
                    raise ValueError(f"control point ({x}, {y}) outside {W}x{H} image")


@dataclass
class SceneTemplate:
    size: tuple = (64, 64)
    curves: tuple = (1, 3)  # inclusive range of trunk curves
    width: tuple = (1.0, 3.0)
    branch_prob: float = 0.3
    noise: float = 0.3
    background: float = 0.2
    foreground: float = 0.8


@dataclass
class Sample:
    image: np.ndarray  # [1, 1, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] uint8 in {0, 1}
    seed: int
    split: str


def _streams(seed: int):
    layout, render = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.Philox(layout)), np.random.Generator(np.random.Philox(render))


def random_scene(seed: int, template: SceneTemplate = SceneTemplate()) -> TubularScene:
    rng, _ = _streams(seed)
    H, W = template.size
    lo = np.array([0.0, 0.0])
    hi = np.array([W - 1.0, H - 1.0])
    curves = []
    for _ in range(int(rng.integers(template.curves[0], template.curves[1] + 1))):
        while True:
            p0, p2 = rng.uniform(lo, hi), rng.uniform(lo, hi)
            if np.linalg.norm(p2 - p0) >= 0.5 * min(H, W):
                break
        p1 = rng.uniform(lo, hi)
        width = float(rng.uniform(*template.width))
        curves.append(Curve(tuple(p0), tuple(p1), tuple(p2), width))
    return TubularScene(
        seed=seed,
        size=(H, W),
        curves=curves,
        branch_prob=template.branch_prob,
        noise=template.noise,
        background=template.background,
        foreground=template.foreground,
    )


def _rasterize(mask: np.ndarray, pts: np.ndarray, width: float) -> None:
    """Mark pixels whose centre lies within ``width / 2`` of the polyline."""
    H, W = mask.shape
    r = width / 2.0
    x0, y0 = np.floor(pts.min(axis=0) - r).astype(int)
    x1, y1 = np.ceil(pts.max(axis=0) + r).astype(int)
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, W - 1), min(y1, H - 1)
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    a, b = pts[:-1], pts[1:]
    ab = b - a
    len2 = (ab**2).sum(axis=1)
    len2 = np.where(len2 == 0, 1.0, len2)
    best = np.full(len(pix), np.inf)
    for s in range(0, len(a), 64):
        aa, vv, ll = a[s : s + 64], ab[s : s + 64], len2[s : s + 64]
        ap = pix[:, None, :] - aa[None]
        t = np.clip((ap * vv[None]).sum(-1) / ll[None], 0.0, 1.0)
        d2 = ((ap - t[..., None] * vv[None]) ** 2).sum(-1)
        best = np.minimum(best, d2.min(axis=1))
    hit = best <= r * r + 1e-9
    mask[ys.ravel()[hit], xs.ravel()[hit]] = 1


def generate(scene: TubularScene) -> tuple[np.ndarray, np.ndarray]:
    """Render ``scene`` to ``(image [1,1,H,W] float32, mask [H,W] uint8)``."""
    scene.validate()
    _, rng = _streams(scene.seed)
    H, W = scene.size
    mask = np.zeros((H, W), dtype=np.uint8)
    for curve in scene.curves:
        pts = curve.sample()
        if np.all(np.abs(pts - pts[0]) < 1e-12):
            raise ValueError("degenerate zero-length curve")
        _rasterize(mask, pts, curve.width)
        if scene.branch_prob > 0 and rng.random() < scene.branch_prob:
            start = curve.point(rng.uniform(0.2, 0.8))
            end = rng.uniform([0.0, 0.0], [W - 1.0, H - 1.0])
            mid = 0.5 * (start + end) + rng.normal(0.0, 0.15 * min(H, W), 2)
            mid = np.clip(mid, [0.0, 0.0], [W - 1.0, H - 1.0])
            branch = Curve(tuple(start), tuple(mid), tuple(end), max(1.0, curve.width * rng.uniform(0.5, 1.0)))
            bpts = branch.sample()
            if not np.all(np.abs(bpts - bpts[0]) < 1e-12):
                _rasterize(mask, bpts, branch.width)
    image = np.where(mask > 0, scene.foreground, scene.background).astype(np.float64)
    if scene.noise > 0:
        image = np.clip(image + rng.normal(0.0, scene.noise, image.shape), 0.0, 1.0)
    return image.astype(np.float32)[None, None], mask


def make_dataset(n: int, seed: int, template: SceneTemplate = SceneTemplate()) -> list[Sample]:
    """``n`` samples with seeds ``seed + i``; even indices train, odd test."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    out = []
    for i in range(n):
        image, mask = generate(random_scene(seed + i, template))
        out.append(Sample(image, mask, seed + i, split_of(i)))
    return out


def split_of(index: int) -> str:
    return "train" if index % 2 == 0 else "test"


# -- on-disk layout ----------------------------------------------------------

MANIFEST = "manifest.txt"


def save_dataset(samples: list[Sample], out_dir) -> None:
    """Write PGMs, DSTN tensors and ``manifest.txt`` (index seed split)."""
    out = Path(out_dir)
    for sub in ("images", "masks", "tensors"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = ["# index seed split"]
    for i, s in enumerate(samples):
        name = f"{i:04d}"
        write_pgm(out / "images" / f"{name}.pgm", s.image[0, 0])
        write_pgm(out / "masks" / f"{name}.pgm", s.mask.astype(np.uint8) * 255)
        save_tensor(out / "tensors" / f"{name}_image.dstn", s.image)
        save_tensor(out / "tensors" / f"{name}_mask.dstn", s.mask.astype(np.float32))
        lines.append(f"{i} {s.seed} {s.split}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def load_dataset(data_dir, split: Optional[str] = None) -> list[Sample]:
    """Load a directory written by :func:`save_dataset`.

    Without DSTN tensors, images and masks are read from the PGMs (mask
    pixels >= 128 are foreground), which also covers externally converted
    data laid out the same way.
    """
    d = Path(data_dir)
    manifest = d / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        idx, seed, sp = line.split()[:3]
        if split is not None and sp != split:
            continue
        name = f"{int(idx):04d}"
        timg = d / "tensors" / f"{name}_image.dstn"
        if timg.exists():
            image = load_tensor(timg)
            image = image.reshape(1, 1, *image.shape[-2:])
            mask = (load_tensor(d / "tensors" / f"{name}_mask.dstn") > 0.5).astype(np.uint8)
        else:
            image = (read_pgm(d / "images" / f"{name}.pgm").astype(np.float32) / 255.0)[None, None]
            mask = (read_pgm(d / "masks" / f"{name}.pgm") >= 128).astype(np.uint8)
        out.append(Sample(image, mask.reshape(image.shape[-2:]), int(seed), sp))
    return out
