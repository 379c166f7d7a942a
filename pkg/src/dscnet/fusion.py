"""Multi-view fusion of kernel templates with random template dropping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

STANDARD, SNAKE_X, SNAKE_Y = "standard-conv", "dsconv-x", "dsconv-y"
DEFAULT_COMPOSITION = (STANDARD, SNAKE_X, SNAKE_Y)


@dataclass
class TemplateBank:
    templates: list
    composition: tuple

    @property
    def m(self) -> int:
        return len(self.templates)


@dataclass
class DropMask:
    r: np.ndarray  # length-m vector of 0/1
    p: float

    @property
    def m(self) -> int:
        return len(self.r)

    @property
    def kept_count(self) -> int:
        return int(self.r.sum())


def kept_count(m: int, p: float) -> int:
    # the tiny epsilon keeps e.g. 3 * 0.67 = 2.0100000000000002 and 10 * 0.3 = 2.9999999999999996 honest
    return int(math.floor(m * p + 1e-9))


def build_templates(x: Tensor, branches: Sequence[Callable[[Tensor], Tensor]], composition=None, keep=None) -> TemplateBank:
    """Evaluate every branch on ``x``.

    With a ``keep`` vector (training with a known drop mask) dropped
    branches are skipped and their slots hold ``None``.
    """
    if not branches:
        raise ValueError("need at least one template branch")
    if keep is not None and len(keep) != len(branches):
        raise ShapeError(f"keep vector covers {len(keep)} templates, got {len(branches)} branches")
    templates = [br(x) if keep is None or keep[i] else None for i, br in enumerate(branches)]
    present = [t for t in templates if t is not None]
    shape = present[0].shape
    for t in present[1:]:
        if t.shape != shape:
            raise ShapeError(f"template shapes differ: {shape} vs {t.shape}")
    if composition is None:
        composition = tuple(DEFAULT_COMPOSITION[i % 3] for i in range(len(templates)))
    return TemplateBank(templates, tuple(composition))


def sample_drop_mask(m: int, p: float, rng: np.random.Generator) -> DropMask:
    """Keep a uniformly random subset of exactly ``floor(m*p)`` templates."""
    if not 0 < p <= 1:
        raise ValueError(f"keep probability must lie in (0, 1], got {p}")
    k = kept_count(m, p)
    if k == 0:
        raise ValueError(f"floor({m}*{p}) = 0 would drop every template")
    r = np.zeros(m, dtype=np.int64)
    r[rng.choice(m, size=k, replace=False)] = 1
    return DropMask(r, p)


def fuse(bank: TemplateBank, mask: DropMask | None, training: bool) -> Tensor:
    """Sum the templates.

    In training the kept templates are summed and scaled by ``m / kept`` so
    the expectation over masks equals the evaluation-mode plain sum.
    """
    if not training or mask is None:
        if any(t is None for t in bank.templates):
            raise ValueError("evaluation-mode fusion needs every template")
        out = bank.templates[0]
        for t in bank.templates[1:]:
            out = ad.add(out, t)
        return out
    if mask.m != bank.m:
        raise ShapeError(f"mask covers {mask.m} templates, bank has {bank.m}")
    kept = [t for t, keep in zip(bank.templates, mask.r) if keep]
    out = kept[0]
    for t in kept[1:]:
        out = ad.add(out, t)
    factor = bank.m / len(kept)
    return out if factor == 1 else ad.scale(out, factor)
