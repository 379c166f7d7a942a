"""Segmentation metrics: volumetric overlap, centreline overlap, Betti
errors, point-set Hausdorff distance, accuracy and AUC."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import directed_hausdorff
from scipy.stats import rankdata

from .topology import betti_numbers

THRESHOLD = 0.5
REPORT_HEADER = ["image", "dice", "cldice", "betti0_err", "betti1_err", "hausdorff", "acc", "auc"]


def _pair(pred, label):
    p = np.asarray(pred).astype(bool)
    l = np.asarray(label).astype(bool)
    if p.shape != l.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {l.shape}")
    return p, l


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(prob) >= threshold


def dice(pred, label) -> float:
    p, l = _pair(pred, label)
    total = p.sum() + l.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, l).sum() / total)


# Zhang-Suen neighbour order P2..P9, clockwise from north
_NEIGHBOURS = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def _removable(img: np.ndarray, first: bool) -> np.ndarray:
    pad = np.pad(img, 1)
    H, W = img.shape
    nb = [pad[1 + dr : 1 + dr + H, 1 + dc : 1 + dc + W] for dr, dc in _NEIGHBOURS]
    count = sum(n.astype(np.int8) for n in nb)
    transitions = sum(((~nb[k]) & nb[(k + 1) % 8]).astype(np.int8) for k in range(8))
    p2, p4, p6, p8 = nb[0], nb[2], nb[4], nb[6]
    if first:
        c1, c2 = ~(p2 & p4 & p6), ~(p4 & p6 & p8)
    else:
        c1, c2 = ~(p2 & p4 & p8), ~(p2 & p6 & p8)
    return img & (count >= 2) & (count <= 6) & (transitions == 1) & c1 & c2


def skeletonize(mask) -> np.ndarray:
    """Zhang-Suen thinning to a one-pixel-wide skeleton."""
    img = np.asarray(mask).astype(bool).copy()
    while True:
        changed = False
        for first in (True, False):
            rm = _removable(img, first)
            if rm.any():
                img &= ~rm
                changed = True
        if not changed:
            return img


def cldice(pred, label) -> float:
    p, l = _pair(pred, label)
    if not p.any() and not l.any():
        return 1.0
    sp, sl = skeletonize(p), skeletonize(l)
    if not sp.any() or not sl.any():
        return 0.0
    tprec = np.logical_and(sp, l).sum() / sp.sum()
    tsens = np.logical_and(sl, p).sum() / sl.sum()
    if tprec + tsens == 0:
        return 0.0
    return float(2.0 * tprec * tsens / (tprec + tsens))


def betti_error(pred, label) -> tuple[int, int]:
    p, l = _pair(pred, label)
    bp, bl = betti_numbers(p), betti_numbers(l)
    return abs(bp[0] - bl[0]), abs(bp[1] - bl[1])


def mask_hausdorff(pred, label) -> float:
    p, l = _pair(pred, label)
    if not p.any() or not l.any():
        raise ValueError("Hausdorff distance is undefined for an empty mask")
    a, b = np.argwhere(p).astype(np.float64), np.argwhere(l).astype(np.float64)
    return float(max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0]))


def accuracy(pred, label) -> float:
    p, l = _pair(pred, label)
    return float((p == l).mean())


def auc(prob, label) -> float:
    """Rank (Mann-Whitney) AUC of a probability map against a binary label."""
    s = np.asarray(prob, dtype=np.float64).reshape(-1)
    y = np.asarray(label).astype(bool).reshape(-1)
    npos, nneg = int(y.sum()), int((~y).sum())
    if npos == 0 or nneg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[y].sum() - npos * (npos + 1) / 2) / (npos * nneg))


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # dicts keyed by REPORT_HEADER
    threshold: float = THRESHOLD

    def add(self, name: str, prob, label) -> dict:
        pred = binarize(prob, self.threshold)
        e0, e1 = betti_error(pred, label)
        try:
            hd = mask_hausdorff(pred, label)
        except ValueError:
            hd = float("nan")
        row = {
            "image": name,
            "dice": dice(pred, label),
            "cldice": cldice(pred, label),
            "betti0_err": float(e0),
            "betti1_err": float(e1),
            "hausdorff": hd,
            "acc": accuracy(pred, label),
            "auc": auc(prob, label),
        }
        self.rows.append(row)
        return row

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    def mean(self, key: str) -> float:
        col = self.column(key)
        col = col[np.isfinite(col)]
        return float(col.mean()) if col.size else float("nan")

    def std(self, key: str) -> float:
        col = self.column(key)
        col = col[np.isfinite(col)]
        return float(col.std()) if col.size else float("nan")

    def summary(self) -> dict:
        return {k: (self.mean(k), self.std(k)) for k in REPORT_HEADER[1:]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r["image"]] + [_fmt(r[k]) for k in REPORT_HEADER[1:]])
        w.writerow(["mean±std"] + [f"{m:.4f}±{s:.4f}" for m, s in self.summary().values()])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.4f}"
