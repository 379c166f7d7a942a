"""Cubical persistent homology of 2D maps and the topological continuity loss.

Filtration: superlevel sets ``{f >= t}`` swept from the maximum down, with
pixels as vertices. Components (dimension 0) use 8-connectivity; holes
(dimension 1) are the bounded 4-connected components of the complement,
obtained by running the same union-find on the reversed sweep with a
virtual outside vertex attached to the border. Pixels with equal values are
ordered by row-major index, which fixes diagrams and critical pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class PersistenceDiagram:
    """Points ``(birth, death)`` with ``birth >= death`` plus the flat pixel
    indices whose values realise each coordinate."""

    dim: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)

    def alive_at(self, t: float) -> int:
        """Number of classes present in ``{f >= t}``."""
        if not len(self.points):
            return 0
        b, d = self.points[:, 0], self.points[:, 1]
        alive = (b >= t) & (d < t)
        if self.dim == 0:
            # the essential class carries the global minimum and survives it
            alive[0] |= b[0] >= t
        return int(alive.sum())


@numba.njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@numba.njit(cache=True)
def _sweep(values, order, H, W, eight, outside):
    """Union-find over pixels in ``order`` with the elder rule.

    Returns (birth_px, death_px) for every finite pair plus the oldest root's
    birth pixel. With ``outside`` a virtual vertex ``H*W`` (older than
    everything) is adjacent to every border pixel.
    """
    n = H * W
    parent = np.full(n + 1, -1, np.int64)
    rank = np.empty(n + 1, np.int64)  # sweep position of each component's birth pixel
    birth = np.empty(n + 1, np.int64)
    out_b = np.empty(n, np.int64)
    out_d = np.empty(n, np.int64)
    npairs = 0
    if outside:
        parent[n] = n
        rank[n] = -1
        birth[n] = -1
    roots = np.empty(9, np.int64)
    for step in range(n):
        p = order[step]
        r, c = p // W, p % W
        nroots = 0
        for dr in range(-1, 2):
            for dc in range(-1, 2):
                if dr == 0 and dc == 0:
                    continue
                if not eight and dr != 0 and dc != 0:
                    continue
                rr, cc = r + dr, c + dc
                if rr < 0 or rr >= H or cc < 0 or cc >= W:
                    continue
                q = rr * W + cc
                if parent[q] < 0:
                    continue
                root = _find(parent, q)
                dup = False
                for k in range(nroots):
                    if roots[k] == root:
                        dup = True
                if not dup:
                    roots[nroots] = root
                    nroots += 1
        if outside and (r == 0 or r == H - 1 or c == 0 or c == W - 1):
            root = _find(parent, n)
            dup = False
            for k in range(nroots):
                if roots[k] == root:
                    dup = True
            if not dup:
                roots[nroots] = root
                nroots += 1
        if nroots == 0:
            parent[p] = p
            rank[p] = step
            birth[p] = p
            continue
        eldest = roots[0]
        for k in range(1, nroots):
            if rank[roots[k]] < rank[eldest]:
                eldest = roots[k]
        for k in range(nroots):
            root = roots[k]
            if root == eldest:
                continue
            out_b[npairs] = birth[root]
            out_d[npairs] = p
            npairs += 1
            parent[root] = eldest
        parent[p] = eldest
    last = order[n - 1]
    return out_b[:npairs], out_d[:npairs], birth[_find(parent, last)]


def _as_grid(grid) -> np.ndarray:
    g = np.asarray(grid.data if isinstance(grid, Tensor) else grid, dtype=np.float64)
    g = np.squeeze(g) if g.ndim > 2 else g
    if g.ndim == 1:
        g = g[None, :]
    if g.ndim != 2 or g.size == 0:
        raise ValueError(f"persistence needs a non-empty 2D grid, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("persistence grid contains non-finite values")
    return g


def superlevel_order(values: np.ndarray) -> np.ndarray:
    """Pixel indices by descending value, ties by ascending row-major index."""
    flat = values.reshape(-1)
    return np.lexsort((np.arange(flat.size), -flat)).astype(np.int64)


def _diagram(dim, flat, bpx, dpx, sign) -> PersistenceDiagram:
    b, d = flat[bpx], flat[dpx]
    keep = b > d if sign > 0 else b < d
    bpx, dpx = bpx[keep], dpx[keep]
    return PersistenceDiagram(dim, np.stack([flat[bpx], flat[dpx]], axis=1), np.stack([bpx, dpx], axis=1))


def compute_persistence(grid) -> tuple[PersistenceDiagram, PersistenceDiagram]:
    """Dimension-0 and dimension-1 diagrams of the superlevel filtration.

    Pairs born and killed at the same value are dropped. The dimension-0
    diagram lists the essential component first, dying at the global
    minimum.
    """
    g = _as_grid(grid)
    H, W = g.shape
    flat = g.reshape(-1)
    order = superlevel_order(g)

    bpx, dpx, root = _sweep(flat, order, H, W, True, False)
    dgm0 = _diagram(0, flat, bpx, dpx, 1)
    essential = np.array([[flat[root], flat[order[-1]]]])
    dgm0.points = np.concatenate([essential, dgm0.points])
    dgm0.pixels = np.concatenate([np.array([[root, order[-1]]]), dgm0.pixels])

    # reversed sweep over the complement: a bounded component born at its
    # minimum m and merged at pixel q is a hole born at f(q), dying at m
    hb, hd, _ = _sweep(flat, order[::-1].copy(), H, W, False, True)
    dgm1 = PersistenceDiagram(1)
    if len(hb):
        births, deaths = flat[hd], flat[hb]
        keep = births > deaths
        dgm1.points = np.stack([births[keep], deaths[keep]], axis=1)
        dgm1.pixels = np.stack([hd[keep], hb[keep]], axis=1)
    return dgm0, dgm1


def format_diagrams(*diagrams: PersistenceDiagram) -> str:
    """One ``dim b d birth_px death_px`` line per point."""
    lines = []
    for dgm in diagrams:
        for (b, d), (bp, dp) in zip(dgm.points, dgm.pixels):
            lines.append(f"{dgm.dim} {b:.6f} {d:.6f} {int(bp)} {int(dp)}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_diagrams(text: str) -> dict[int, PersistenceDiagram]:
    rows: dict[int, list] = {0: [], 1: []}
    for line in text.splitlines():
        if line.strip():
            dim, b, d, bp, dp = line.split()
            rows.setdefault(int(dim), []).append((float(b), float(d), int(bp), int(dp)))
    out = {}
    for dim, pts in rows.items():
        arr = np.array(pts, dtype=np.float64).reshape(-1, 4)
        out[dim] = PersistenceDiagram(dim, arr[:, :2], arr[:, 2:].astype(np.int64))
    return out


# -- diagram distance -------------------------------------------------------


def _points(d) -> np.ndarray:
    if isinstance(d, PersistenceDiagram):
        return d.points
    return np.asarray(d, dtype=np.float64).reshape(-1, 2)


def hausdorff_pair(P_O, P_L) -> tuple[float, int, int]:
    """Bidirectional Hausdorff distance and the pair that realises it.

    Returns ``(distance, i, j)`` with ``i`` indexing ``P_O`` and ``j``
    indexing ``P_L``; ``-1`` marks the diagonal when one side is empty.
    """
    if isinstance(P_O, PersistenceDiagram) and isinstance(P_L, PersistenceDiagram) and P_O.dim != P_L.dim:
        raise ValueError(f"diagram dimensions differ: {P_O.dim} vs {P_L.dim}")
    a, b = _points(P_O), _points(P_L)
    if not len(a) and not len(b):
        return 0.0, -1, -1
    if not len(a) or not len(b):
        pts = a if len(a) else b
        diag = np.abs(pts[:, 0] - pts[:, 1]) / math.sqrt(2.0)
        k = int(np.argmax(diag))
        return float(diag[k]), (k if len(a) else -1), (-1 if len(a) else k)
    dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    near_b = dist.argmin(axis=1)  # for each u in P_O
    near_a = dist.argmin(axis=0)  # for each v in P_L
    i = int(np.argmax(dist[np.arange(len(a)), near_b]))
    j = int(np.argmax(dist[near_a, np.arange(len(b))]))
    forward, backward = dist[i, near_b[i]], dist[near_a[j], j]
    if forward >= backward:
        return float(forward), i, int(near_b[i])
    return float(backward), int(near_a[j]), j


def diagram_hausdorff(P_O, P_L) -> float:
    return hausdorff_pair(P_O, P_L)[0]


# -- Betti numbers ----------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)


def betti_numbers(mask) -> tuple[int, int]:
    """(beta0, beta1): 8-connected foreground components and enclosed
    4-connected background components."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ShapeError(f"betti_numbers expects a 2D mask, got {m.shape}")
    _, b0 = ndimage.label(m, structure=_EIGHT)
    bg, nbg = ndimage.label(~m, structure=_FOUR)
    if nbg == 0:
        return int(b0), 0
    border = np.unique(np.concatenate([bg[0], bg[-1], bg[:, 0], bg[:, -1]]))
    touching = np.count_nonzero(border)
    return int(b0), int(nbg - touching)


# -- loss -------------------------------------------------------------------


def _patches(H: int, W: int, size: Optional[int]):
    if not size:
        yield slice(0, H), slice(0, W)
        return
    for r in range(0, H, size):
        for c in range(0, W, size):
            yield slice(r, min(r + size, H)), slice(c, min(c + size, W))


class DiagramCache:
    """Memoises label diagrams, which stay fixed across epochs."""

    def __init__(self, maxsize: int = 4096):
        self.maxsize = maxsize
        self._store: dict = {}

    def get(self, grid: np.ndarray):
        key = (grid.shape, grid.tobytes())
        hit = self._store.get(key)
        if hit is None:
            hit = compute_persistence(grid)
            if len(self._store) >= self.maxsize:
                self._store.pop(next(iter(self._store)))
            self._store[key] = hit
        return hit


_label_cache = DiagramCache()


def topological_term(prob: Tensor, label, patch: Optional[int] = None, cache: DiagramCache | None = None) -> Tensor:
    """Batch mean of ``sum_n d_H*(dgm_n(prob), dgm_n(label))`` for n in {0, 1}.

    The gradient of each Hausdorff distance reaches only the birth and death
    pixels of the prediction point in the realising pair.
    """
    cache = _label_cache if cache is None else cache
    y = np.asarray(label.data if isinstance(label, Tensor) else label)
    if y.shape != prob.shape or prob.ndim != 4 or prob.shape[1] != 1:
        raise ShapeError(f"topological term needs [B,1,H,W] inputs, got {prob.shape} and {y.shape}")
    B, _, H, W = prob.shape
    p = prob.data.astype(np.float64)
    grad = np.zeros_like(p)
    total = 0.0
    for b in range(B):
        for rs, cs in _patches(H, W, patch):
            pred = np.ascontiguousarray(p[b, 0, rs, cs])
            lab = np.ascontiguousarray(y[b, 0, rs, cs], dtype=np.float64)
            pw = pred.shape[1]
            for dp, dl in zip(compute_persistence(pred), cache.get(lab)):
                dist, i, j = hausdorff_pair(dp, dl)
                total += dist
                if dist <= 0 or i < 0:
                    continue
                u = dp.points[i]
                if j >= 0:
                    du = (u - dl.points[j]) / dist
                else:
                    du = np.array([1.0, -1.0]) * np.sign(u[0] - u[1]) / math.sqrt(2.0)
                for px, g in zip(dp.pixels[i], du):
                    r, c = divmod(int(px), pw)
                    grad[b, 0, rs.start + r, cs.start + c] += g
    value = total / B
    grad /= B

    def backward_fn(g):
        return (g * grad,)

    return ad._result("topological_term", np.asarray(value), (prob,), backward_fn)


def tc_loss_terms(logits: Tensor, label, patch: Optional[int] = None) -> tuple[Tensor, Tensor]:
    """(cross-entropy, topological term) for logits and a binary label."""
    ce = ad.cross_entropy(logits, label)
    topo = topological_term(ad.sigmoid(logits), label, patch=patch)
    return ce, topo


def tc_loss(logits: Tensor, label, weight: float = 1.0, patch: Optional[int] = None) -> Tensor:
    """Cross-entropy plus ``weight`` times the summed diagram Hausdorff distances."""
    ce, topo = tc_loss_terms(logits, label, patch)
    return ad.add(ce, ad.scale(topo, weight))
