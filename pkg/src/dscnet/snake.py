"""Dynamic snake convolution.

A DSConv layer predicts one bounded offset per kernel tap and output
position, walks outward from the centre tap accumulating those offsets so
each tap moves exactly one pixel along the kernel axis and at most one
pixel across it, samples the feature map bilinearly at the resulting
fractional positions and contracts the nine samples with per-tap weights.

Coordinates are ``(x, y)`` = (column, row) in pixel units of the input map.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

KERNEL_SIZE = 9
CENTER = KERNEL_SIZE // 2
TAP_OFFSETS = np.arange(KERNEL_SIZE) - CENTER  # signed distance c of each tap


class Axis(enum.Enum):
    X = "x"
    Y = "y"


@dataclass
class OffsetField:
    delta: Tensor  # [B, 9, H, W], each value in (-1, 1)
    axis: Axis


@dataclass
class KernelSamplingGrid:
    coords: Tensor  # [B, 9, H, W, 2] as (x, y)
    axis: Axis


class DSConvLayer:
    """Parameters of one snake convolution along ``axis``.

    ``offset_weight`` [9, Cin, 3, 3] and ``offset_bias`` [9] form the offset
    head (zero-initialised, so an untrained layer samples a straight line);
    ``path_weights`` [Cout, Cin, 9] weight each tap along the snake.
    """

    def __init__(self, cin: int, cout: int, axis: Axis | str = Axis.X, bias: bool = True, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.axis = Axis(axis)
        self.cin, self.cout = cin, cout
        self.offset_weight = Tensor(np.zeros((KERNEL_SIZE, cin, 3, 3)), requires_grad=True)
        self.offset_bias = Tensor(np.zeros(KERNEL_SIZE), requires_grad=True)
        std = np.sqrt(2.0 / (cin * KERNEL_SIZE))
        self.path_weights = Tensor(rng.normal(0.0, std, (cout, cin, KERNEL_SIZE)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def parameters(self) -> dict[str, Tensor]:
        params = {
            "offset_weight": self.offset_weight,
            "offset_bias": self.offset_bias,
            "path_weights": self.path_weights,
        }
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def __call__(self, x: Tensor) -> Tensor:
        return dsconv_forward(x, self)


def predict_offsets(x: Tensor, layer: DSConvLayer) -> OffsetField:
    delta = ad.tanh(ad.conv2d(x, layer.offset_weight, layer.offset_bias, padding=1))
    return OffsetField(delta, layer.axis)


def _accumulate(d: np.ndarray) -> np.ndarray:
    """Outward cumulative sum over the tap axis; the centre tap stays at 0."""
    cum = np.zeros_like(d)
    cum[:, CENTER + 1 :] = np.cumsum(d[:, CENTER + 1 :], axis=1)
    cum[:, :CENTER] = np.cumsum(d[:, :CENTER][:, ::-1], axis=1)[:, ::-1]
    return cum


def _accumulate_backward(g: np.ndarray) -> np.ndarray:
    gd = np.zeros_like(g)
    gd[:, CENTER + 1 :] = np.cumsum(g[:, CENTER + 1 :][:, ::-1], axis=1)[:, ::-1]
    gd[:, :CENTER] = np.cumsum(g[:, :CENTER], axis=1)
    return gd


def build_sampling_grid(offsets: OffsetField) -> KernelSamplingGrid:
    delta = offsets.delta
    B, K, H, W = delta.shape
    if K != KERNEL_SIZE:
        raise ShapeError(f"offset field must have {KERNEL_SIZE} taps, got {K}")
    drift = _accumulate(delta.data)
    rows = np.arange(H, dtype=delta.data.dtype)[None, None, :, None]
    cols = np.arange(W, dtype=delta.data.dtype)[None, None, None, :]
    step = TAP_OFFSETS.astype(delta.data.dtype)[None, :, None, None]
    coords = np.empty((B, K, H, W, 2), dtype=delta.data.dtype)
    if offsets.axis is Axis.X:
        coords[..., 0] = cols + step
        coords[..., 1] = rows + drift
        drift_axis = 1
    else:
        coords[..., 0] = cols + drift
        coords[..., 1] = rows + step
        drift_axis = 0

    def backward_fn(g):
        return (_accumulate_backward(g[..., drift_axis]),)

    return KernelSamplingGrid(ad._result("build_sampling_grid", coords, (delta,), backward_fn), offsets.axis)


@numba.njit(cache=True, fastmath=True)
def _sample_forward(feat, cx, cy, out):
    """feat [B,H,W,C], coords [B,K,Ho,Wo] -> out [B,Ho,Wo,K,C]."""
    B, H, W, C = feat.shape
    _, K, Ho, Wo = cx.shape
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for k in range(K):
                    x = cx[b, k, i, j]
                    y = cy[b, k, i, j]
                    x0 = int(math.floor(x))
                    y0 = int(math.floor(y))
                    fx = x - x0
                    fy = y - y0
                    for c in range(C):
                        out[b, i, j, k, c] = 0.0
                    for dy in range(2):
                        yy = y0 + dy
                        if yy < 0 or yy >= H:
                            continue
                        wy = fy if dy else 1.0 - fy
                        for dx in range(2):
                            xx = x0 + dx
                            if xx < 0 or xx >= W:
                                continue
                            w = wy * (fx if dx else 1.0 - fx)
                            if w == 0.0:
                                continue
                            for c in range(C):
                                out[b, i, j, k, c] += w * feat[b, yy, xx, c]


@numba.njit(cache=True, fastmath=True)
def _sample_backward(feat, cx, cy, g, gfeat, gx, gy, want_feat, want_coords):
    B, H, W, C = feat.shape
    _, K, Ho, Wo = cx.shape
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for k in range(K):
                    x = cx[b, k, i, j]
                    y = cy[b, k, i, j]
                    x0 = int(math.floor(x))
                    y0 = int(math.floor(y))
                    fx = x - x0
                    fy = y - y0
                    sx = 0.0
                    sy = 0.0
                    gv = g[b, i, j, k]
                    for dy in range(2):
                        yy = y0 + dy
                        if yy < 0 or yy >= H:
                            continue
                        wy = fy if dy else 1.0 - fy
                        dwy = 1.0 if dy else -1.0
                        for dx in range(2):
                            xx = x0 + dx
                            if xx < 0 or xx >= W:
                                continue
                            wx = fx if dx else 1.0 - fx
                            dwx = 1.0 if dx else -1.0
                            w = wx * wy
                            fv = feat[b, yy, xx]
                            if want_feat and want_coords:
                                gf = gfeat[b, yy, xx]
                                acc = 0.0
                                for c in range(C):
                                    acc += gv[c] * fv[c]
                                    gf[c] += w * gv[c]
                            elif want_feat:
                                gf = gfeat[b, yy, xx]
                                acc = 0.0
                                for c in range(C):
                                    gf[c] += w * gv[c]
                            else:
                                acc = 0.0
                                for c in range(C):
                                    acc += gv[c] * fv[c]
                            sx += dwx * wy * acc
                            sy += wx * dwy * acc
                    gx[b, k, i, j] = sx
                    gy[b, k, i, j] = sy


def bilinear_sample(feature: Tensor, coords: Tensor) -> Tensor:
    """Sample ``feature`` [B,C,H,W] at ``coords`` [B,K,Ho,Wo,2] -> [B,C,K,Ho,Wo].

    Each value is the separable hat-function interpolation of the four
    integer neighbours; neighbours outside the map read as zero. The op is
    differentiable in both the features and the coordinates (one-sided at
    integer coordinates). The result is a view of a channel-last buffer.
    """
    if isinstance(coords, KernelSamplingGrid):
        coords = coords.coords
    B, C, H, W = feature.shape
    if coords.ndim != 5 or coords.shape[0] != B or coords.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample: bad coordinate shape {coords.shape} for feature {feature.shape}")
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("bilinear_sample: non-finite sampling coordinates")
    _, K, Ho, Wo, _ = coords.shape
    feat = np.ascontiguousarray(feature.data.transpose(0, 2, 3, 1))
    cx = np.ascontiguousarray(coords.data[..., 0], dtype=np.float64)
    cy = np.ascontiguousarray(coords.data[..., 1], dtype=np.float64)
    out = np.empty((B, Ho, Wo, K, C), dtype=feat.dtype)
    _sample_forward(feat, cx, cy, out)

    def backward_fn(g):
        g = np.ascontiguousarray(g.transpose(0, 3, 4, 2, 1), dtype=feat.dtype)
        gfeat = np.zeros_like(feat)
        gx = np.zeros(cx.shape, dtype=np.float64)
        gy = np.zeros(cy.shape, dtype=np.float64)
        _sample_backward(feat, cx, cy, g, gfeat, gx, gy, feature.requires_grad, coords.requires_grad)
        gc = np.stack([gx, gy], axis=-1) if coords.requires_grad else None
        return (gfeat.transpose(0, 3, 1, 2) if feature.requires_grad else None), gc

    return ad._result("bilinear_sample", out.transpose(0, 4, 3, 1, 2), (feature, coords), backward_fn)


def path_contract(samples: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``out[b,o,h,w] = sum_{c,k} weights[o,c,k] * samples[b,c,k,h,w] + bias[o]``."""
    B, C, K, H, W = samples.shape
    cout = weights.shape[0]
    if weights.shape[1:] != (C, K):
        raise ShapeError(f"path weights {weights.shape} do not match samples {samples.shape}")
    # [B*H*W, K*C] rows; free when samples come straight from bilinear_sample
    s = samples.data.transpose(0, 3, 4, 2, 1).reshape(B * H * W, K * C)
    wm = weights.data.transpose(0, 2, 1).reshape(cout, K * C)
    out = s @ wm.T
    if bias is not None:
        out += bias.data

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * H * W, cout)
        gs = gw = None
        if samples.requires_grad:
            gs = (g2 @ wm).reshape(B, H, W, K, C).transpose(0, 4, 3, 1, 2)
        if weights.requires_grad:
            gw = (g2.T @ s).reshape(cout, K, C).transpose(0, 2, 1)
        if bias is None:
            return gs, gw
        return gs, gw, g2.sum(axis=0)

    inputs = (samples, weights) if bias is None else (samples, weights, bias)
    out = out.reshape(B, H, W, cout).transpose(0, 3, 1, 2)
    return ad._result("path_contract", np.ascontiguousarray(out), inputs, backward_fn)


def dsconv_forward(x: Tensor, layer: DSConvLayer) -> Tensor:
    if x.ndim != 4 or x.shape[1] != layer.cin:
        raise ShapeError(f"dsconv: expected [B,{layer.cin},H,W] input, got {x.shape}")
    grid = build_sampling_grid(predict_offsets(x, layer))
    samples = bilinear_sample(x, grid.coords)
    return path_contract(samples, layer.path_weights, layer.bias)


def sampling_cells(x: Tensor, layer: DSConvLayer) -> np.ndarray:
    """Integer cell of every sampling coordinate; constant on each smooth
    piece of the layer's output as a function of inputs and parameters."""
    with ad.no_grad():
        grid = build_sampling_grid(predict_offsets(x, layer))
    return np.floor(grid.coords.data).astype(np.int64)


def export_kernel_trace(x: Tensor, layer: DSConvLayer, point: tuple, batch: int = 0) -> list[tuple[float, float]]:
    """The nine sampling positions used at output ``point = (x, y)``."""
    px, py = int(point[0]), int(point[1])
    H, W = x.shape[2], x.shape[3]
    if not (0 <= px < W and 0 <= py < H):
        raise IndexError(f"point {point} outside {W}x{H} feature map")
    with ad.no_grad():
        grid = build_sampling_grid(predict_offsets(x, layer))
    c = grid.coords.data[batch, :, py, px, :]
    return [(float(cx), float(cy)) for cx, cy in c]


def format_kernel_trace(trace) -> str:
    """One ``c x y`` line per tap, ``c`` the signed distance from the centre."""
    return "".join(f"{c} {x:.4f} {y:.4f}\n" for c, (x, y) in zip(TAP_OFFSETS, trace))


def parse_kernel_trace(text: str) -> list[tuple[int, float, float]]:
    out = []
    for line in text.splitlines():
        if line.strip():
            c, x, y = line.split()
            out.append((int(c), float(x), float(y)))
    return out
