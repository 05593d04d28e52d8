"""Flow-specific operators: backward warping, correlation, channel shuffle.

Flow fields are 2-channel tensors (u then v) stored in a normalised unit:
a stored value ``w`` means ``FLOW_SCALE * w`` pixels at full resolution,
i.e. ``FLOW_SCALE * w / 2**level`` pixels on pyramid level ``level``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConvSpec, ShapeError, check_tensor, deconv2d

__all__ = [
    "FLOW_SCALE",
    "CostVolumeSpec",
    "check_flow",
    "pixel_scale",
    "warp",
    "warp_backward",
    "square_spec",
    "cddc_spec",
    "cost_spec",
    "correlate",
    "correlate_backward",
    "channel_shuffle",
    "channel_shuffle_backward",
    "UPCONV_SPEC",
    "upsample_flow2x",
]

FLOW_SCALE = 20.0

UPCONV_SPEC = ConvSpec(2, 2, kernel=(4, 4), stride=2, padding=1, transposed=True)


def check_flow(flow, name: str = "flow") -> np.ndarray:
    flow = check_tensor(flow, name)
    if flow.shape[1] != 2:
        raise ShapeError(f"{name}: a flow field has exactly 2 channels, got {flow.shape[1]}")
    return flow


def pixel_scale(level: int) -> float:
    """Pixels on ``level`` per stored flow unit."""
    return FLOW_SCALE / 2 ** level


def _same_spatial(a, b, what: str):
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"{what}: batch/height/width mismatch {a.shape} vs {b.shape}")


def _taps(flow, level: int, H: int, W: int):
    dtype = np.result_type(flow.dtype, np.float32)
    s = np.asarray(pixel_scale(level), dtype=dtype)
    xs = np.arange(W, dtype=dtype)[None, None, :] + s * flow[:, 0]
    ys = np.arange(H, dtype=dtype)[None, :, None] + s * flow[:, 1]
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    wx = xs - x0
    wy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    return x0, y0, wx, wy


def _gather(feature, yi, xi):
    """feature[b, :, yi, xi] with zeros outside the grid; returns B, C, H, W."""
    B, C, H, W = feature.shape
    valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
    idx = np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
    flat = feature.reshape(B, C, H * W)
    out = np.take_along_axis(flat, idx.reshape(B, 1, -1), axis=2).reshape(feature.shape)
    return out * valid[:, None], valid, idx


def warp(feature, flow, level: int) -> np.ndarray:
    """Backward-warp ``feature`` by ``flow``: out(x) = feature(x + flow_px(x)).

    Bilinear sampling; taps outside the grid read as zero.
    """
    feature = check_tensor(feature, "feature")
    flow = check_flow(flow)
    _same_spatial(feature, flow, "warp")
    B, C, H, W = feature.shape
    x0, y0, wx, wy = _taps(flow, level, H, W)
    f00, _, _ = _gather(feature, y0, x0)
    f01, _, _ = _gather(feature, y0, x0 + 1)
    f10, _, _ = _gather(feature, y0 + 1, x0)
    f11, _, _ = _gather(feature, y0 + 1, x0 + 1)
    wx = wx[:, None]
    wy = wy[:, None]
    out = (1 - wy) * ((1 - wx) * f00 + wx * f01) + wy * ((1 - wx) * f10 + wx * f11)
    return out.astype(np.result_type(feature.dtype, flow.dtype), copy=False)


def warp_backward(grad_out, feature, flow, level: int):
    """Return ``(grad_feature, grad_flow)`` for :func:`warp`."""
    feature = check_tensor(feature, "feature")
    flow = check_flow(flow)
    grad_out = check_tensor(grad_out, "grad_out")
    if grad_out.shape != feature.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {feature.shape}")
    B, C, H, W = feature.shape
    dtype = np.result_type(feature.dtype, flow.dtype, grad_out.dtype)
    x0, y0, wx, wy = _taps(flow, level, H, W)
    grad_feat = np.zeros((B, C * H * W), dtype=dtype)
    chan_off = (np.arange(C) * H * W)[:, None]
    g = grad_out.reshape(B, C, H * W)
    taps = {}
    for dy, dx, w in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        vals, valid, idx = _gather(feature, y0 + dy, x0 + dx)
        taps[dy, dx] = vals
        wv = (w * valid).reshape(B, 1, H * W)
        for b in range(B):
            target = (chan_off + idx[b].reshape(1, -1)).ravel()
            grad_feat[b] += np.bincount(target, weights=(g[b] * wv[b]).ravel(), minlength=C * H * W)
    wx = wx[:, None]
    wy = wy[:, None]
    d_dx = (1 - wy) * (taps[0, 1] - taps[0, 0]) + wy * (taps[1, 1] - taps[1, 0])
    d_dy = (1 - wx) * (taps[1, 0] - taps[0, 0]) + wx * (taps[1, 1] - taps[0, 1])
    s = pixel_scale(level)
    grad_flow = np.stack([(grad_out * d_dx).sum(axis=1), (grad_out * d_dy).sum(axis=1)], axis=1) * s
    return grad_feat.reshape(feature.shape), grad_flow.astype(dtype, copy=False)


@dataclass(frozen=True)
class CostVolumeSpec:
    """Ordered integer search offsets; channel ``i`` of a cost volume is ``offsets[i]``."""

    offsets: tuple[tuple[int, int], ...]
    radius: int

    def __post_init__(self):
        offs = tuple((int(dy), int(dx)) for dy, dx in self.offsets)
        object.__setattr__(self, "offsets", offs)
        if len(set(offs)) != len(offs):
            raise ValueError("cost volume offsets must be unique")
        if any(abs(dy) > self.radius or abs(dx) > self.radius for dy, dx in offs):
            raise ValueError(f"offset outside radius {self.radius}")
        if list(offs) != sorted(offs):
            raise ValueError("offsets must be ordered row-major by (dy, dx)")

    def __len__(self):
        return len(self.offsets)

    def index(self, offset) -> int:
        return self.offsets.index(tuple(offset))


def square_spec(radius: int) -> CostVolumeSpec:
    r = range(-radius, radius + 1)
    return CostVolumeSpec(tuple((dy, dx) for dy in r for dx in r), radius)


_CDDC_ROWS = {
    -4: (-4, -2, 0, 2, 4),
    -3: (-3, -1, 1, 3),
    -2: (-4, -2, -1, 0, 1, 2, 4),
    -1: (-3, -2, -1, 0, 1, 2, 3),
    0: (-4, -2, -1, 0, 1, 2, 4),
}


def cddc_spec() -> CostVolumeSpec:
    """53 offsets at radius 4: dense near zero displacement, dilated further out."""
    rows = dict(_CDDC_ROWS)
    rows.update({-dy: dxs for dy, dxs in _CDDC_ROWS.items()})
    return CostVolumeSpec(tuple((dy, dx) for dy in sorted(rows) for dx in rows[dy]), 4)


def cost_spec(mode: str) -> CostVolumeSpec:
    if mode == "cddc":
        return cddc_spec()
    if mode in ("square_r3", "r3"):
        return square_spec(3)
    if mode in ("square_r4", "r4"):
        return square_spec(4)
    raise ValueError(f"unknown cost mode {mode!r}; expected cddc, square_r3 or square_r4")


def _check_pair(f1, f2):
    f1 = check_tensor(f1, "f1")
    f2 = check_tensor(f2, "f_warp")
    if f1.shape != f2.shape:
        raise ShapeError(f"correlate needs identical shapes, got {f1.shape} and {f2.shape}")
    return f1, f2


def correlate(f1, f_warp, spec: CostVolumeSpec) -> np.ndarray:
    """Cost volume: channel k holds <f1(x), f_warp(x + d_k)> / C, zero outside the grid."""
    f1, f_warp = _check_pair(f1, f_warp)
    B, C, H, W = f1.shape
    r = spec.radius
    dtype = np.result_type(f1.dtype, f_warp.dtype)
    fp = np.pad(f_warp, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.empty((B, len(spec), H, W), dtype=dtype)
    for k, (dy, dx) in enumerate(spec.offsets):
        shifted = fp[:, :, r + dy:r + dy + H, r + dx:r + dx + W]
        out[:, k] = np.einsum("bchw,bchw->bhw", f1, shifted)
    out /= C
    return out


def correlate_backward(grad_out, f1, f_warp, spec: CostVolumeSpec):
    """Return ``(grad_f1, grad_f_warp)`` for :func:`correlate`."""
    f1, f_warp = _check_pair(f1, f_warp)
    B, C, H, W = f1.shape
    if grad_out.shape != (B, len(spec), H, W):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(B, len(spec), H, W)}")
    r = spec.radius
    dtype = np.result_type(f1.dtype, f_warp.dtype, grad_out.dtype)
    g = grad_out / C
    fp = np.pad(f_warp, ((0, 0), (0, 0), (r, r), (r, r)))
    gfp = np.zeros(fp.shape, dtype=dtype)
    g1 = np.zeros(f1.shape, dtype=dtype)
    for k, (dy, dx) in enumerate(spec.offsets):
        sl = (slice(None), slice(None), slice(r + dy, r + dy + H), slice(r + dx, r + dx + W))
        gk = g[:, k:k + 1]
        g1 += gk * fp[sl]
        gfp[sl] += gk * f1
    return g1, gfp[:, :, r:r + H, r:r + W].copy()


def channel_shuffle(x, groups: int) -> np.ndarray:
    """Transpose channels viewed as a (groups, C/groups) matrix."""
    x = check_tensor(x)
    B, C, H, W = x.shape
    if groups < 1 or C % groups:
        raise ShapeError(f"channel count {C} is not divisible by groups={groups}")
    return np.ascontiguousarray(x.reshape(B, groups, C // groups, H, W).transpose(0, 2, 1, 3, 4).reshape(B, C, H, W))


def channel_shuffle_backward(grad_out, groups: int) -> np.ndarray:
    grad_out = check_tensor(grad_out, "grad_out")
    return channel_shuffle(grad_out, grad_out.shape[1] // groups)


def upsample_flow2x(flow, weight, bias=None) -> np.ndarray:
    """Learned 2x flow upsampling; values keep their normalised units."""
    return deconv2d(check_flow(flow), weight, bias, UPCONV_SPEC)
