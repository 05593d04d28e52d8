"""Dense NCHW kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channels, height, width). Every kernel computes in the dtype of its
inputs, so float32 arrays give the production path and float64 arrays give
the double-precision mode used for gradient checking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "ConvSpec",
    "check_tensor",
    "conv2d",
    "conv2d_backward",
    "deconv2d",
    "deconv2d_backward",
    "avgpool2",
    "avgpool2_backward",
    "leaky_relu",
    "leaky_relu_backward",
    "concat_channels",
    "concat_channels_backward",
    "bilinear_resize",
    "bilinear_resize_backward",
]

DEFAULT_SLOPE = 0.1


class ShapeError(ValueError):
    """Raised when tensor shapes violate a kernel's contract."""


def check_tensor(x, name: str = "input") -> np.ndarray:
    """Validate that ``x`` is a rank-4 array with all dimensions >= 1."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (B, C, H, W) tensor, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: every dimension must be >= 1, got shape {x.shape}")
    return x


def _float_dtype(*arrays):
    dt = np.result_type(*[a for a in arrays if a is not None])
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float32)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 1
    groups: int = 1
    has_bias: bool = True
    transposed: bool = False

    def __post_init__(self):
        kh, kw = self.kernel
        if self.groups < 1:
            raise ValueError(f"groups must be >= 1, got {self.groups}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must both be divisible by groups={self.groups}"
            )
        if kh < 1 or kw < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid kernel/stride/padding: {self.kernel}/{self.stride}/{self.padding}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        kh, kw = self.kernel
        if self.transposed:
            return (self.in_channels, self.out_channels // self.groups, kh, kw)
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    @property
    def n_params(self) -> int:
        return int(np.prod(self.weight_shape)) + (self.out_channels if self.has_bias else 0)

    @property
    def fan_in(self) -> int:
        kh, kw = self.kernel
        return (self.in_channels // self.groups) * kh * kw

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        kh, kw = self.kernel
        if self.transposed:
            s, p = self.stride, self.padding
            return (height - 1) * s - 2 * p + kh, (width - 1) * s - 2 * p + kw
        return (
            (height + 2 * self.padding - kh) // self.stride + 1,
            (width + 2 * self.padding - kw) // self.stride + 1,
        )


def _check_conv_args(x, weight, bias, spec: ConvSpec):
    x = check_tensor(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input channels: expected {spec.in_channels}, got {x.shape[1]}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"weight shape: expected {spec.weight_shape}, got {tuple(weight.shape)}")
    if bias is not None and tuple(np.shape(bias)) != (spec.out_channels,):
        raise ShapeError(f"bias shape: expected ({spec.out_channels},), got {tuple(np.shape(bias))}")
    return x


def _patches(x, spec: ConvSpec):
    p = spec.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, spec.kernel, axis=(2, 3))
    return win[:, :, :: spec.stride, :: spec.stride]  # B, C, Ho, Wo, kh, kw


def conv2d(x, weight, bias, spec: ConvSpec) -> np.ndarray:
    """Grouped 2-D cross-correlation (no kernel flip).

    Input and output channels are split into ``spec.groups`` contiguous
    blocks; block ``g`` of the output only sees block ``g`` of the input.
    """
    x = _check_conv_args(x, weight, bias, spec)
    dtype = _float_dtype(x, weight, bias)
    cols = _patches(x.astype(dtype, copy=False), spec)
    weight = weight.astype(dtype, copy=False)
    g = spec.groups
    cg, og = spec.in_channels // g, spec.out_channels // g
    outs = []
    for k in range(g):
        part = np.tensordot(cols[:, k * cg:(k + 1) * cg], weight[k * og:(k + 1) * og], axes=([1, 4, 5], [1, 2, 3]))
        outs.append(part)  # B, Ho, Wo, og
    out = np.concatenate(outs, axis=3) if g > 1 else outs[0]
    if bias is not None:
        out = out + bias.astype(dtype, copy=False)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _flipped_weight(weight, spec: ConvSpec) -> np.ndarray:
    """Weight of the convolution that maps grad_out back onto the input."""
    g = spec.groups
    og = spec.out_channels // g
    blocks = [weight[k * og:(k + 1) * og].transpose(1, 0, 2, 3) for k in range(g)]
    return np.ascontiguousarray(np.concatenate(blocks, axis=0)[:, :, ::-1, ::-1])


def conv2d_backward(grad_out, x, weight, spec: ConvSpec):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv2d`.

    The input gradient is computed as a stride-1 convolution of the
    zero-dilated, re-padded output gradient with the flipped kernel.
    """
    x = check_tensor(x)
    B, _, H, W = x.shape
    Ho, Wo = spec.output_size(H, W)
    if grad_out.shape != (B, spec.out_channels, Ho, Wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(B, spec.out_channels, Ho, Wo)}")
    dtype = _float_dtype(x, weight, grad_out)
    grad_out = grad_out.astype(dtype, copy=False)
    weight = weight.astype(dtype, copy=False)
    g = spec.groups
    cg, og = spec.in_channels // g, spec.out_channels // g
    kh, kw = spec.kernel
    s, p = spec.stride, spec.padding
    if p > min(kh, kw) - 1:
        raise ValueError("conv2d_backward requires padding < kernel size")

    cols = _patches(x.astype(dtype, copy=False), spec)
    grad_w = np.empty(spec.weight_shape, dtype=dtype)
    for k in range(g):
        grad_w[k * og:(k + 1) * og] = np.tensordot(
            grad_out[:, k * og:(k + 1) * og], cols[:, k * cg:(k + 1) * cg], axes=([0, 2, 3], [0, 2, 3])
        )

    if s > 1:
        dil = np.zeros((B, spec.out_channels, s * (Ho - 1) + 1, s * (Wo - 1) + 1), dtype=dtype)
        dil[:, :, ::s, ::s] = grad_out
    else:
        dil = grad_out
    extra_h = H + 2 * p - kh - s * (Ho - 1)
    extra_w = W + 2 * p - kw - s * (Wo - 1)
    dil = np.pad(dil, ((0, 0), (0, 0), (kh - 1 - p, kh - 1 - p + extra_h), (kw - 1 - p, kw - 1 - p + extra_w)))
    back = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel, 1, 0, g, has_bias=False)
    gx = conv2d(dil, _flipped_weight(weight, spec), None, back)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if spec.has_bias else None
    return gx, grad_w, grad_b


def _check_deconv_spec(spec: ConvSpec):
    if not (spec.transposed and spec.kernel == (4, 4) and spec.stride == 2 and spec.padding == 1 and spec.groups == 1):
        raise ValueError("deconv2d supports only the 4x4, stride 2, padding 1 upsampling configuration")


def deconv2d(x, weight, bias, spec: ConvSpec) -> np.ndarray:
    """4x4 stride-2 transposed convolution; doubles height and width.

    ``weight`` has shape (in_channels, out_channels, 4, 4). The result is the
    adjoint of the matching stride-2 convolution with respect to its input.
    """
    _check_deconv_spec(spec)
    x = _check_conv_args(x, weight, bias, spec)
    dtype = _float_dtype(x, weight, bias)
    B, _, H, W = x.shape
    full = np.zeros((B, spec.out_channels, 2 * H + 2, 2 * W + 2), dtype=dtype)
    x = x.astype(dtype, copy=False)
    for i in range(4):
        for j in range(4):
            contrib = np.tensordot(x, weight[:, :, i, j].astype(dtype, copy=False), axes=([1], [0]))
            full[:, :, i:i + 2 * H:2, j:j + 2 * W:2] += contrib.transpose(0, 3, 1, 2)
    out = full[:, :, 1:2 * H + 1, 1:2 * W + 1]
    if bias is not None:
        out = out + bias.astype(dtype, copy=False)[None, :, None, None]
    return np.ascontiguousarray(out)


def deconv2d_backward(grad_out, x, weight, spec: ConvSpec):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`deconv2d`."""
    _check_deconv_spec(spec)
    x = check_tensor(x)
    B, _, H, W = x.shape
    if grad_out.shape != (B, spec.out_channels, 2 * H, 2 * W):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(B, spec.out_channels, 2 * H, 2 * W)}")
    dtype = _float_dtype(x, weight, grad_out)
    x = x.astype(dtype, copy=False)
    gfull = np.pad(grad_out.astype(dtype, copy=False), ((0, 0), (0, 0), (1, 1), (1, 1)))
    gx = np.zeros(x.shape, dtype=dtype)
    gw = np.empty(spec.weight_shape, dtype=dtype)
    for i in range(4):
        for j in range(4):
            gs = gfull[:, :, i:i + 2 * H:2, j:j + 2 * W:2]
            w_ij = weight[:, :, i, j].astype(dtype, copy=False)
            gx += np.tensordot(gs, w_ij, axes=([1], [1])).transpose(0, 3, 1, 2)
            gw[:, :, i, j] = np.tensordot(x, gs, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3)) if spec.has_bias else None
    return gx, gw, grad_b


def avgpool2(x) -> np.ndarray:
    """2x2 average pooling with stride 2."""
    x = check_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2 needs even height and width, got {H}x{W}")
    # fixed summation order keeps results reproducible against a plain loop
    s = x[:, :, 0::2, 0::2] + x[:, :, 0::2, 1::2]
    s = s + x[:, :, 1::2, 0::2]
    s = s + x[:, :, 1::2, 1::2]
    return s * 0.25


def avgpool2_backward(grad_out) -> np.ndarray:
    g = check_tensor(grad_out, "grad_out") * 0.25
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


def leaky_relu(x, slope: float = DEFAULT_SLOPE) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x > 0, x, x * slope)


def leaky_relu_backward(grad_out, x, slope: float = DEFAULT_SLOPE) -> np.ndarray:
    if np.shape(grad_out) != np.shape(x):
        raise ShapeError(f"grad_out shape {np.shape(grad_out)} != input shape {np.shape(x)}")
    return np.where(x > 0, grad_out, grad_out * slope)


def concat_channels(inputs) -> np.ndarray:
    inputs = [check_tensor(t, f"inputs[{i}]") for i, t in enumerate(inputs)]
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    B, _, H, W = inputs[0].shape
    for i, t in enumerate(inputs[1:], 1):
        if (t.shape[0], t.shape[2], t.shape[3]) != (B, H, W):
            raise ShapeError(f"inputs[{i}] has batch/height/width {t.shape[0], t.shape[2], t.shape[3]}, expected {B, H, W}")
    if len(inputs) == 1:
        return inputs[0]
    return np.concatenate(inputs, axis=1)


def concat_channels_backward(grad_out, sizes) -> list[np.ndarray]:
    grad_out = check_tensor(grad_out, "grad_out")
    if sum(sizes) != grad_out.shape[1]:
        raise ShapeError(f"channel sizes {list(sizes)} do not sum to {grad_out.shape[1]}")
    return np.split(grad_out, np.cumsum(sizes)[:-1], axis=1)


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres (align_corners=False), source clamped to the grid
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with the half-pixel (align_corners=False) convention."""
    x = check_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be >= 1, got {out_h}x{out_w}")
    _, _, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return x.copy()
    dtype = _float_dtype(x)
    ry = _resize_matrix(H, out_h, dtype)
    rx = _resize_matrix(W, out_w, dtype)
    return np.ascontiguousarray(ry @ x.astype(dtype, copy=False) @ rx.T)


def bilinear_resize_backward(grad_out, in_h: int, in_w: int) -> np.ndarray:
    grad_out = check_tensor(grad_out, "grad_out")
    _, _, oh, ow = grad_out.shape
    if (oh, ow) == (in_h, in_w):
        return grad_out.copy()
    dtype = _float_dtype(grad_out)
    ry = _resize_matrix(in_h, oh, dtype)
    rx = _resize_matrix(in_w, ow, dtype)
    return np.ascontiguousarray(ry.T @ grad_out @ rx)
