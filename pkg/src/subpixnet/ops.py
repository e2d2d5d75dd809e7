"""Differentiable operators on rank-4 tensors.

The convolution family runs as gather/scatter window loops feeding BLAS
matmuls; inner products accumulate in float64 and results are stored back
as float32, which is what keeps the adjointness and finite-difference
tolerances tight and platform-independent.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from .tensor import ConvParams, Tensor, record_op

__all__ = [
    "conv2d",
    "conv2d_transpose",
    "pixel_shuffle",
    "correlation_1d",
    "leaky_relu",
    "concat_channels",
    "upsample",
    "add",
    "scale",
    "reduce_sum",
    "reduce_mean",
    "conv2d_output_shape",
    "conv2d_transpose_output_shape",
]


def conv2d_output_shape(
    in_hw: tuple[int, int],
    kernel_hw: tuple[int, int],
    stride: tuple[int, int],
    padding: tuple[int, int],
) -> tuple[int, int]:
    """Spatial output size of conv2d: floor((in + 2p - k) / s) + 1 per axis."""
    oh = (in_hw[0] + 2 * padding[0] - kernel_hw[0]) // stride[0] + 1
    ow = (in_hw[1] + 2 * padding[1] - kernel_hw[1]) // stride[1] + 1
    return oh, ow


def conv2d_transpose_output_shape(
    in_hw: tuple[int, int],
    kernel_hw: tuple[int, int],
    stride: tuple[int, int],
    padding: tuple[int, int],
) -> tuple[int, int]:
    """Spatial output size of conv2d_transpose: (in - 1) * s - 2p + k per axis."""
    oh = (in_hw[0] - 1) * stride[0] - 2 * padding[0] + kernel_hw[0]
    ow = (in_hw[1] - 1) * stride[1] - 2 * padding[1] + kernel_hw[1]
    return oh, ow


def _gather_windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """Collect all (kh, kw) windows of a padded map into (n, c, kh, kw, oh, ow)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols


def _scatter_windows(cols: np.ndarray, out_hw: tuple[int, int], sh: int, sw: int) -> np.ndarray:
    """Adjoint of :func:`_gather_windows`: add windows back into a padded map."""
    n, c, kh, kw, ih, iw = cols.shape
    out = np.zeros((n, c) + out_hw, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * ih : sh, j : j + sw * iw : sw] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Strided 2-D convolution with zero padding.

    Output shape is (n, out_ch, floor((h + 2p_h - k_h) / s_h) + 1,
    floor((w + 2p_w - k_w) / s_w) + 1).  Differentiable w.r.t. the input,
    kernel and bias.
    """
    k, b = p.kernel, p.bias
    oc, ic, kh, kw = k.shape
    if x.c != ic:
        raise ValueError(f"conv2d: input has {x.c} channels, kernel expects {ic}")
    if b is not None and b.c != oc:
        raise ValueError(f"conv2d: bias has {b.c} channels, kernel produces {oc}")
    (sh, sw), (ph, pw) = p.stride, p.padding
    oh, ow = conv2d_output_shape((x.h, x.w), (kh, kw), p.stride, p.padding)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d: non-positive output size {(oh, ow)} for input {(x.h, x.w)}, "
            f"kernel {(kh, kw)}, stride {p.stride}, padding {p.padding}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _gather_windows(xp, kh, kw, sh, sw, oh, ow)
    k64 = k.data.astype(np.float64)
    out = np.tensordot(k64, cols.astype(np.float64), axes=([1, 2, 3], [1, 2, 3]))
    out = out.transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.astype(np.float64)
    result = Tensor(out.astype(np.float32))

    def backward(g: np.ndarray) -> None:
        g64 = g.astype(np.float64)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g64.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1))
        if k.requires_grad:
            k.accumulate_grad(
                np.tensordot(g64, cols.astype(np.float64), axes=([0, 2, 3], [0, 4, 5]))
            )
        if x.requires_grad:
            dcols = np.tensordot(g64, k64, axes=([1], [0]))  # (n, oh, ow, ic, kh, kw)
            dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
            dxp = _scatter_windows(dcols, (x.h + 2 * ph, x.w + 2 * pw), sh, sw)
            x.accumulate_grad(dxp[:, :, ph : ph + x.h, pw : pw + x.w])

    inputs = (x, k) if b is None else (x, k, b)
    return record_op("conv2d", inputs, result, backward)


def conv2d_transpose(x: Tensor, p: ConvParams) -> Tensor:
    """Strided transposed convolution: every input pixel scatters a kernel.

    The kernel buffer is read as (in_ch, out_ch, k_h, k_w).  Output spatial
    size is (in - 1) * s - 2p + k per axis.  With a shared parameter set
    this op is the exact adjoint of :func:`conv2d` at equal stride/padding.
    """
    k, b = p.kernel, p.bias
    ic, oc, kh, kw = k.shape
    if x.c != ic:
        raise ValueError(f"conv2d_transpose: input has {x.c} channels, kernel expects {ic}")
    if b is not None and b.c != oc:
        raise ValueError(f"conv2d_transpose: bias has {b.c} channels, kernel produces {oc}")
    (sh, sw), (ph, pw) = p.stride, p.padding
    oh, ow = conv2d_transpose_output_shape((x.h, x.w), (kh, kw), p.stride, p.padding)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d_transpose: non-positive output size {(oh, ow)} for input "
            f"{(x.h, x.w)}, kernel {(kh, kw)}, stride {p.stride}, padding {p.padding}"
        )
    k64 = k.data.astype(np.float64)
    cols = np.tensordot(x.data.astype(np.float64), k64, axes=([1], [0]))  # (n, h, w, oc, kh, kw)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    out_pad = _scatter_windows(cols, (oh + 2 * ph, ow + 2 * pw), sh, sw)
    out = out_pad[:, :, ph : ph + oh, pw : pw + ow]
    if b is not None:
        out = out + b.data.astype(np.float64)
    result = Tensor(out.astype(np.float32))

    def backward(g: np.ndarray) -> None:
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.astype(np.float64).sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1))
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))).astype(np.float64)
        dcols = _gather_windows(gp, kh, kw, sh, sw, x.h, x.w)  # (n, oc, kh, kw, h, w)
        if x.requires_grad:
            dx = np.tensordot(dcols, k64, axes=([1, 2, 3], [1, 2, 3]))  # (n, h, w, ic)
            x.accumulate_grad(dx.transpose(0, 3, 1, 2))
        if k.requires_grad:
            k.accumulate_grad(
                np.tensordot(x.data.astype(np.float64), dcols, axes=([0, 2, 3], [0, 4, 5]))
            )

    inputs = (x, k) if b is None else (x, k, b)
    return record_op("conv2d_transpose", inputs, result, backward)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange r*r channel groups into an r-times larger spatial grid.

    out[n, c, h*r + dy, w*r + dx] = in[n, c*r*r + dy*r + dx, h, w].  A pure
    permutation; its gradient is the inverse permutation.
    """
    if r < 1:
        raise ValueError(f"pixel_shuffle: upscale ratio must be >= 1, got {r}")
    n, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ValueError(f"pixel_shuffle: {c} channels not divisible by r^2 = {r * r}")
    co = c // (r * r)
    out = (
        x.data.reshape(n, co, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, co, h * r, w * r)
    )
    result = Tensor(np.ascontiguousarray(out))

    def backward(g: np.ndarray) -> None:
        gi = (
            g.reshape(n, co, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )
        x.accumulate_grad(np.ascontiguousarray(gi))

    return record_op("pixel_shuffle", (x,), result, backward)


def correlation_1d(left: Tensor, right: Tensor, max_disp: int) -> Tensor:
    """Horizontal matching cost between two feature maps.

    out[n, d, h, w] = mean_c( left[n, c, h, w] * right[n, c, h, w - d] )
    for d = 0..max_disp, with zeros where w - d falls outside the map.
    """
    if max_disp < 0:
        raise ValueError(f"correlation_1d: max_disp must be >= 0, got {max_disp}")
    if left.shape != right.shape:
        raise ValueError(
            f"correlation_1d: shape mismatch {left.shape} vs {right.shape}"
        )
    n, c, h, w = left.shape
    ld = left.data.astype(np.float64)
    rd = right.data.astype(np.float64)
    out = np.zeros((n, max_disp + 1, h, w), dtype=np.float64)
    for d in range(min(max_disp, w - 1) + 1):
        out[:, d, :, d:] = (ld[:, :, :, d:] * rd[:, :, :, : w - d]).mean(axis=1)
    result = Tensor(out.astype(np.float32))

    def backward(g: np.ndarray) -> None:
        g64 = g.astype(np.float64)
        dl = np.zeros_like(ld)
        dr = np.zeros_like(rd)
        for d in range(min(max_disp, w - 1) + 1):
            gd = g64[:, d : d + 1, :, d:]  # broadcast over channels
            dl[:, :, :, d:] += gd * rd[:, :, :, : w - d] / c
            dr[:, :, :, : w - d] += gd * ld[:, :, :, d:] / c
        if left.requires_grad:
            left.accumulate_grad(dl)
        if right.requires_grad:
            right.accumulate_grad(dr)

    return record_op("correlation_1d", (left, right), result, backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """Elementwise max(x, slope * x); ties at 0 follow the positive branch."""
    out = np.maximum(x.data, np.float32(slope) * x.data)
    result = Tensor(out)

    def backward(g: np.ndarray) -> None:
        deriv = np.where(x.data >= 0, max(1.0, slope), min(1.0, slope))
        x.accumulate_grad(g * deriv.astype(np.float32))

    return record_op("leaky_relu", (x,), result, backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; batch and spatial dims must agree."""
    if len(xs) == 0:
        raise ValueError("concat_channels: need at least one tensor")
    base = xs[0]
    for t in xs[1:]:
        if (t.n, t.h, t.w) != (base.n, base.h, base.w):
            raise ValueError(
                f"concat_channels: batch/spatial mismatch {t.shape} vs {base.shape}"
            )
    out = np.concatenate([t.data for t in xs], axis=1)
    result = Tensor(out)
    offsets = np.cumsum([0] + [t.c for t in xs])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[:, lo:hi])

    return record_op("concat_channels", tuple(xs), result, backward)


@lru_cache(maxsize=256)
def _upsample_matrix(size: int, factor: int, mode: str) -> np.ndarray:
    """(size * factor, size) interpolation matrix for one spatial axis."""
    out_size = size * factor
    m = np.zeros((out_size, size), dtype=np.float64)
    if mode == "nearest":
        for o in range(out_size):
            m[o, o // factor] = 1.0
    else:  # bilinear, align-corners-false
        for o in range(out_size):
            src = (o + 0.5) / factor - 0.5
            src = min(max(src, 0.0), size - 1.0)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, size - 1)
            w1 = src - i0
            m[o, i0] += 1.0 - w1
            m[o, i1] += w1
    return m


def upsample(x: Tensor, factor: int, mode: str = "bilinear") -> Tensor:
    """Upscale spatial dims by an integer factor.

    ``nearest`` replicates pixels; ``bilinear`` samples with the
    align-corners-false convention.  Both are linear maps, so the gradient
    is the transposed map.
    """
    if factor < 1:
        raise ValueError(f"upsample: factor must be >= 1, got {factor}")
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"upsample: unknown mode {mode!r}")
    mh = _upsample_matrix(x.h, factor, mode)
    mw = _upsample_matrix(x.w, factor, mode)
    x64 = x.data.astype(np.float64)
    out = np.einsum("ij,ncjw->nciw", mh, x64)
    out = np.einsum("ij,nchj->nchi", mw, out)
    result = Tensor(out.astype(np.float32))

    def backward(g: np.ndarray) -> None:
        g64 = g.astype(np.float64)
        dx = np.einsum("ij,nciw->ncjw", mh, g64)
        dx = np.einsum("ij,nchi->nchj", mw, dx)
        x.accumulate_grad(dx)

    return record_op("upsample", (x,), result, backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if x.shape != y.shape:
        raise ValueError(f"add: shape mismatch {x.shape} vs {y.shape}")
    result = Tensor(x.data + y.data)

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(g)
        y.accumulate_grad(g)

    return record_op("add", (x, y), result, backward)


def scale(x: Tensor, alpha: float) -> Tensor:
    """Multiply a tensor by a scalar constant."""
    result = Tensor(x.data * np.float32(alpha))

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(g * np.float32(alpha))

    return record_op("scale", (x,), result, backward)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum all elements into a scalar-shaped (1, 1, 1, 1) tensor."""
    total = x.data.sum(dtype=np.float64)
    result = Tensor(np.full((1, 1, 1, 1), total, dtype=np.float32))

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(np.broadcast_to(g.reshape(()), x.shape))

    return record_op("reduce_sum", (x,), result, backward)


def reduce_mean(x: Tensor) -> Tensor:
    """Mean of all elements as a scalar-shaped (1, 1, 1, 1) tensor."""
    count = x.data.size
    total = x.data.sum(dtype=np.float64)
    result = Tensor(np.full((1, 1, 1, 1), total / count, dtype=np.float32))

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(np.broadcast_to(g.reshape(()) / count, x.shape))

    return record_op("reduce_mean", (x,), result, backward)
