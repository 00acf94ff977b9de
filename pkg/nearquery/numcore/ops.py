"""
Differentiable kernels built on top of ``nearquery.numcore.tensor``.

Every kernel takes and returns Tensors, computes its forward value with
vectorised numpy and registers an exact backward. Reductions run in a fixed
order so repeated calls are bitwise identical.
"""
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from nearquery.exceptions import NonFiniteError, ShapeError
from nearquery.numcore.tensor import Tensor, unbroadcast

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) in the overflow-free logaddexp form"""
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * expit(x.data).astype(x.dtype),))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * sign,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)"""
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}") from None
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return Tensor._from_op(out, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype),))


# ---------------------------------------------------------------------------
# Joining
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty operand list")
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"concat: mixed dtypes {sorted(str(d) for d in dtypes)}")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} do not align on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack: empty operand list")
    shapes = {t.shape for t in tensors}
    if len(shapes) > 1:
        raise ShapeError(f"stack: operand shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tuple(tensors), backward)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(-1)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------

def _check_no_nan(x: Tensor, primitive: str) -> None:
    if np.isnan(x.data).any():
        raise NonFiniteError(f"{primitive}: NaN in input of shape {x.shape}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; -inf entries (masked logits) get zero mass"""
    _check_no_nan(x, "softmax")
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_no_nan(x, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[..., in] @ weight[in, out] (+ bias[out])"""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x @ weight
    return out + bias if bias is not None else out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift"""
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred * (var + eps) ** -0.5 * gamma + beta


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of x[Cin,H,W] with weight[Cout,Cin,kh,kw] via im2col"""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected x[C,H,W] and w[O,C,kh,kw], got {x.shape} and {weight.shape}")
    c_in, height, width = x.shape
    c_out, w_in, kh, kw = weight.shape
    if w_in != c_in:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    if x.dtype != weight.dtype:
        raise ShapeError(f"conv2d: dtype mismatch {x.dtype} vs {weight.dtype}")
    s, p = int(stride), int(padding)
    out_h = (height + 2 * p - kh) // s + 1
    out_w = (width + 2 * p - kw) // s + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")

    padded = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :out_h, :out_w]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, c_in * kh * kw)
    w_mat = weight.data.reshape(c_out, -1)
    out = (cols @ w_mat.T).T.reshape(c_out, out_h, out_w)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(g):
        g_rows = g.reshape(c_out, out_h * out_w).T
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g_rows.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2))
        if x.requires_grad:
            g_cols = (g_rows @ w_mat).reshape(out_h, out_w, c_in, kh, kw).transpose(2, 0, 1, 3, 4)
            g_pad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    g_pad[:, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s] += g_cols[..., i, j]
            gx = g_pad[:, p:p + height, p:p + width] if p else g_pad
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb)
        return grads

    parents: Tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def grid_sample_bilinear(fmap: Tensor, points: Tensor) -> Tensor:
    """Bilinear read of fmap[C,H,W] at points[..., 2] given as (x, y) texel indices.

    Texels outside [0, W-1] x [0, H-1] read as zero. The coordinate gradient is
    the exact piecewise-linear derivative; on integer coordinates it is taken
    from the cell to the right/below.

    Returns:
        Tensor of shape points.shape[:-1] + (C,)
    """
    if fmap.ndim != 3:
        raise ShapeError(f"grid_sample_bilinear: map must be [C,H,W], got {fmap.shape}")
    if points.ndim < 1 or points.shape[-1] != 2:
        raise ShapeError(f"grid_sample_bilinear: points must be [...,2], got {points.shape}")
    if fmap.dtype != points.dtype:
        raise ShapeError(f"grid_sample_bilinear: dtype mismatch {fmap.dtype} vs {points.dtype}")
    if not np.isfinite(points.data).all():
        raise NonFiniteError(f"grid_sample_bilinear: non-finite coordinates in points {points.shape}")

    channels, height, width = fmap.shape
    pts = points.data.reshape(-1, 2)
    # all four corners are outside the map beyond this band
    x = np.clip(pts[:, 0], -2.0, width + 1.0)
    y = np.clip(pts[:, 1], -2.0, height + 1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    table = fmap.data.reshape(channels, height * width).T

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi, xi = y0 + dy, x0 + dx
        valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        index = np.where(valid, yi * width + xi, 0)
        values = table[index] * valid[:, None]
        corners.append((index, valid, values))

    (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = corners
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    weights = (w00, w01, w10, w11)
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    out_shape = points.shape[:-1] + (channels,)

    def backward(g):
        g_rows = g.reshape(-1, channels)
        g_map = g_pts = None
        if fmap.requires_grad:
            g_table = np.zeros((height * width, channels), dtype=fmap.dtype)
            for (index, valid, _), w in zip(corners, weights):
                np.add.at(g_table, index[valid], (w * g_rows)[valid])
            g_map = g_table.T.reshape(fmap.shape)
        if points.requires_grad:
            d_x = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * g_rows
            d_y = ((v10 - v00) * (1 - fx) + (v11 - v01) * fx) * g_rows
            g_pts = np.stack([d_x.sum(axis=1), d_y.sum(axis=1)], axis=-1).reshape(points.shape)
        return g_map, g_pts

    return Tensor._from_op(out.reshape(out_shape).astype(fmap.dtype, copy=False), (fmap, points), backward)


def _resize_matrix(n_in: int, n_out: int, dtype: np.dtype) -> np.ndarray:
    """Row-stochastic [n_out, n_in] interpolation matrix, align_corners=False"""
    scale = n_in / n_out
    dst = np.arange(n_out)
    src = np.maximum((dst + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(mat, (dst, i0), 1.0 - lam)
    np.add.at(mat, (dst, i1), lam)
    return mat.astype(dtype)


def resize_bilinear(fmap: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resample fmap[C,H,W] to [C,out_h,out_w]; same size is an exact copy"""
    if fmap.ndim != 3:
        raise ShapeError(f"resize_bilinear: map must be [C,H,W], got {fmap.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: target size must be >= 1, got {out_h}x{out_w}")
    _, height, width = fmap.shape
    if (height, width) == (out_h, out_w):
        return Tensor._from_op(fmap.data.copy(), (fmap,), lambda g: (g,))

    rows = _resize_matrix(height, out_h, fmap.dtype)
    cols = _resize_matrix(width, out_w, fmap.dtype)
    out = rows @ fmap.data @ cols.T

    def backward(g):
        return (rows.T @ g @ cols,)

    return Tensor._from_op(out, (fmap,), backward)


def upsample_to(fmap: Tensor, size: Tuple[int, int]) -> Tensor:
    return resize_bilinear(fmap, size[0], size[1])


# ---------------------------------------------------------------------------
# Attention helper
# ---------------------------------------------------------------------------

def dot_product_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    blocked: Optional[np.ndarray] = None,
) -> Tensor:
    """Scaled dot-product attention over [heads, n, d] operands.

    ``blocked`` ([heads, n_q, n_k] or broadcastable) marks logits forced to -inf.
    """
    scale = 1.0 / np.sqrt(queries.shape[-1])
    logits = (queries @ keys.transpose(0, 2, 1)) * scale
    if blocked is not None:
        logits = masked_fill(logits, blocked, -np.inf)
    return softmax(logits, axis=-1) @ values


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[n, d] -> [heads, n, d/heads]"""
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    """[heads, n, dh] -> [n, heads*dh]"""
    heads, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * dh)


__all__ = [
    "relu",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "abs_",
    "sqrt",
    "masked_fill",
    "concat",
    "stack",
    "flatten",
    "softmax",
    "log_softmax",
    "linear",
    "layer_norm",
    "conv2d",
    "grid_sample_bilinear",
    "resize_bilinear",
    "upsample_to",
    "dot_product_attention",
    "split_heads",
    "merge_heads",
    "unbroadcast",
]
