"""Tensor operations with hand-written backward rules.

Every public function either is a primitive (records a single tape node
with its own gradient rule) or a composite built from primitives.  There
is no silent broadcasting; the one documented exception is
:func:`add_bias`, which adds a rank-1 tensor onto the last axis.

Strided dense convolution is deliberately not a primitive: it is the
composite :func:`conv2d` = unfold + matmul + bias, so a single well-tested
matmul kernel backs all projections.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import NumericError, ShapeError
from .tensor import Tensor, active_tape

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed element types {sorted(str(d) for d in dtypes)}; cast explicitly")


def _emit(data: np.ndarray, inputs: tuple, backward_builder) -> Tensor:
    """Wrap ``data`` and, if a tape is active and any input needs a
    gradient, record a node whose rule is built lazily."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, backward_builder(out))
    return out


def _grads_for(inputs, pieces):
    """Pair each requires_grad input with its gradient piece."""
    return [(t, g) for t, g in zip(inputs, pieces) if t.requires_grad]


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    inputs = (a, b)

    def build(_out):
        def backward(g):
            return _grads_for(inputs, (g, g))

        return backward

    return _emit(a.data + b.data, inputs, build)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub needs equal shapes, got {a.shape} and {b.shape}")
    inputs = (a, b)

    def build(_out):
        def backward(g):
            return _grads_for(inputs, (g, -g))

        return backward

    return _emit(a.data - b.data, inputs, build)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    inputs = (a, b)
    ad, bd = a.data, b.data

    def build(_out):
        def backward(g):
            return _grads_for(inputs, (g * bd, g * ad))

        return backward

    return _emit(ad * bd, inputs, build)


def scale(x: Tensor, factor: float) -> Tensor:
    inputs = (x,)
    f = x.dtype.type(factor)

    def build(_out):
        def backward(g):
            return _grads_for(inputs, (g * f,))

        return backward

    return _emit(x.data * f, inputs, build)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """The one permitted broadcast: rank-1 ``bias`` onto the last axis."""
    _same_dtype(x, bias)
    if bias.ndim != 1 or x.ndim < 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias shape {bias.shape} does not fit last axis of {x.shape}")
    inputs = (x, bias)
    axes = tuple(range(x.ndim - 1))

    def build(_out):
        def backward(g):
            return _grads_for(inputs, (g, g.sum(axis=axes)))

        return backward

    return _emit(x.data + bias.data, inputs, build)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    inner = erf(xd * _INV_SQRT2)
    out = 0.5 * xd * (1.0 + inner)
    inputs = (x,)

    def build(_out):
        def backward(g):
            local = 0.5 * (1.0 + inner) + xd * np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
            return _grads_for(inputs, (g * local,))

        return backward

    return _emit(out, inputs, build)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from e
    inputs = (x,)
    old = x.shape

    def build(_out):
        def backward(g):
            return _grads_for(inputs, (g.reshape(old),))

        return backward

    return _emit(data, inputs, build)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation for shape {x.shape}")
    inputs = (x,)
    inverse = tuple(np.argsort(axes))

    def build(_out):
        def backward(g):
            return _grads_for(inputs, (np.ascontiguousarray(g.transpose(inverse)),))

        return backward

    return _emit(np.ascontiguousarray(x.data.transpose(axes)), inputs, build)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    _same_dtype(*tensors)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat shapes differ off axis {axis}: {tensors[0].shape} vs {t.shape}")
    axis = axis % len(ref)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def build(_out):
        def backward(g):
            pieces = []
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(int(lo), int(hi))
                    pieces.append((t, np.ascontiguousarray(g[tuple(idx)])))
            return pieces

        return backward

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, build)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    inputs = (x,)
    full_shape = x.shape

    def build(_out):
        def backward(g):
            buf = np.zeros(full_shape, dtype=g.dtype)
            buf[tuple(idx)] = g
            return _grads_for(inputs, (buf,))

        return backward

    return _emit(np.ascontiguousarray(x.data[tuple(idx)]), inputs, build)


def split(x: Tensor, sizes, axis: int):
    """Inverse of concat along ``axis``; sizes must sum to the axis length."""
    if sum(sizes) != x.shape[axis % x.ndim]:
        raise ShapeError(f"split sizes {tuple(sizes)} do not cover axis {axis} of {x.shape}")
    parts = []
    start = 0
    for s in sizes:
        parts.append(slice_axis(x, axis, start, start + s))
        start += s
    return parts


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when both operands share identical leading
    dimensions."""
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    inputs = (a, b)
    ad, bd = a.data, b.data

    def build(_out):
        def backward(g):
            pieces = []
            if a.requires_grad:
                pieces.append((a, g @ bd.swapaxes(-1, -2)))
            if b.requires_grad:
                pieces.append((b, ad.swapaxes(-1, -2) @ g))
            return pieces

        return backward

    return _emit(ad @ bd, inputs, build)


def sum_all(x: Tensor) -> Tensor:
    inputs = (x,)
    shape = x.shape

    def build(_out):
        def backward(g):
            return _grads_for(inputs, (np.full(shape, g, dtype=g.dtype),))

        return backward

    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), inputs, build)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# normalization and attention pieces


def softmax_lastaxis(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    if x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains NaN or Inf")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    inputs = (x,)

    def build(_out):
        def backward(g):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return _grads_for(inputs, ((g - dot) * out,))

        return backward

    return _emit(out, inputs, build)


def default_layer_norm_eps(dtype) -> float:
    return 1e-12 if dtype == np.float64 else 1e-5


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float | None = None) -> Tensor:
    """Layer normalization over the last axis with learned scale/shift."""
    _same_dtype(x, gamma, beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm scale/shift must be shape ({c},), got {gamma.shape} and {beta.shape}"
        )
    if eps is None:
        eps = default_layer_norm_eps(x.dtype)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    inputs = (x, gamma, beta)
    n = c

    def build(_out):
        def backward(g):
            pieces = []
            if x.requires_grad:
                gg = g * gamma.data
                term = gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(
                    axis=-1, keepdims=True
                )
                pieces.append((x, term * inv_std))
            if gamma.requires_grad:
                pieces.append((gamma, (g * xhat).reshape(-1, n).sum(axis=0)))
            if beta.requires_grad:
                pieces.append((beta, g.reshape(-1, n).sum(axis=0)))
            return pieces

        return backward

    return _emit(out, inputs, build)


# ---------------------------------------------------------------------------
# spatial kernels


def depthwise_conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 depthwise convolution, stride 1, padding 1: channel c of the
    output depends only on channel c of the input."""
    _same_dtype(x, w, b)
    if x.ndim != 4:
        raise ShapeError(f"depthwise conv expects BxCxHxW, got {x.shape}")
    bsz, c, h, wd = x.shape
    if w.shape != (c, 3, 3):
        raise ShapeError(f"kernel shape {w.shape} does not match {c} input channels")
    if b.shape != (c,):
        raise ShapeError(f"bias shape {b.shape} does not match {c} channels")
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    out = np.einsum("bchwij,cij->bchw", windows, w.data, optimize=True)
    out += b.data[None, :, None, None]
    inputs = (x, w, b)

    def build(_out):
        def backward(g):
            pieces = []
            if x.requires_grad:
                gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
                gwin = sliding_window_view(gp, (3, 3), axis=(2, 3))
                flipped = w.data[:, ::-1, ::-1]
                pieces.append((x, np.einsum("bchwij,cij->bchw", gwin, flipped, optimize=True)))
            if w.requires_grad:
                pieces.append((w, np.einsum("bchwij,bchw->cij", windows, g, optimize=True)))
            if b.requires_grad:
                pieces.append((b, g.sum(axis=(0, 2, 3))))
            return pieces

        return backward

    return _emit(out, inputs, build)


def _upsample_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Interpolation weights for one axis, align-corners=false, edges
    clamped.  Power-of-two factors give exact dyadic weights."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        u = (i + 0.5) / factor - 0.5
        lo = math.floor(u)
        frac = u - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer power-of-two factor,
    align-corners=false."""
    if factor < 2:
        raise ShapeError(f"upsample factor must be >= 2, got {factor}")
    if factor & (factor - 1):
        raise ShapeError(f"upsample factor must be a power of 2, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"upsample expects BxCxHxW, got {x.shape}")
    _, _, h, w = x.shape
    uh = _upsample_matrix(h, factor, x.dtype)
    uw = _upsample_matrix(w, factor, x.dtype)
    out = np.einsum("hk,bckl,wl->bchw", uh, x.data, uw, optimize=True)
    inputs = (x,)

    def build(_out):
        def backward(g):
            return _grads_for(inputs, (np.einsum("hk,bchw,wl->bckl", uh, g, uw, optimize=True),))

        return backward

    return _emit(out, inputs, build)


def conv_out_size(n: int, kernel: int, stride: int, padding: int) -> int:
    out = (n + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"convolution geometry (n={n}, k={kernel}, s={stride}, p={padding}) yields empty output"
        )
    return out


def unfold(x: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """im2col: extract KxK patches into rows of shape (B, H'*W', C*K*K)."""
    if x.ndim != 4:
        raise ShapeError(f"unfold expects BxCxHxW, got {x.shape}")
    bsz, c, h, w = x.shape
    oh = conv_out_size(h, kernel, stride, padding)
    ow = conv_out_size(w, kernel, stride, padding)
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # B,C,OH,OW,K,K
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(bsz, oh * ow, c * kernel * kernel)
    inputs = (x,)
    pad_shape = padded.shape

    def build(_out):
        def backward(g):
            gw = g.reshape(bsz, oh, ow, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
            buf = np.zeros(pad_shape, dtype=g.dtype)
            # col2im scatter-add, per kernel tap
            for ki in range(kernel):
                for kj in range(kernel):
                    buf[:, :, ki : ki + oh * stride : stride, kj : kj + ow * stride : stride] += gw[
                        :, :, :, :, ki, kj
                    ]
            if padding:
                buf = buf[:, :, padding:-padding, padding:-padding]
            return _grads_for(inputs, (np.ascontiguousarray(buf),))

        return backward

    return _emit(np.ascontiguousarray(cols), inputs, build)


# ---------------------------------------------------------------------------
# losses


def masked_mse(pred: Tensor, target: Tensor, weight: Tensor, denom: float | None = None) -> Tensor:
    """Channel-masked squared error.

    ``weight`` has one entry per leading-two-axes slice of ``pred``
    (per batch element and channel) and multiplies that slice's squared
    error.  The default denominator is the total element count, so an
    all-ones mask gives the plain MSE and an all-zero mask gives 0.
    """
    _same_dtype(pred, target, weight)
    if pred.shape != target.shape:
        raise ShapeError(f"pred/target shapes differ: {pred.shape} vs {target.shape}")
    if pred.ndim < 2 or weight.shape != pred.shape[:2]:
        raise ShapeError(f"weight shape {weight.shape} does not match channels of {pred.shape}")
    if denom is None:
        denom = float(pred.size)
    wexp = weight.data.reshape(weight.shape + (1,) * (pred.ndim - 2))
    diff = pred.data - target.data
    out = np.asarray((wexp * diff * diff).sum() / denom, dtype=pred.dtype)
    inputs = (pred, target, weight)

    def build(_out):
        def backward(g):
            base = (2.0 / denom) * g * wexp * diff
            pieces = []
            if pred.requires_grad:
                pieces.append((pred, base))
            if target.requires_grad:
                pieces.append((target, -base))
            return pieces

        return backward

    return _emit(out, inputs, build)


# ---------------------------------------------------------------------------
# composites


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: reshape + matmul (+ bias)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear input width {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (int(np.prod(lead)) if lead else 1, x.shape[-1]))
    y = matmul(flat, w)
    if b is not None:
        y = add_bias(y, b)
    return reshape(y, lead + (w.shape[1],))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int) -> Tensor:
    """Strided dense convolution via explicit patch-unfold + matmul.

    ``w`` has shape (C_out, C_in, K, K); output is B x C_out x H' x W'.
    """
    _same_dtype(x, w, b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects image BxCxHxW and kernel OxIxKxK, got {x.shape}, {w.shape}")
    bsz, c_in, h, wd = x.shape
    c_out, c_in_w, k, k2 = w.shape
    if c_in_w != c_in or k != k2:
        raise ShapeError(f"kernel {w.shape} does not match input {x.shape}")
    oh = conv_out_size(h, k, stride, padding)
    ow = conv_out_size(wd, k, stride, padding)
    cols = unfold(x, k, stride, padding)  # B, OH*OW, C*K*K
    flat = reshape(cols, (bsz * oh * ow, c_in * k * k))
    wmat = transpose(reshape(w, (c_out, c_in * k * k)), (1, 0))
    y = add_bias(matmul(flat, wmat), b)
    y = reshape(y, (bsz, oh, ow, c_out))
    return transpose(y, (0, 3, 1, 2))


def map_to_tokens(x: Tensor) -> Tensor:
    """B x C x H x W -> B x (H*W) x C, row-major over the grid."""
    if x.ndim != 4:
        raise ShapeError(f"expected BxCxHxW, got {x.shape}")
    b, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def tokens_to_map(x: Tensor, grid: tuple) -> Tensor:
    """B x N x C -> B x C x H x W for N == H*W."""
    h, w = grid
    if x.ndim != 3 or x.shape[1] != h * w:
        raise ShapeError(f"token count of {x.shape} does not match grid {grid}")
    b, _, c = x.shape
    return transpose(reshape(x, (b, h, w, c)), (0, 3, 1, 2))
