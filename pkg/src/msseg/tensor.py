"""Raw numeric kernels on dense numpy arrays.

Feature maps are channel-first. Batched kernels keep the batch axis second,
``[C, B, H, W]``, so every convolution is one matrix product whose result is
already laid out for the next layer. Single-sample helpers take ``[C, H, W]``.
"""

import numpy as np
import scipy.fft as sp_fft

from .errors import DimensionError

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64

_SPATIAL = ("H", "W")


def _check_ndim(x, ndim, name):
    if x.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dimensions, got shape {x.shape}")


def im2col(x, k):
    """Unfold ``[C, B, H, W]`` into a ``[C*k*k, B*Ho*Wo]`` matrix.

    Row ``(c, dy, dx)`` holds ``x[c, :, dy:dy+Ho, dx:dx+Wo]`` flattened.
    """
    c, b, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((c, k, k, b, ho, wo), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = x[:, :, dy:dy + ho, dx:dx + wo]
    return cols.reshape(c * k * k, b * ho * wo)


def col2im(cols, x_shape, k):
    """Adjoint of :func:`im2col`: scatter-add unfolded rows back to ``x_shape``."""
    c, b, h, w = x_shape
    ho, wo = h - k + 1, w - k + 1
    cols = cols.reshape(c, k, k, b, ho, wo)
    out = np.zeros(x_shape, dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[:, :, dy:dy + ho, dx:dx + wo] += cols[:, dy, dx]
    return out


def _check_conv(x, kernels, biases):
    _check_ndim(x, 4, "input")
    _check_ndim(kernels, 4, "kernels")
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw:
        raise DimensionError(f"kernels must be square, got {kh}x{kw}")
    if c_in != x.shape[0]:
        raise DimensionError(
            f"channel axis mismatch: input has C={x.shape[0]}, kernels expect C={c_in}")
    for axis, extent in zip(_SPATIAL, x.shape[2:]):
        if kh > extent:
            raise DimensionError(f"kernel extent {kh} exceeds input extent {extent} on axis {axis}")
    if biases.shape != (c_out,):
        raise DimensionError(f"biases must have shape ({c_out},), got {biases.shape}")
    return kh


def _use_fft(c_in, k):
    # measured crossover: direct im2col wins for shallow inputs and small kernels
    return c_in * k * k >= FFT_MIN_REDUCTION


FFT_MIN_REDUCTION = 500


def _fft_shape(h, w):
    return sp_fft.next_fast_len(h, real=True), sp_fft.next_fast_len(w, real=True)


def conv2d_valid_batch(x, kernels, biases, return_cache=False, method="auto"):
    """Valid cross-correlation of ``[C_in, B, H, W]`` with ``[C_out, C_in, k, k]``.

    Returns ``[C_out, B, H-k+1, W-k+1]``. ``method`` is ``"direct"`` (im2col
    plus one matrix product), ``"fft"`` (per-frequency channel mixing) or
    ``"auto"``. With ``return_cache`` the second return value feeds
    :func:`conv2d_valid_backward`.
    """
    k = _check_conv(x, kernels, biases)
    c_in, b, h, w = x.shape
    c_out = kernels.shape[0]
    ho, wo = h - k + 1, w - k + 1
    if method == "auto":
        method = "fft" if _use_fft(c_in, k) else "direct"
    if method == "direct":
        cols = im2col(x, k)
        out = kernels.reshape(c_out, -1) @ cols
        out += biases[:, None]
        out = out.reshape(c_out, b, ho, wo)
        cache = ("direct", cols)
    elif method == "fft":
        n, m = _fft_shape(h, w)
        xf = sp_fft.rfft2(x, s=(n, m))
        mf = xf.shape[-1]
        xf = np.ascontiguousarray(xf.reshape(c_in, b, n * mf).transpose(2, 0, 1))  # F, C, B
        wf = sp_fft.rfft2(kernels, s=(n, m)).reshape(c_out, c_in, n * mf)
        wf = np.ascontiguousarray(np.conj(wf).transpose(2, 0, 1))  # F, O, C
        yf = np.matmul(wf, xf)
        y = sp_fft.irfft2(np.ascontiguousarray(yf.transpose(1, 2, 0)).reshape(c_out, b, n, mf),
                          s=(n, m))
        out = y[:, :, :ho, :wo] + biases[:, None, None, None]
        cache = ("fft", xf, (n, m))
    else:
        raise ValueError(f"unknown convolution method {method!r}")
    if return_cache:
        return out, cache
    return out


def conv2d_valid_backward(grad_out, cache, x_shape, kernels, need_input_grad=True):
    """Gradients of :func:`conv2d_valid_batch` w.r.t. kernels, biases and input.

    The input gradient is ``None`` when ``need_input_grad`` is false.
    """
    c_out, c_in, k, _ = kernels.shape
    grad_b = grad_out.reshape(c_out, -1).sum(axis=1)
    grad_x = None
    if cache[0] == "direct":
        cols = cache[1]
        g = grad_out.reshape(c_out, -1)
        grad_k = (g @ cols.T).reshape(kernels.shape)
        if need_input_grad:
            grad_x = col2im(kernels.reshape(c_out, -1).T @ g, x_shape, k)
        return grad_k, grad_b, grad_x

    _, xf, (n, m) = cache
    b = x_shape[1]
    gf = sp_fft.rfft2(grad_out, s=(n, m))
    mf = gf.shape[-1]
    gf = np.ascontiguousarray(gf.reshape(c_out, b, n * mf).transpose(2, 0, 1))  # F, O, B
    # correlation theorem: kernel gradient is conj(G) * X summed over the batch
    kf = np.matmul(np.conj(gf), xf.transpose(0, 2, 1))  # F, O, C
    grad_k = sp_fft.irfft2(kf.transpose(1, 2, 0).reshape(c_out, c_in, n, mf), s=(n, m))
    grad_k = np.ascontiguousarray(grad_k[:, :, :k, :k])
    if need_input_grad:
        wf = sp_fft.rfft2(kernels, s=(n, m)).reshape(c_out, c_in, n * mf)
        wf = np.ascontiguousarray(wf.transpose(2, 1, 0))  # F, C, O
        xg = np.matmul(wf, gf)  # F, C, B
        grad_x = sp_fft.irfft2(np.ascontiguousarray(xg.transpose(1, 2, 0)).reshape(c_in, b, n, mf),
                               s=(n, m))
        grad_x = np.ascontiguousarray(grad_x[:, :, :x_shape[2], :x_shape[3]])
    return grad_k, grad_b, grad_x


def conv2d_valid(x, kernels, biases):
    """Single-sample valid convolution: ``[C_in, H, W] -> [C_out, H-k+1, W-k+1]``."""
    _check_ndim(x, 3, "input")
    return conv2d_valid_batch(x[:, None], kernels, biases)[:, 0]


def _normalize_pad(pad):
    if isinstance(pad, (int, np.integer)):
        return ((int(pad), int(pad)), (int(pad), int(pad)))
    (top, bottom), (left, right) = pad
    return ((int(top), int(bottom)), (int(left), int(right)))


def mirror_pad(x, pad):
    """Edge-repeating reflection on the last two axes.

    ``pad`` is either an int or ``((top, bottom), (left, right))``. A row
    ``[1, 2, 3]`` padded by 2 on the left becomes ``[2, 1, 1, 2, 3]``.
    """
    pad = _normalize_pad(pad)
    if x.ndim < 2:
        raise DimensionError(f"mirror_pad needs at least 2 dimensions, got shape {x.shape}")
    for axis, extent, amounts in zip(_SPATIAL, x.shape[-2:], pad):
        for amount in amounts:
            if amount < 0 or amount > extent:
                raise DimensionError(
                    f"pad amount {amount} invalid for extent {extent} on axis {axis}")
    if pad == ((0, 0), (0, 0)):
        return x.copy()
    widths = [(0, 0)] * (x.ndim - 2) + list(pad)
    return np.pad(x, widths, mode="symmetric")


def mirror_pad_backward(grad, pad):
    """Fold the gradient of a padded array back onto the unpadded extents."""
    (top, bottom), (left, right) = _normalize_pad(pad)
    g = grad.copy()
    h = g.shape[-2] - top - bottom
    w = g.shape[-1] - left - right
    # padded strips mirror the interior edge rows/columns, nearest first
    if top:
        g[..., top:2 * top, :] += g[..., :top, :][..., ::-1, :]
    if bottom:
        end = top + h
        g[..., end - bottom:end, :] += g[..., end:end + bottom, :][..., ::-1, :]
    g = g[..., top:top + h, :]
    if left:
        g[..., left:2 * left] += g[..., :left][..., ::-1]
    if right:
        end = left + w
        g[..., end - right:end] += g[..., end:end + right][..., ::-1]
    return np.ascontiguousarray(g[..., left:left + w])


def maxpool_2x2(x):
    """Non-overlapping 2x2 max-pooling over the last two axes.

    Odd extents are first padded by one on the high side with
    :func:`mirror_pad`. Returns ``(pooled, argmax)`` where ``argmax`` holds the
    window position (0..3, row-major) of each selected element; ties go to the
    lowest position.
    """
    h, w = x.shape[-2:]
    padded = mirror_pad(x, ((0, h % 2), (0, w % 2))) if (h % 2 or w % 2) else x
    q0, q1 = padded[..., 0::2, 0::2], padded[..., 0::2, 1::2]
    q2, q3 = padded[..., 1::2, 0::2], padded[..., 1::2, 1::2]
    top, bottom = np.maximum(q0, q1), np.maximum(q2, q3)
    # strict comparisons keep the lowest window position on ties
    lower = bottom > top
    arg = lower.view(np.int8) * np.int8(2) + np.where(lower, q3 > q2, q1 > q0).view(np.int8)
    return np.maximum(top, bottom), arg


def maxpool_2x2_backward(grad_out, argmax, in_shape):
    """Route ``grad_out`` to the winning element of each window."""
    h, w = in_shape[-2:]
    lead = grad_out.shape[:-2]
    padded = np.empty((*lead, h + h % 2, w + w % 2), dtype=grad_out.dtype)
    for pos, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        padded[..., dy::2, dx::2] = grad_out * (argmax == pos)
    if h % 2 or w % 2:
        return mirror_pad_backward(padded, ((0, h % 2), (0, w % 2)))
    return padded


def matmul(a, b):
    """Matrix product with an explicit inner-extent check."""
    _check_ndim(a, 2, "left operand")
    _check_ndim(b, 2, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"inner extents disagree: {a.shape[1]} (axis 1 of left) vs {b.shape[0]} (axis 0 of right)")
    return a @ b
