"""Compiled loops for 2x2 pooling over ``[N, H, W]`` stacks.

The high-side mirror row/column of an odd extent is read by clamping the
index, which is what a one-voxel edge-repeating pad produces.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def pool_forward(x, out, arg):
    n, h, w = x.shape
    ho, wo = out.shape[1], out.shape[2]
    for i in range(n):
        for r in range(ho):
            y0 = 2 * r
            y1 = min(y0 + 1, h - 1)
            for c in range(wo):
                x0 = 2 * c
                x1 = min(x0 + 1, w - 1)
                q0 = x[i, y0, x0]
                q1 = x[i, y0, x1]
                q2 = x[i, y1, x0]
                q3 = x[i, y1, x1]
                # strict comparisons keep the lowest position on ties
                if q1 > q0:
                    top, ta = q1, 1
                else:
                    top, ta = q0, 0
                if q3 > q2:
                    bot, ba = q3, 3
                else:
                    bot, ba = q2, 2
                if bot > top:
                    out[i, r, c] = bot
                    arg[i, r, c] = ba
                else:
                    out[i, r, c] = top
                    arg[i, r, c] = ta


@numba.njit(cache=True)
def pool_relu_backward(grad, arg, act, out):
    """Route pooled gradients to their winners, then apply the ReLU mask of ``act``."""
    n, h, w = out.shape
    ho, wo = grad.shape[1], grad.shape[2]
    for i in range(n):
        for y in range(h):
            for x in range(w):
                out[i, y, x] = 0
        for r in range(ho):
            for c in range(wo):
                a = arg[i, r, c]
                y = min(2 * r + a // 2, h - 1)
                x = min(2 * c + a % 2, w - 1)
                out[i, y, x] += grad[i, r, c]
        for y in range(h):
            for x in range(w):
                if act[i, y, x] <= 0:
                    out[i, y, x] = 0


def maxpool_stack(x):
    """``[..., H, W]`` -> pooled values and int8 window positions."""
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    flat = np.ascontiguousarray(x).reshape(-1, h, w)
    ho, wo = (h + 1) // 2, (w + 1) // 2
    out = np.empty((flat.shape[0], ho, wo), dtype=x.dtype)
    arg = np.empty((flat.shape[0], ho, wo), dtype=np.int8)
    pool_forward(flat, out, arg)
    return out.reshape(*lead, ho, wo), arg.reshape(*lead, ho, wo)


def maxpool_relu_backward(grad, arg, act):
    """Gradient through pooling and the preceding ReLU in one pass."""
    h, w = act.shape[-2:]
    ho, wo = grad.shape[-2:]
    out = np.empty(act.shape, dtype=grad.dtype)
    pool_relu_backward(np.ascontiguousarray(grad).reshape(-1, ho, wo),
                       np.ascontiguousarray(arg).reshape(-1, ho, wo),
                       np.ascontiguousarray(act).reshape(-1, h, w),
                       out.reshape(-1, h, w))
    return out
