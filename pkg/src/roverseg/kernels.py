"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a numba ``@njit`` loop nest and a vectorized
numpy twin.  Both are always importable (the benchmark times them against
each other); the module-level dispatchers pick one at import time from the
``ROVERSEG_BACKEND`` environment variable:

    ROVERSEG_BACKEND=numba   force numba, error if unavailable
    ROVERSEG_BACKEND=numpy   force the pure-numpy path
    unset                    numba when importable, else numpy

Convolutions agree across backends to float64 round-off (the numpy path
reduces through BLAS, so summation order differs); the ray marcher is
written so both backends execute the same per-ray arithmetic in the same
order and its outputs are bitwise identical.
"""

import os

import numpy as np

from .errors import ConfigError

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only where numba is absent
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _pick_backend():
    req = os.environ.get("ROVERSEG_BACKEND", "").strip().lower()
    if req not in ("", "numba", "numpy"):
        raise ConfigError(f"unknown ROVERSEG_BACKEND value {req!r}")
    if req == "numba":
        if not HAS_NUMBA:
            raise ConfigError("ROVERSEG_BACKEND=numba but numba is not importable")
        return "numba"
    if req == "numpy":
        return "numpy"
    return "numba" if HAS_NUMBA else "numpy"


BACKEND = _pick_backend()


def conv_output_hw(h, w, k, stride, padding):
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    return ho, wo


# ---------------------------------------------------------------------------
# conv2d, numpy path (im2col through stride tricks, reductions in BLAS)
# ---------------------------------------------------------------------------


def _padded(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def conv2d_forward_numpy(x, w, bias, stride, padding):
    cout, cin, kh, kw = w.shape
    xp = _padded(x, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    y = np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))
    y += bias[:, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward_input_numpy(gy, w, x_hw, stride, padding):
    cout, cin, kh, kw = w.shape
    _, ho, wo = gy.shape
    h, wd = x_hw
    gxp = np.zeros((cin, h + 2 * padding, wd + 2 * padding))
    # (cin, kh, kw, ho, wo): contribution of each tap, scattered back as
    # k*k strided slice adds instead of add.at (same result, far faster)
    t = np.tensordot(w, gy, axes=([0], [0]))
    for a in range(kh):
        for b in range(kw):
            gxp[:, a : a + stride * ho : stride, b : b + stride * wo : stride] += t[:, a, b]
    if padding == 0:
        return np.ascontiguousarray(gxp)
    return np.ascontiguousarray(gxp[:, padding : padding + h, padding : padding + wd])


def conv2d_backward_kernel_numpy(gy, x, kh, kw, stride, padding):
    xp = _padded(x, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    return np.ascontiguousarray(np.tensordot(gy, win, axes=([1, 2], [1, 2])))


# ---------------------------------------------------------------------------
# conv2d, numba path (plain loop nests, deterministic accumulation order)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _conv2d_forward_nb(x, w, bias, stride, padding, out):
    cout, cin, kh, kw = w.shape
    h = x.shape[1]
    wd = x.shape[2]
    ho = out.shape[1]
    wo = out.shape[2]
    for co in range(cout):
        bv = bias[co]
        for oh in range(ho):
            for ow in range(wo):
                out[co, oh, ow] = bv
    for co in range(cout):
        for ci in range(cin):
            for a in range(kh):
                oh_lo = max(0, (padding - a + stride - 1) // stride)
                oh_hi = min(ho - 1, (h - 1 + padding - a) // stride)
                for b in range(kw):
                    ow_lo = max(0, (padding - b + stride - 1) // stride)
                    ow_hi = min(wo - 1, (wd - 1 + padding - b) // stride)
                    wv = w[co, ci, a, b]
                    for oh in range(oh_lo, oh_hi + 1):
                        ih = oh * stride - padding + a
                        for ow in range(ow_lo, ow_hi + 1):
                            out[co, oh, ow] += x[ci, ih, ow * stride - padding + b] * wv


@njit(cache=True)
def _conv2d_backward_input_nb(gy, w, stride, padding, gx):
    cout, cin, kh, kw = w.shape
    ho = gy.shape[1]
    wo = gy.shape[2]
    h = gx.shape[1]
    wd = gx.shape[2]
    for co in range(cout):
        for ci in range(cin):
            for a in range(kh):
                oh_lo = max(0, (padding - a + stride - 1) // stride)
                oh_hi = min(ho - 1, (h - 1 + padding - a) // stride)
                for b in range(kw):
                    ow_lo = max(0, (padding - b + stride - 1) // stride)
                    ow_hi = min(wo - 1, (wd - 1 + padding - b) // stride)
                    wv = w[co, ci, a, b]
                    for oh in range(oh_lo, oh_hi + 1):
                        ih = oh * stride - padding + a
                        for ow in range(ow_lo, ow_hi + 1):
                            gx[ci, ih, ow * stride - padding + b] += gy[co, oh, ow] * wv


@njit(cache=True)
def _conv2d_backward_kernel_nb(gy, x, stride, padding, gw):
    cout, cin, kh, kw = gw.shape
    ho = gy.shape[1]
    wo = gy.shape[2]
    h = x.shape[1]
    wd = x.shape[2]
    for co in range(cout):
        for ci in range(cin):
            for a in range(kh):
                oh_lo = max(0, (padding - a + stride - 1) // stride)
                oh_hi = min(ho - 1, (h - 1 + padding - a) // stride)
                for b in range(kw):
                    ow_lo = max(0, (padding - b + stride - 1) // stride)
                    ow_hi = min(wo - 1, (wd - 1 + padding - b) // stride)
                    acc = 0.0
                    for oh in range(oh_lo, oh_hi + 1):
                        ih = oh * stride - padding + a
                        for ow in range(ow_lo, ow_hi + 1):
                            acc += gy[co, oh, ow] * x[ci, ih, ow * stride - padding + b]
                    gw[co, ci, a, b] = acc


def conv2d_forward_numba(x, w, bias, stride, padding):
    ho, wo = conv_output_hw(x.shape[1], x.shape[2], w.shape[2], stride, padding)
    out = np.empty((w.shape[0], ho, wo))
    _conv2d_forward_nb(x, w, bias, stride, padding, out)
    return out


def conv2d_backward_input_numba(gy, w, x_hw, stride, padding):
    gx = np.zeros((w.shape[1], x_hw[0], x_hw[1]))
    _conv2d_backward_input_nb(gy, w, stride, padding, gx)
    return gx


def conv2d_backward_kernel_numba(gy, x, kh, kw, stride, padding):
    gw = np.empty((gy.shape[0], x.shape[0], kh, kw))
    _conv2d_backward_kernel_nb(gy, x, stride, padding, gw)
    return gw


# ---------------------------------------------------------------------------
# heightfield ray marcher
#
# Fixed coarse stepping followed by bisection refinement.  The per-ray
# arithmetic (sampling order, step positions, midpoint updates) is written
# identically in both backends so results match bit for bit.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _sample_nb(grid, cell, x, y):
    gx = x / cell
    gy = y / cell
    if gx < 0.0:
        gx = 0.0
    if gy < 0.0:
        gy = 0.0
    m = grid.shape[0] - 2
    i = int(gx)
    j = int(gy)
    if i > m:
        i = m
    if j > m:
        j = m
    fx = gx - i
    fy = gy - j
    v00 = grid[j, i]
    v10 = grid[j, i + 1]
    v01 = grid[j + 1, i]
    v11 = grid[j + 1, i + 1]
    a = v00 + (v10 - v00) * fx
    b = v01 + (v11 - v01) * fx
    return a + (b - a) * fy


def sample_height_numpy(grid, cell, x, y):
    """Bilinear lookup with edge clamping; mirrors _sample_nb exactly."""
    gx = np.maximum(x / cell, 0.0)
    gy = np.maximum(y / cell, 0.0)
    m = grid.shape[0] - 2
    i = np.minimum(gx.astype(np.int64), m)
    j = np.minimum(gy.astype(np.int64), m)
    fx = gx - i
    fy = gy - j
    v00 = grid[j, i]
    v10 = grid[j, i + 1]
    v01 = grid[j + 1, i]
    v11 = grid[j + 1, i + 1]
    a = v00 + (v10 - v00) * fx
    b = v01 + (v11 - v01) * fx
    return a + (b - a) * fy


@njit(cache=True)
def _march_nb(grid, cell, ox, oy, oz, dirs, t_max, dt, n_bisect, t_out, hit_out):
    n = dirs.shape[0]
    nsteps = int(round(t_max / dt))
    for p in range(n):
        dx = dirs[p, 0]
        dy = dirs[p, 1]
        dz = dirs[p, 2]
        lo = 0.0
        hi = 0.0
        hit = False
        for i in range(1, nsteps + 1):
            t = i * dt
            h = _sample_nb(grid, cell, ox + t * dx, oy + t * dy)
            if oz + t * dz <= h:
                hit = True
                hi = t
                lo = t - dt
                break
        if hit:
            for _ in range(n_bisect):
                mid = 0.5 * (lo + hi)
                mh = _sample_nb(grid, cell, ox + mid * dx, oy + mid * dy)
                if oz + mid * dz <= mh:
                    hi = mid
                else:
                    lo = mid
            t_out[p] = 0.5 * (lo + hi)
            hit_out[p] = True
        else:
            t_out[p] = t_max
            hit_out[p] = False


def march_rays_numba(grid, cell, origin, dirs, t_max, dt, n_bisect):
    n = dirs.shape[0]
    t_out = np.empty(n)
    hit_out = np.empty(n, dtype=np.bool_)
    _march_nb(grid, cell, origin[0], origin[1], origin[2], dirs, t_max, dt, n_bisect, t_out, hit_out)
    return t_out, hit_out


def march_rays_numpy(grid, cell, origin, dirs, t_max, dt, n_bisect):
    n = dirs.shape[0]
    ox, oy, oz = origin[0], origin[1], origin[2]
    dx = dirs[:, 0]
    dy = dirs[:, 1]
    dz = dirs[:, 2]
    nsteps = int(round(t_max / dt))
    lo = np.zeros(n)
    hi = np.zeros(n)
    hit = np.zeros(n, dtype=np.bool_)
    for i in range(1, nsteps + 1):
        t = i * dt
        h = sample_height_numpy(grid, cell, ox + t * dx, oy + t * dy)
        below = (oz + t * dz <= h) & ~hit
        if below.any():
            hi[below] = t
            lo[below] = t - dt
            hit |= below
        if hit.all():
            break
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        mh = sample_height_numpy(grid, cell, ox + mid * dx, oy + mid * dy)
        under = oz + mid * dz <= mh
        hi = np.where(hit & under, mid, hi)
        lo = np.where(hit & ~under, mid, lo)
    t_out = np.where(hit, 0.5 * (lo + hi), t_max)
    return t_out, hit


# ---------------------------------------------------------------------------
# dispatchers
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    _impl = {
        "conv2d_forward": conv2d_forward_numba,
        "conv2d_backward_input": conv2d_backward_input_numba,
        "conv2d_backward_kernel": conv2d_backward_kernel_numba,
        "march_rays": march_rays_numba,
    }
else:
    _impl = {
        "conv2d_forward": conv2d_forward_numpy,
        "conv2d_backward_input": conv2d_backward_input_numpy,
        "conv2d_backward_kernel": conv2d_backward_kernel_numpy,
        "march_rays": march_rays_numpy,
    }


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, bias, stride=1, padding=0):
    return _impl["conv2d_forward"](_c(x), _c(w), _c(bias), stride, padding)


def conv2d_backward_input(gy, w, x_hw, stride=1, padding=0):
    return _impl["conv2d_backward_input"](_c(gy), _c(w), x_hw, stride, padding)


def conv2d_backward_kernel(gy, x, kh, kw, stride=1, padding=0):
    return _impl["conv2d_backward_kernel"](_c(gy), _c(x), kh, kw, stride, padding)


def march_rays(grid, cell, origin, dirs, t_max, dt, n_bisect):
    return _impl["march_rays"](_c(grid), float(cell), _c(origin), _c(dirs), float(t_max), float(dt), int(n_bisect))
