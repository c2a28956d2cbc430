"""Finite-difference probes for the differentiable operators.

Each probe builds a seeded random scalar objective around one op and runs
grad_check against it.  Points are kept tie-free where the op sorts or
branches (Lovasz error margins are resampled until distinct) so the
objective is differentiable at the probe point.  ``negative_control`` wires
a deliberately wrong backward pass and must fail; it is excluded from
``all`` and exists so the harness's sensitivity can be demonstrated.
"""

import zlib

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .errors import DegenerateInputError

TOLERANCE = 1e-4

ALL_OPS = ("conv2d", "upsample_nearest", "softmax_channels", "ntxent", "lovasz_softmax", "composite")
EXTRA_OPS = ("negative_control",)


def _proj_sum(t: Tensor, proj: np.ndarray) -> Tensor:
    return ad.tsum(ad.mul(t, ad.constant(proj)))


def _probe_conv2d(rng) -> float:
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    x = ad.parameter(rng.normal(size=(2, 6, 6)))
    w = ad.parameter(rng.normal(size=(3, 2, 3, 3)) * 0.5)
    b = ad.parameter(rng.normal(size=3) * 0.5)
    out_shape = ad.conv2d(x, w, b, stride=stride, padding=padding).shape
    proj = rng.normal(size=out_shape)
    errs = [
        ad.grad_check(lambda t: _proj_sum(ad.conv2d(t, w, b, stride=stride, padding=padding), proj), x),
        ad.grad_check(lambda t: _proj_sum(ad.conv2d(x, t, b, stride=stride, padding=padding), proj), w),
        ad.grad_check(lambda t: _proj_sum(ad.conv2d(x, w, t, stride=stride, padding=padding), proj), b),
    ]
    return max(errs)


def _probe_upsample(rng) -> float:
    x = ad.parameter(rng.normal(size=(2, 3, 4)))
    proj = rng.normal(size=(2, 6, 8))
    return ad.grad_check(lambda t: _proj_sum(ad.upsample_nearest(t, 2), proj), x)


def _probe_softmax(rng) -> float:
    x = ad.parameter(rng.normal(size=(3, 2, 2)))
    proj = rng.normal(size=(3, 2, 2))
    return ad.grad_check(lambda t: _proj_sum(ad.softmax_channels(t), proj), x)


def _probe_ntxent(rng) -> float:
    fa = ad.parameter(rng.normal(size=(4, 6)))
    fb_const = ad.constant(rng.normal(size=(4, 6)))
    fb = ad.parameter(fb_const.data.copy())
    fa_const = ad.constant(fa.data.copy())
    err_a = ad.grad_check(lambda t: losses.ntxent(t, fb_const, tau=0.5), fa)
    err_b = ad.grad_check(lambda t: losses.ntxent(fa_const, t, tau=0.5), fb)
    return max(err_a, err_b)


def _tie_free_lovasz_point(rng, shape, num_classes, margin=1e-3, tries=60):
    """Draw logits/labels whose per-class Lovasz error vectors have no
    near-ties, so sorting order is stable under the probe's perturbations."""
    h, w = shape
    for _ in range(tries):
        logits = rng.normal(size=(num_classes, h, w))
        labels = rng.integers(0, num_classes, size=(h, w))
        probs_data = ad.softmax_channels(ad.constant(logits)).data
        ok = True
        flat = labels.reshape(-1)
        for c in range(num_classes):
            p = probs_data[c].reshape(-1)
            gt = flat == c
            m = np.where(gt, 1.0 - p, p)
            gaps = np.diff(np.sort(m))
            if gaps.size and gaps.min() < margin:
                ok = False
                break
        if ok:
            return logits, labels
    raise DegenerateInputError("could not find a tie-free Lovasz probe point")


def _probe_lovasz(rng) -> float:
    logits, labels = _tie_free_lovasz_point(rng, (4, 4), 3)
    point = ad.parameter(logits)
    return ad.grad_check(lambda t: losses.lovasz_softmax(ad.softmax_channels(t), labels), point)


def _probe_composite(rng) -> float:
    """conv -> conv -> softmax -> lovasz chain, checked at input and weights."""
    labels = None
    for _ in range(60):
        # small map and mild weights keep the softmax away from saturation,
        # where clustered probabilities make tie-free draws rare
        x_data = rng.normal(size=(3, 6, 6))
        w1_data = rng.normal(size=(4, 3, 3, 3)) * 0.25
        b1_data = rng.normal(size=4) * 0.2
        w2_data = rng.normal(size=(3, 4, 3, 3)) * 0.25
        b2_data = rng.normal(size=3) * 0.2
        cand = rng.integers(0, 3, size=(3, 3))

        def fwd(xt, w1t):
            h1 = ad.conv2d(xt, w1t, ad.constant(b1_data), stride=2, padding=1)
            h2 = ad.conv2d(h1, ad.constant(w2_data), ad.constant(b2_data), stride=1, padding=1)
            return ad.softmax_channels(h2)

        probs = fwd(ad.constant(x_data), ad.constant(w1_data)).data
        flat = cand.reshape(-1)
        ok = True
        for c in range(3):
            m = np.where(flat == c, 1.0 - probs[c].reshape(-1), probs[c].reshape(-1))
            gaps = np.diff(np.sort(m))
            if gaps.size and gaps.min() < 1e-3:
                ok = False
                break
        if ok:
            labels = cand
            break
    if labels is None:
        raise DegenerateInputError("could not find a tie-free composite probe point")

    x = ad.parameter(x_data)
    w1 = ad.parameter(w1_data)

    def f_x(t):
        h1 = ad.conv2d(t, ad.constant(w1_data), ad.constant(b1_data), stride=2, padding=1)
        h2 = ad.conv2d(h1, ad.constant(w2_data), ad.constant(b2_data), stride=1, padding=1)
        return losses.lovasz_softmax(ad.softmax_channels(h2), labels)

    def f_w(t):
        h1 = ad.conv2d(ad.constant(x_data), t, ad.constant(b1_data), stride=2, padding=1)
        h2 = ad.conv2d(h1, ad.constant(w2_data), ad.constant(b2_data), stride=1, padding=1)
        return losses.lovasz_softmax(ad.softmax_channels(h2), labels)

    return max(ad.grad_check(f_x, x), ad.grad_check(f_w, w1))


def _probe_negative_control(rng) -> float:
    c = rng.normal(size=5) + 2.0

    def f(t):
        out = np.array((t.data * c).sum())

        def bp(g):
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g * c * 1.05  # wrong on purpose: 5% too large

        return Tensor(out, requires_grad=True, parents=(t,), backprop=bp)

    point = ad.parameter(rng.normal(size=5))
    return ad.grad_check(f, point)


_PROBES = {
    "conv2d": _probe_conv2d,
    "upsample_nearest": _probe_upsample,
    "softmax_channels": _probe_softmax,
    "ntxent": _probe_ntxent,
    "lovasz_softmax": _probe_lovasz,
    "composite": _probe_composite,
    "negative_control": _probe_negative_control,
}


def known_ops():
    return ALL_OPS + EXTRA_OPS


def run_op(name: str, trials: int, seed: int = 0) -> float:
    probe = _PROBES[name]
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng((seed, zlib.crc32(name.encode("utf-8")), trial))
        worst = max(worst, probe(rng))
    return worst
