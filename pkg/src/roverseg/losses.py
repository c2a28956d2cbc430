"""Training losses.

Two pieces drive the optimizer: a Lovasz-Softmax term that directly relaxes
the per-class Jaccard index of the segmentation, and an NT-Xent term that
pulls depth features toward the matching frozen RGB features while pushing
them away from the other samples in the batch.  Both are composed from
autodiff primitives so gradients come out of the same tape as the network.
"""

from dataclasses import dataclass
from functools import reduce
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError, DomainError, ShapeError

_PROB_TOL = 1e-6


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity expects equal 1-D shapes, got {a.shape} and {b.shape}")
    na = float((a.data * a.data).sum())
    nb = float((b.data * b.data).sum())
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_similarity of a zero vector")
    dot = ad.tsum(ad.mul(a, b))
    # 1/sqrt(|a|^2 |b|^2) composed as exp(-0.5 log(.)) so it stays on the tape
    inv = ad.exp(ad.scale(ad.add(ad.log(ad.tsum(ad.mul(a, a))), ad.log(ad.tsum(ad.mul(b, b)))), -0.5))
    return ad.mul(dot, inv)


def _row_normalize(f: Tensor, ones_d: Tensor) -> Tensor:
    nsq = ad.matmul(ad.mul(f, f), ones_d)  # (N,1) squared row norms
    inv = ad.exp(ad.scale(ad.log(nsq), -0.5))
    return ad.mul(f, ad.matmul(inv, ad.transpose(ones_d)))


def ntxent(f_anchor: Tensor, f_target: Tensor, tau: float = 0.5) -> Tensor:
    """Contrastive alignment loss over row pairs of two (N, D) feature matrices.

    Row i of ``f_anchor`` is attracted to row i of ``f_target`` and repelled
    from every other target row, through temperature-scaled cosine
    similarities.  Reduces to the mean over rows.
    """
    tau = float(tau)
    if not (np.isfinite(tau) and tau > 0.0):
        raise DomainError(f"temperature must be positive and finite, got {tau!r}")
    if f_anchor.data.ndim != 2 or f_target.data.ndim != 2:
        raise ShapeError("ntxent expects (N, D) feature matrices")
    if f_anchor.shape != f_target.shape:
        raise ShapeError(f"ntxent shape mismatch {f_anchor.shape} vs {f_target.shape}")
    n, d = f_anchor.shape
    if n < 1 or d < 1:
        raise DegenerateInputError(f"ntxent on empty feature matrix {f_anchor.shape}")
    for f in (f_anchor, f_target):
        if np.any((f.data * f.data).sum(axis=1) == 0.0):
            raise DegenerateInputError("ntxent feature row with zero norm")

    ones_d = ad.constant(np.ones((d, 1)))
    ones_n = ad.constant(np.ones((n, 1)))
    za = _row_normalize(f_anchor, ones_d)
    zt = _row_normalize(f_target, ones_d)
    sims = ad.scale(ad.matmul(za, ad.transpose(zt)), 1.0 / tau)
    # subtracting the detached row max leaves the row softmax unchanged and
    # keeps every exp argument <= 0
    m = sims.data.max(axis=1, keepdims=True)
    shifted = ad.add(sims, ad.constant(np.repeat(-m, n, axis=1)))
    log_denom = ad.log(ad.matmul(ad.exp(shifted), ones_n))
    diag = ad.matmul(ad.mul(shifted, ad.constant(np.eye(n))), ones_n)
    per_row = ad.add(log_denom, ad.scale(diag, -1.0))
    return ad.scale(ad.tsum(per_row), 1.0 / n)


def lovasz_grad(gt_sorted) -> np.ndarray:
    """Weight vector of the Jaccard extension for one descending error order."""
    g = np.asarray(gt_sorted, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ShapeError("lovasz_grad expects a non-empty 1-D array")
    if not np.all((g == 0.0) | (g == 1.0)):
        raise DomainError("lovasz_grad labels must be 0 or 1")
    p = g.sum()
    intersection = p - np.cumsum(g)
    union = p + np.cumsum(1.0 - g)
    jacc = 1.0 - intersection / union
    if g.size > 1:
        jacc[1:] = jacc[1:] - jacc[:-1]
    return jacc


def _lovasz_single(probs: Tensor, labels: np.ndarray) -> Tensor:
    if probs.data.ndim != 3:
        raise ShapeError(f"lovasz_softmax expects (C,H,W) probabilities, got {probs.shape}")
    c, h, w = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match probabilities {(h, w)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DomainError("labels must be integers")
    if labels.min() < 0 or labels.max() >= c:
        raise DomainError(f"labels out of range [0, {c})")
    col_sums = probs.data.sum(axis=0)
    if np.abs(col_sums - 1.0).max() > _PROB_TOL:
        raise DomainError("probabilities do not sum to 1 across classes")
    lab = labels.reshape(-1)
    terms = []
    for cls in range(c):
        p = ad.flatten(ad.row(probs, cls))
        gt = lab == cls
        sign = np.where(gt, -1.0, 1.0)
        offset = gt.astype(np.float64)
        errors = ad.add(ad.mul(p, ad.constant(sign)), ad.constant(offset))
        # descending errors, ties broken by ascending pixel index
        order = np.argsort(-errors.data, kind="stable")
        weights = lovasz_grad(gt[order].astype(np.float64))
        terms.append(ad.tsum(ad.mul(ad.permute(errors, order), ad.constant(weights))))
    return ad.scale(reduce(ad.add, terms), 1.0 / c)


def lovasz_softmax(probs, labels) -> Tensor:
    """Jaccard surrogate, averaged over all classes (and samples when given lists)."""
    if isinstance(probs, (list, tuple)):
        if not isinstance(labels, (list, tuple)) or len(probs) != len(labels):
            raise ShapeError("lovasz_softmax batch needs matching probs/labels lists")
        if len(probs) == 0:
            raise DegenerateInputError("lovasz_softmax on an empty batch")
        per = [_lovasz_single(p, l) for p, l in zip(probs, labels)]
        return ad.scale(reduce(ad.add, per), 1.0 / len(per))
    return _lovasz_single(probs, labels)


@dataclass
class LossBreakdown:
    l_ls: Tensor
    l_cont: Optional[Tensor]
    total: Tensor


def total_loss(l_ls: Tensor, l_cont: Optional[Tensor] = None) -> LossBreakdown:
    """Unit-weight sum of the segmentation term and, when given, the contrastive term."""
    if l_ls.data.size != 1:
        raise ShapeError("l_ls must be scalar")
    if l_cont is None:
        return LossBreakdown(l_ls, None, l_ls)
    if l_cont.data.size != 1:
        raise ShapeError("l_cont must be scalar")
    return LossBreakdown(l_ls, l_cont, ad.add(l_ls, l_cont))
