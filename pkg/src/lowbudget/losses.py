"""Training losses over batches of class probabilities.

All functions take ``(batch, C)`` probability tensors (or arrays) and return a
scalar ``Tensor`` that can be differentiated. Probabilities are clamped to
``PROB_FLOOR`` before every logarithm, which also realizes ``0 * log 0 = 0``.

``entropy_loss(p) + consistency_loss(p, q) == unsupervised_loss(p, q)`` holds
up to rounding for every pair of batches.
"""

import math

import numpy as np

from lowbudget import autodiff as ad
from lowbudget.errors import ContractViolation

PROB_FLOOR = 1e-12


def _probs(p):
    p = ad.as_tensor(p)
    if p.ndim != 2:
        raise ContractViolation(f"expected a (batch, C) probability matrix, got shape {p.shape}")
    return p


def _safe_log(p):
    return ad.log(ad.maximum(p, PROB_FLOOR))


def _pair(p, q):
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise ContractViolation(f"pristine and perturbed batches differ: {p.shape} vs {q.shape}")
    return p, q


def supervised_loss(probs, labels):
    """Mean negative log-likelihood of the true labels."""
    if labels is None:
        raise ContractViolation("supervised loss needs labels")
    p = _probs(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n = p.shape[0]
    return -ad.tsum(ad.pick(_safe_log(p), labels)) * (1.0 / n)


def entropy_loss(probs):
    p = _probs(probs)
    return -ad.tsum(p * _safe_log(p)) * (1.0 / p.shape[0])


def consistency_loss(pristine, perturbed):
    """Mean KL(pristine || perturbed); gradients reach both arguments."""
    p, q = _pair(pristine, perturbed)
    return ad.tsum(p * (_safe_log(p) - _safe_log(q))) * (1.0 / p.shape[0])


def unsupervised_loss(pristine, perturbed):
    """Cross-entropy of the perturbed prediction against the pristine one."""
    p, q = _pair(pristine, perturbed)
    return -ad.tsum(p * _safe_log(q)) * (1.0 / p.shape[0])


def total_loss(supervised, unsupervised, lam):
    if lam < 0 or math.isnan(lam):
        raise ContractViolation(f"lambda must be non-negative, got {lam}")
    if lam == 0:
        return ad.as_tensor(supervised)
    return ad.as_tensor(supervised) + ad.as_tensor(unsupervised) * float(lam)
