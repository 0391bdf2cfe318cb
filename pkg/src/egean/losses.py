"""Differentiable training losses built on :mod:`egean.autodiff`.

These mirror the numpy estimators but accept tensors so the optimizer can
follow their gradients.  Propensities arrive detached by convention; the
functions do not enforce it.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .estimators import PROB_EPS, PROPENSITY_FLOOR, KernelSpec, median_bandwidth


def bce(labels, probs: ad.Tensor) -> ad.Tensor:
    """Per-sample cross-entropy with the probability clamped away from 0 and 1."""
    labels = np.asarray(labels, dtype=np.float64).reshape(probs.shape)
    p = ad.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    return -(labels * ad.log(p) + (1.0 - labels) * ad.log(1.0 - p))


def floor_propensity(p_hat: np.ndarray, counter: Optional[dict] = None) -> np.ndarray:
    low = p_hat < PROPENSITY_FLOOR
    if counter is not None:
        counter["clamp_events"] = counter.get("clamp_events", 0) + int(low.sum())
    return np.where(low, PROPENSITY_FLOOR, p_hat)


def pvdr(errors: ad.Tensor, o: np.ndarray, p_hat: np.ndarray, lam: float) -> Optional[ad.Tensor]:
    """PVDR loss over a batch; ``None`` when undefined (no clicks and lam=0)."""
    o = np.asarray(o, dtype=np.float64).reshape(errors.shape)
    w = o / np.asarray(p_hat, dtype=np.float64).reshape(errors.shape)
    denom = lam * o.size + (1.0 - lam) * w.sum()
    if denom <= 0.0:
        return None
    return ad.sum_(errors * w) * (1.0 / denom)


def naive(errors: ad.Tensor, o: np.ndarray) -> Optional[ad.Tensor]:
    o = np.asarray(o, dtype=np.float64).reshape(errors.shape)
    n_obs = o.sum()
    if n_obs == 0:
        return None
    return ad.sum_(errors * o) * (1.0 / n_obs)


def dr(errors: ad.Tensor, e_hat: np.ndarray, o: np.ndarray, p_hat: np.ndarray) -> ad.Tensor:
    o = np.asarray(o, dtype=np.float64).reshape(errors.shape)
    e_hat = np.asarray(e_hat, dtype=np.float64).reshape(errors.shape)
    w = o / np.asarray(p_hat, dtype=np.float64).reshape(errors.shape)
    return ad.mean(e_hat + (errors - e_hat) * w)


def steady_state_residual(p_hat: ad.Tensor, o: np.ndarray, e_hat, lam: float) -> ad.Tensor:
    """Differentiable ``lam + (1-lam)*A - B`` in both ``p_hat`` and ``e_hat``."""
    o = np.asarray(o, dtype=np.float64).reshape(p_hat.shape)
    inv = o / ad.clamp(p_hat, PROPENSITY_FLOOR, 1.0)
    a = ad.mean(inv)
    e_hat = ad.as_tensor(e_hat)
    b = ad.sum_(inv * e_hat) / ad.sum_(e_hat)
    return lam + (1.0 - lam) * a - b


def imputation_fit(e_hat: ad.Tensor, errors: np.ndarray, o: np.ndarray, p_hat: np.ndarray) -> ad.Tensor:
    o = np.asarray(o, dtype=np.float64).reshape(e_hat.shape)
    target = np.where(o == 1, np.nan_to_num(np.asarray(errors, dtype=np.float64).reshape(e_hat.shape)), 0.0)
    w = o / np.asarray(p_hat, dtype=np.float64).reshape(e_hat.shape)
    return ad.sum_(ad.square(e_hat - target) * w) * (1.0 / o.size)


def mmd2(x: ad.Tensor, y: ad.Tensor, kernel: KernelSpec = KernelSpec()) -> ad.Tensor:
    """V-statistic MMD^2; the median-heuristic bandwidth is treated as a constant."""
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("mmd2 needs two non-empty sample sets")
    if kernel.kind == "linear":
        diff = ad.mean(x, axis=0) - ad.mean(y, axis=0)
        return ad.sum_(diff * diff)
    if kernel.bandwidth == "median":
        sigma = median_bandwidth(x.data, y.data)
    else:
        sigma = float(kernel.bandwidth)
    scale = -1.0 / (2.0 * sigma * sigma)
    kxx = ad.mean(ad.exp(ad.sq_distances(x, x) * scale))
    kyy = ad.mean(ad.exp(ad.sq_distances(y, y) * scale))
    kxy = ad.mean(ad.exp(ad.sq_distances(x, y) * scale))
    return kxx + kyy - 2.0 * kxy
