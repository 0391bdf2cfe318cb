"""Loss estimators over the exposure space D and the click space O.

Every function here is a pure numpy computation on an :class:`EstimatorBatch`.
The differentiable counterparts used during training live in
:mod:`egean.losses`; the two are cross-checked in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

PROB_EPS = 1e-12
PROPENSITY_FLOOR = 1e-6


class UndefinedEstimatorError(ValueError):
    """The estimator has no value on this batch (e.g. an empty click set)."""


def ce_delta(r, r_hat):
    """Binary cross-entropy ``-r log r_hat - (1-r) log(1-r_hat)``.

    ``r_hat`` is clamped to ``[1e-12, 1-1e-12]`` first, so the result is
    always finite.
    """
    r = np.asarray(r, dtype=np.float64)
    r_hat = np.clip(np.asarray(r_hat, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    out = -r * np.log(r_hat) - (1.0 - r) * np.log1p(-r_hat)
    return float(out) if out.ndim == 0 else out


@dataclass
class EstimatorBatch:
    """Aligned per-pair vectors over a sample set D.

    ``r`` may hold NaN where the label is unobserved; ``e`` is derived from
    ``r`` and ``r_hat`` wherever ``r`` is known unless passed explicitly.
    Propensities below ``1e-6`` are floored and counted in ``clamp_events``.
    """

    o: np.ndarray
    p_hat: np.ndarray
    r: Optional[np.ndarray] = None
    r_hat: Optional[np.ndarray] = None
    e_hat: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None
    clamp_events: int = field(default=0)

    def __post_init__(self):
        self.o = np.asarray(self.o, dtype=np.float64)
        n = self.o.shape[0]
        if self.o.ndim != 1 or n == 0:
            raise ValueError("EstimatorBatch needs a non-empty 1-d observation vector")
        if not np.all((self.o == 0) | (self.o == 1)):
            raise ValueError("observation indicators must be 0 or 1")
        p = np.asarray(self.p_hat, dtype=np.float64)
        if p.shape != (n,):
            raise ValueError(f"p_hat has shape {p.shape}, expected ({n},)")
        low = p < PROPENSITY_FLOOR
        self.clamp_events += int(low.sum())
        self.p_hat = np.where(low, PROPENSITY_FLOOR, p)
        for name in ("r", "r_hat", "e_hat", "e"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=np.float64)
                if val.shape != (n,):
                    raise ValueError(f"{name} has shape {val.shape}, expected ({n},)")
                setattr(self, name, val)
        if self.e is None and self.r is not None and self.r_hat is not None:
            known = ~np.isnan(self.r)
            e = np.full(n, np.nan)
            e[known] = ce_delta(self.r[known], self.r_hat[known])
            self.e = e
        if self.e is not None and np.any(np.isnan(self.e[self.o == 1])):
            raise ValueError("realized error e must be defined on every clicked pair")

    def __len__(self) -> int:
        return self.o.shape[0]

    @property
    def n_clicked(self) -> int:
        return int(self.o.sum())

    def _clicked_e(self) -> np.ndarray:
        if self.e is None:
            raise ValueError("batch carries no realized errors")
        # unclicked entries may be NaN; zero them so products stay finite
        return np.where(self.o == 1, np.nan_to_num(self.e), 0.0)

    def observed_label(self, i: int) -> Optional[float]:
        """Conversion label of pair ``i`` or ``None`` when it is not observed."""
        if self.r is None or np.isnan(self.r[i]):
            return None
        return float(self.r[i])


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam


def ideal_loss(batch: EstimatorBatch) -> float:
    if batch.e is None or np.any(np.isnan(batch.e)):
        raise ValueError("ideal_loss needs the error on every pair of D")
    return float(batch.e.mean())


def naive_loss(batch: EstimatorBatch) -> float:
    n_obs = batch.n_clicked
    if n_obs == 0:
        raise UndefinedEstimatorError("naive estimator undefined on an empty click set")
    return float(batch._clicked_e().sum() / n_obs)


def pvdr_loss(batch: EstimatorBatch, lam: float) -> float:
    """Parameter-varying DR loss.

    ``sum(o*e/p) / (lam*|D| + (1-lam)*sum(o/p))``; at ``lam=1`` this is the
    IPS mean, at ``lam=0`` the self-normalised form.
    """
    lam = _check_lambda(lam)
    w = batch.o / batch.p_hat
    denom = lam * len(batch) + (1.0 - lam) * w.sum()
    if denom <= 0.0:
        raise UndefinedEstimatorError("PVDR undefined: empty click set with lambda=0")
    return float((w * batch._clicked_e()).sum() / denom)


def dr_loss(batch: EstimatorBatch) -> float:
    if batch.e_hat is None:
        raise ValueError("dr_loss needs imputed errors e_hat")
    correction = batch.o * (batch._clicked_e() - batch.e_hat) / batch.p_hat
    return float((batch.e_hat + correction).mean())


def steady_state_terms(batch: EstimatorBatch) -> tuple:
    """Return ``(A, B)``: mean inverse propensity and the imputed-error ratio."""
    if batch.e_hat is None:
        raise ValueError("steady-state condition needs imputed errors e_hat")
    total = batch.e_hat.sum()
    if total == 0.0:
        raise UndefinedEstimatorError("steady-state ratio undefined when sum(e_hat) = 0")
    w = batch.o / batch.p_hat
    return float(w.mean()), float((w * batch.e_hat).sum() / total)


def steady_state_residual(batch: EstimatorBatch, lam: float) -> float:
    """``lam + (1-lam)*A - B``; zero when the steady-state condition holds."""
    lam = _check_lambda(lam)
    a, b = steady_state_terms(batch)
    return lam + (1.0 - lam) * a - b


def imputation_mean(batch: EstimatorBatch) -> float:
    if batch.e_hat is None:
        raise ValueError("imputation_mean needs e_hat")
    return float(batch.e_hat.mean())


def imputation_training_loss(batch: EstimatorBatch) -> float:
    """Inverse-propensity weighted squared imputation error on clicked pairs, over |D|."""
    if batch.n_clicked == 0:
        return 0.0
    diff = np.where(batch.o == 1, batch.e_hat - batch._clicked_e(), 0.0)
    return float((diff ** 2 / batch.p_hat).sum() / len(batch))


# ---------------------------------------------------------------------------
# maximum mean discrepancy


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    bandwidth: Union[float, str] = "median"

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.bandwidth != "median" and not float(self.bandwidth) > 0.0:
            raise ValueError("fixed kernel bandwidth must be positive")


def _pairwise_sq(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d2 = (x * x).sum(axis=1)[:, None] + (y * y).sum(axis=1)[None, :] - 2.0 * (x @ y.T)
    return np.maximum(d2, 0.0)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median distance between distinct points of the pooled sample.

    Both triangles of the distance matrix are used; duplicating every pair
    leaves the median unchanged.  Coincident points are ignored.
    """
    pooled = np.concatenate([x, y], axis=0)
    d2 = _pairwise_sq(pooled, pooled)
    # the expanded diagonal carries rounding noise; drop it explicitly
    d2 = d2[~np.eye(pooled.shape[0], dtype=bool)]
    d2 = d2[d2 > 1e-12 * max(float(d2.max(initial=0.0)), 1.0)]
    return float(np.sqrt(np.median(d2))) if d2.size else 1.0


def mmd2(x, y, kernel: KernelSpec = KernelSpec()) -> float:
    """Biased (V-statistic) squared MMD between two sample sets."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("mmd2 needs two non-empty sample sets")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature width mismatch: {x.shape[1]} vs {y.shape[1]}")
    if kernel.kind == "linear":
        diff = x.mean(axis=0) - y.mean(axis=0)
        return float(diff @ diff)
    sigma = median_bandwidth(x, y) if kernel.bandwidth == "median" else float(kernel.bandwidth)
    scale = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-scale * _pairwise_sq(x, x)).mean()
    kyy = np.exp(-scale * _pairwise_sq(y, y)).mean()
    kxy = np.exp(-scale * _pairwise_sq(x, y)).mean()
    return float(max(kxx + kyy - 2.0 * kxy, 0.0))
