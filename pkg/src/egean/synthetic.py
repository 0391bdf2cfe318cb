"""Ground-truth MNAR worlds, exact expectations over click patterns, and
Monte-Carlo bias/variance studies.

Each pair (u, i) carries standard-normal covariates ``x = [x_u, x_i]``.
Conversion probability is ``q = sigmoid(cvr_params . x + cvr_bias)``; click
propensity is ``p = clip(sigmoid((propensity_params + s * cvr_params) . x +
propensity_bias), min_propensity, 1)`` where ``s`` is the shift strength.
With the default parameter layout the propensity and conversion weights sit
on disjoint coordinates, so ``s = 0`` gives independent ``p`` and ``q``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .estimators import EstimatorBatch, ce_delta

MAX_ENUMERATION_PAIRS = 20
ESTIMATORS = ("naive", "pvdr", "dr")
Z95 = NormalDist().inv_cdf(0.975)


class EnumerationSizeError(ValueError):
    """Exhaustive enumeration requested on a world that is too large."""


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))


@dataclass(frozen=True)
class WorldSpec:
    n_pairs: int = 10_000
    feature_dim: int = 4
    propensity_params: Optional[Tuple[float, ...]] = None
    cvr_params: Optional[Tuple[float, ...]] = None
    shift_strength: float = 1.0
    min_propensity: float = 0.01
    propensity_bias: float = -1.0
    cvr_bias: float = -1.0
    n_users: int = 200
    n_items: int = 200
    exposure_affinity: float = 1.0
    n_bins: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be positive")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2 (one user and one item coordinate)")
        if not 0.0 < self.min_propensity < 1.0:
            raise ValueError("min_propensity must lie in (0, 1)")
        if self.shift_strength < 0.0:
            raise ValueError("shift_strength must be non-negative")
        for name in ("propensity_params", "cvr_params"):
            val = getattr(self, name)
            if val is not None and len(val) != self.feature_dim:
                raise ValueError(f"{name} must have length feature_dim={self.feature_dim}")

    @property
    def user_dim(self) -> int:
        return self.feature_dim // 2

    def resolved_params(self) -> Tuple[np.ndarray, np.ndarray]:
        """Propensity and conversion weight vectors.

        Defaults put conversion weight on even offsets of the user and item
        blocks and propensity weight on odd offsets.
        """
        du = self.user_dim
        offsets = np.concatenate([np.arange(du), np.arange(self.feature_dim - du)])
        cvr = np.where(offsets % 2 == 0, 1.0, 0.0)
        prop = np.where(offsets % 2 == 1, 1.0, 0.0)
        if self.cvr_params is not None:
            cvr = np.asarray(self.cvr_params, dtype=np.float64)
        if self.propensity_params is not None:
            prop = np.asarray(self.propensity_params, dtype=np.float64)
        return prop, cvr


@dataclass
class SyntheticWorld:
    spec: WorldSpec
    user: np.ndarray
    item: np.ndarray
    features: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __len__(self) -> int:
        return self.p.shape[0]

    def codes(self) -> Tuple[List[str], np.ndarray, Dict[str, int], Dict[str, str]]:
        """Integer-coded categorical view: ids plus quantile-binned covariates.

        Returns field names, an ``(n, fields)`` code matrix, vocabulary sizes
        and the user/item side of every field.
        """
        spec = self.spec
        edges = [NormalDist().inv_cdf(k / spec.n_bins) for k in range(1, spec.n_bins)]
        binned = np.digitize(self.features, edges)
        du = spec.user_dim
        names = ["user_id", "item_id"]
        names += [f"u_f{k}" for k in range(du)]
        names += [f"i_f{k}" for k in range(spec.feature_dim - du)]
        codes = np.column_stack([self.user, self.item, binned]).astype(np.int64)
        vocab = {"user_id": spec.n_users, "item_id": spec.n_items}
        vocab.update({n: spec.n_bins for n in names[2:]})
        sides = {n: ("user" if n == "user_id" or n.startswith("u_") else "item") for n in names}
        return names, codes, vocab, sides

    def expected_errors(self, r_hat: np.ndarray) -> np.ndarray:
        """Error of ``r_hat`` averaged over the conversion label ``r ~ Bernoulli(q)``."""
        return self.q * ce_delta(1.0, r_hat) + (1.0 - self.q) * ce_delta(0.0, r_hat)


def generate_world(spec: WorldSpec) -> SyntheticWorld:
    rng = np.random.default_rng([spec.seed, 0x57A7])
    du = spec.user_dim
    user_x = rng.standard_normal((spec.n_users, du))
    item_x = rng.standard_normal((spec.n_items, spec.feature_dim - du))
    users = rng.integers(0, spec.n_users, size=spec.n_pairs)
    # exposures favour items whose leading covariate agrees with the user's
    logits = spec.exposure_affinity * np.outer(user_x[:, 0], item_x[:, 0])
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    u01 = rng.random(spec.n_pairs)
    items = (u01[:, None] > cdf[users]).sum(axis=1)
    items = np.minimum(items, spec.n_items - 1)
    x = np.column_stack([user_x[users], item_x[items]])
    prop, cvr = spec.resolved_params()
    p = _sigmoid(x @ (prop + spec.shift_strength * cvr) + spec.propensity_bias)
    p = np.clip(p, spec.min_propensity, 1.0)
    q = _sigmoid(x @ cvr + spec.cvr_bias)
    return SyntheticWorld(spec=spec, user=users, item=items, features=x, p=p, q=q)


@dataclass
class Observations:
    o: np.ndarray
    r: np.ndarray

    def oracle(self, p_hat, r_hat, e_hat=None) -> EstimatorBatch:
        return EstimatorBatch(o=self.o, p_hat=p_hat, r=self.r, r_hat=r_hat, e_hat=e_hat)

    def masked(self, p_hat, r_hat, e_hat=None) -> EstimatorBatch:
        r = np.where(self.o == 1, self.r, np.nan)
        return EstimatorBatch(o=self.o, p_hat=p_hat, r=r, r_hat=r_hat, e_hat=e_hat)


def sample_observations(world: SyntheticWorld, seed: int) -> Observations:
    rng = np.random.default_rng([seed, 0x0B5])
    o = (rng.random(len(world)) < world.p).astype(np.float64)
    r = (rng.random(len(world)) < world.q).astype(np.float64)
    return Observations(o=o, r=r)


# ---------------------------------------------------------------------------
# estimator evaluation over many click patterns at once


def _estimate(estimator: str, o: np.ndarray, e: np.ndarray, p_hat: np.ndarray,
              e_hat: Optional[np.ndarray], lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised estimator values for pattern rows ``o`` (shape ``(m, n)``).

    Returns ``(values, defined)``; undefined entries hold 0.
    """
    n = o.shape[1]
    if estimator == "naive":
        n_obs = o.sum(axis=1)
        defined = n_obs > 0
        val = np.where(defined, (o * e).sum(axis=1) / np.where(defined, n_obs, 1.0), 0.0)
    elif estimator == "pvdr":
        w = o / p_hat
        denom = lam * n + (1.0 - lam) * w.sum(axis=1)
        defined = denom > 0
        val = np.where(defined, (w * e).sum(axis=1) / np.where(defined, denom, 1.0), 0.0)
    elif estimator == "dr":
        if e_hat is None:
            raise ValueError("dr estimator needs e_hat")
        val = (e_hat + o * (e - e_hat) / p_hat).mean(axis=1)
        defined = np.ones(o.shape[0], dtype=bool)
    else:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    return val, defined


@dataclass
class ExactResult:
    estimator: str
    lam: float
    expectation: float
    variance: float
    ideal: float
    excluded_mass: float
    total_mass: float

    @property
    def bias(self) -> float:
        return self.expectation - self.ideal


def exact_expected_loss(world: SyntheticWorld, r_hat, lam: float = 1.0, estimator: str = "pvdr",
                        e_hat=None, p_hat=None, r=None, chunk: int = 1 << 14) -> ExactResult:
    """Expectation of an estimator over all ``2^n`` click patterns.

    With ``r`` given the expectation is conditional on those labels.  Without
    it, labels are marginalised: every estimator is linear in the per-pair
    error and ``r`` is independent of ``o`` given the covariates, so this
    amounts to replacing ``e`` with its expectation under ``q``.
    Patterns on which the estimator is undefined are dropped and the rest
    renormalised; the dropped mass is reported.
    """
    n = len(world)
    if n > MAX_ENUMERATION_PAIRS:
        raise EnumerationSizeError(
            f"exact enumeration supports at most {MAX_ENUMERATION_PAIRS} pairs, world has {n}")
    r_hat = np.broadcast_to(np.asarray(r_hat, dtype=np.float64), (n,))
    p_hat = world.p if p_hat is None else np.asarray(p_hat, dtype=np.float64)
    e = world.expected_errors(r_hat) if r is None else ce_delta(np.asarray(r, float), r_hat)
    e_hat = None if e_hat is None else np.asarray(e_hat, dtype=np.float64)
    ideal = float(np.mean(e))
    with np.errstate(divide="ignore"):
        log_p, log_1mp = np.log(world.p), np.log1p(-world.p)
    bits = 1 << np.arange(n)
    total = first = second = excluded = 0.0
    for start in range(0, 1 << n, chunk):
        idx = np.arange(start, min(start + chunk, 1 << n))
        o = ((idx[:, None] & bits) > 0).astype(np.float64)
        # p == 1 has log1p(-p) = -inf; 0 * -inf must stay 0
        with np.errstate(invalid="ignore"):
            logw = np.where(o == 1, log_p, 0.0) + np.where(o == 0, log_1mp, 0.0)
        prob = np.exp(logw.sum(axis=1))
        val, defined = _estimate(estimator, o, e, p_hat, e_hat, lam)
        total += prob.sum()
        excluded += prob[~defined].sum()
        pd = np.where(defined, prob, 0.0)
        first += (pd * val).sum()
        second += (pd * val * val).sum()
    kept = total - excluded
    expectation = first / kept
    variance = max(second / kept - expectation ** 2, 0.0)
    return ExactResult(estimator, float(lam), float(expectation), float(variance), ideal,
                       float(excluded), float(total))


def pattern_probabilities(world: SyntheticWorld) -> np.ndarray:
    """Probability of every click pattern, indexed by its bit encoding."""
    n = len(world)
    if n > MAX_ENUMERATION_PAIRS:
        raise EnumerationSizeError(f"world has {n} pairs; limit is {MAX_ENUMERATION_PAIRS}")
    probs = np.ones(1)
    # appending pair k doubles the table with pair k as the new high bit
    for p in world.p:
        probs = np.concatenate([probs * (1.0 - p), probs * p])
    return probs


@dataclass
class ReplicateStats:
    estimator: str
    lam: float
    mean: float
    bias: float
    variance: float
    replicates: int
    ci_halfwidth: float
    variance_ci_halfwidth: float
    undefined: int = 0
    clamp_events: int = 0

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.replicates)


def _replicate_seeds(master_seed: int, replicates: int) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence(master_seed).spawn(replicates)


def monte_carlo_stats(world: SyntheticWorld, estimator: str, lambdas: Sequence[float],
                      replicates: int, seed: int, r_hat=None, e_hat=None, p_hat=None,
                      r=None) -> List[ReplicateStats]:
    """Bias and variance of an estimator across independent click draws.

    Every replicate draws its clicks (and labels, unless ``r`` is fixed)
    from its own child seed of ``seed``; the same draws are reused for every
    value in ``lambdas``.  Bias is measured against the ground-truth ideal
    loss: the mean expected error under ``q``, or the mean realised error
    when ``r`` is fixed.
    """
    if replicates < 100:
        raise ValueError("monte_carlo_stats needs at least 100 replicates")
    n = len(world)
    r_hat = np.broadcast_to(np.asarray(0.5 if r_hat is None else r_hat, dtype=np.float64), (n,))
    p_hat = world.p if p_hat is None else np.asarray(p_hat, dtype=np.float64)
    clamp_events = int((p_hat < 1e-6).sum())
    p_hat = np.maximum(p_hat, 1e-6)
    e_hat = None if e_hat is None else np.asarray(e_hat, dtype=np.float64)
    if r is None:
        ideal = float(world.expected_errors(r_hat).mean())
    else:
        ideal = float(ce_delta(np.asarray(r, float), r_hat).mean())
    err1, err0 = ce_delta(1.0, r_hat), ce_delta(0.0, r_hat)
    o = np.empty((replicates, n))
    e = np.empty((replicates, n))
    for k, ss in enumerate(_replicate_seeds(seed, replicates)):
        rng = np.random.default_rng(ss)
        o[k] = rng.random(n) < world.p
        rr = (rng.random(n) < world.q) if r is None else np.asarray(r, bool)
        e[k] = np.where(rr, err1, err0)
    out = []
    for lam in lambdas:
        val, defined = _estimate(estimator, o, e, p_hat, e_hat, float(lam))
        v = val[defined]
        m = v.size
        mu = float(v.mean())
        var = float(v.var(ddof=1))
        m4 = float(((v - mu) ** 4).mean())
        # normal approximation to the sampling variance of s^2
        var_se = math.sqrt(max(m4 - var * var * (m - 3) / (m - 1), 0.0) / m)
        out.append(ReplicateStats(estimator=estimator, lam=float(lam), mean=mu, bias=mu - ideal,
                                  variance=var, replicates=m,
                                  ci_halfwidth=Z95 * math.sqrt(var / m),
                                  variance_ci_halfwidth=Z95 * var_se,
                                  undefined=int((~defined).sum()), clamp_events=clamp_events))
    return out


# bias/variance hold the Monte-Carlo figures when present, else the exact ones
STATS_COLUMNS = ["estimator", "lambda", "bias", "variance", "ci_halfwidth", "replicates",
                 "clamp_events", "exact_bias", "exact_variance", "excluded_mass"]


def write_stats_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=STATS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()
                             if k in STATS_COLUMNS})
