import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egean import autodiff as ad
from egean import losses
from egean.estimators import (EstimatorBatch, KernelSpec, UndefinedEstimatorError, ce_delta, dr_loss,
                              ideal_loss, imputation_mean, imputation_training_loss, mmd2, naive_loss,
                              pvdr_loss, steady_state_residual, steady_state_terms)
from constructions import random_batch, steady_state_instance

NAN = np.nan


@pytest.fixture
def worked():
    """The four-pair worked example: two clicks, errors 0.2 and 0.4."""
    return EstimatorBatch(o=np.array([1, 0, 1, 0]), p_hat=np.array([0.5, 0.5, 0.25, 0.5]),
                          e=np.array([0.2, NAN, 0.4, NAN]), e_hat=np.array([0.2, 0.1, 0.4, 0.3]))


def test_ce_delta_examples():
    assert ce_delta(1, 0.5) == pytest.approx(math.log(2))
    assert ce_delta(1, 1.0) == pytest.approx(0.0, abs=1e-11)
    assert ce_delta(0, 0.9) == pytest.approx(-math.log(0.1))
    assert np.isfinite(ce_delta(1, 0.0))


def test_ideal_loss_examples():
    q = np.array([0.1, 0.4, 0.7, 0.9])
    r = np.array([0, 1, 1, 0])
    b = EstimatorBatch(o=np.ones(4), p_hat=np.ones(4), r=r, r_hat=q)
    hand = (-math.log(0.9) - math.log(0.4) - math.log(0.7) - math.log(0.1)) / 4
    assert ideal_loss(b) == pytest.approx(hand, abs=1e-15)
    single = EstimatorBatch(o=[1], p_hat=[1.0], r=[1], r_hat=[0.3])
    assert ideal_loss(single) == ce_delta(1, 0.3)
    perm = EstimatorBatch(o=np.ones(4), p_hat=np.ones(4), r=r[::-1], r_hat=q[::-1])
    assert ideal_loss(perm) == pytest.approx(ideal_loss(b), abs=1e-15)


def test_ideal_loss_needs_full_labels(worked):
    with pytest.raises(ValueError):
        ideal_loss(worked)


def test_naive_examples(worked):
    assert naive_loss(worked) == pytest.approx(0.3)
    full = EstimatorBatch(o=np.ones(3), p_hat=np.ones(3), e=np.array([0.1, 0.2, 0.6]))
    assert naive_loss(full) == pytest.approx(ideal_loss(full))
    with pytest.raises(UndefinedEstimatorError):
        naive_loss(EstimatorBatch(o=np.zeros(3), p_hat=np.ones(3), e=np.full(3, NAN)))


def test_pvdr_worked_examples(worked):
    assert pvdr_loss(worked, 1.0) == pytest.approx(0.5, abs=1e-15)
    assert pvdr_loss(worked, 0.0) == pytest.approx(1 / 3, abs=1e-15)
    assert pvdr_loss(worked, 0.5) == pytest.approx(0.4, abs=1e-15)


def test_pvdr_undefined_and_lambda_range():
    empty = EstimatorBatch(o=np.zeros(3), p_hat=np.ones(3), e=np.full(3, NAN))
    with pytest.raises(UndefinedEstimatorError):
        pvdr_loss(empty, 0.0)
    assert pvdr_loss(empty, 0.5) == 0.0
    with pytest.raises(ValueError):
        pvdr_loss(empty, 1.5)


def test_steady_state_examples(worked):
    a, b = steady_state_terms(worked)
    assert (a, b) == (pytest.approx(1.5), pytest.approx(2.0))
    assert steady_state_residual(worked, 0.5) == pytest.approx(-0.75)
    full = EstimatorBatch(o=np.ones(4), p_hat=np.ones(4), e_hat=np.array([0.3, 0.1, 0.2, 0.5]))
    for lam in (0.0, 0.3, 1.0):
        assert steady_state_residual(full, lam) == pytest.approx(0.0, abs=1e-15)
    zero = EstimatorBatch(o=np.ones(2), p_hat=np.ones(2), e_hat=np.zeros(2))
    with pytest.raises(UndefinedEstimatorError):
        steady_state_residual(zero, 0.5)


def test_dr_examples(worked):
    rng = np.random.default_rng(1)
    e = rng.uniform(0, 1, 6)
    o = np.array([1, 0, 1, 1, 0, 0])
    exact = EstimatorBatch(o=o, p_hat=rng.uniform(0.1, 1, 6), e=e, e_hat=e)
    assert dr_loss(exact) == pytest.approx(ideal_loss(exact), abs=1e-15)
    zero = EstimatorBatch(o=worked.o, p_hat=worked.p_hat, e=worked.e, e_hat=np.zeros(4))
    assert dr_loss(zero) == pytest.approx(pvdr_loss(zero, 1.0), abs=1e-15)


def test_imputation_examples(worked):
    assert imputation_mean(worked) == pytest.approx(0.25)
    assert imputation_mean(EstimatorBatch(o=np.ones(2), p_hat=np.ones(2), e_hat=np.zeros(2))) == 0.0
    assert imputation_training_loss(worked) == 0.0
    one = EstimatorBatch(o=[1, 0, 0, 0], p_hat=[0.5, 1, 1, 1], e=[0.3, NAN, NAN, NAN],
                         e_hat=[0.4, 0, 0, 0])
    assert imputation_training_loss(one) == pytest.approx(0.005)
    doubled = EstimatorBatch(o=one.o, p_hat=[1.0, 1, 1, 1], e=one.e, e_hat=one.e_hat)
    assert imputation_training_loss(doubled) == pytest.approx(0.0025)
    none = EstimatorBatch(o=np.zeros(2), p_hat=np.ones(2), e=np.full(2, NAN), e_hat=np.ones(2))
    assert imputation_training_loss(none) == 0.0


def test_propensity_floor_counted():
    b = EstimatorBatch(o=[1, 1], p_hat=[0.0, 1e-9], e=[0.1, 0.2])
    assert b.clamp_events == 2
    assert np.all(b.p_hat == 1e-6)


def test_batch_invariants():
    with pytest.raises(ValueError):
        EstimatorBatch(o=[], p_hat=[])
    with pytest.raises(ValueError):
        EstimatorBatch(o=[1, 0], p_hat=[0.5])
    with pytest.raises(ValueError):
        EstimatorBatch(o=[1, 0], p_hat=[0.5, 0.5], e=[NAN, 0.1])


def test_masked_label_access():
    b = EstimatorBatch(o=[1, 0], p_hat=[0.5, 0.5], r=[1, NAN], r_hat=[0.4, 0.4])
    assert b.observed_label(0) == 1.0
    assert b.observed_label(1) is None


def test_mmd_examples():
    x = np.random.default_rng(0).standard_normal((7, 3))
    assert mmd2(x, x) == pytest.approx(0.0, abs=1e-12)
    lin = KernelSpec("linear")
    assert mmd2([[0, 0], [2, 0]], [[1, 1]], lin) == pytest.approx(1.0, abs=1e-12)
    a, b = np.array([[0.3, -1.0]]), np.array([[1.2, 0.5]])
    sigma = 0.8
    d2 = ((a - b) ** 2).sum()
    assert mmd2(a, b, KernelSpec("rbf", sigma)) == pytest.approx(2 - 2 * math.exp(-d2 / (2 * sigma ** 2)),
                                                                abs=1e-12)
    with pytest.raises(ValueError):
        mmd2(np.zeros((0, 2)), x[:, :2])
    with pytest.raises(ValueError):
        mmd2(x, x[:, :2])
    with pytest.raises(ValueError):
        KernelSpec("rbf", -1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
def test_mmd_symmetric_nonnegative(seed, n, m):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((n, 3)), rng.standard_normal((m, 3)) + 0.5
    for k in (KernelSpec(), KernelSpec("linear"), KernelSpec("rbf", 0.7)):
        v = mmd2(x, y, k)
        assert v >= 0
        assert v == pytest.approx(mmd2(y, x, k), abs=1e-12)


def test_tensor_losses_match_numpy():
    rng = np.random.default_rng(5)
    for _ in range(20):
        b = random_batch(rng)
        b.e_hat = rng.uniform(0.05, 1.0, len(b))
        e = np.nan_to_num(b.e)
        lam = float(rng.random())
        t = ad.Tensor(e)
        assert losses.pvdr(t, b.o, b.p_hat, lam).item() == pytest.approx(pvdr_loss(b, lam), abs=1e-12)
        assert losses.naive(t, b.o).item() == pytest.approx(naive_loss(b), abs=1e-12)
        assert losses.dr(t, b.e_hat, b.o, b.p_hat).item() == pytest.approx(dr_loss(b), abs=1e-12)
        res = losses.steady_state_residual(ad.Tensor(b.p_hat), b.o, b.e_hat, lam).item()
        assert res == pytest.approx(steady_state_residual(b, lam), abs=1e-12)
        fit = losses.imputation_fit(ad.Tensor(b.e_hat), e, b.o, b.p_hat).item()
        assert fit == pytest.approx(imputation_training_loss(b), abs=1e-12)
    x, y = rng.standard_normal((6, 4)), rng.standard_normal((9, 4))
    for k in (KernelSpec(), KernelSpec("linear")):
        assert losses.mmd2(ad.Tensor(x), ad.Tensor(y), k).item() == pytest.approx(mmd2(x, y, k), abs=1e-12)


def test_degeneration_and_monotonicity():
    rng = np.random.default_rng(9)
    for _ in range(200):
        b = random_batch(rng)
        w = b.o / b.p_hat
        num = (w * np.nan_to_num(b.e)).sum()
        assert pvdr_loss(b, 1.0) == pytest.approx(num / len(b), abs=1e-12)
        assert pvdr_loss(b, 0.0) == pytest.approx(num / w.sum(), abs=1e-12)
        vals = [pvdr_loss(b, lam) for lam in np.linspace(0, 1, 6)]
        diffs = np.diff(vals)
        assert np.all(diffs >= -1e-12) or np.all(diffs <= 1e-12)


def test_exact_under_perfect_imputation():
    rng = np.random.default_rng(4)
    for _ in range(20):
        b, lam = steady_state_instance(rng)
        assert steady_state_residual(b, lam) == pytest.approx(0.0, abs=1e-12)
        assert pvdr_loss(b, lam) == pytest.approx(ideal_loss(b), abs=1e-12)
