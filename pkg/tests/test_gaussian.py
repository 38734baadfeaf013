import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldcvae import autodiff as ad
from ldcvae.autodiff import Tensor
from ldcvae.errors import DimensionMismatch
from ldcvae.gaussian import (
    LOG_VAR_CLAMP,
    DiagGaussian,
    NoiseSource,
    kl_between,
    kl_to_standard,
    poe_combine,
    reparameterize,
    wasserstein2_exact,
    wasserstein_align,
)
from ldcvae.oracles import grid_product_moments, grid_w2_squared, monte_carlo_kl


def g(mean, var):
    return DiagGaussian(np.atleast_1d(np.asarray(mean, float)), np.atleast_1d(np.asarray(var, float)))


def test_empty_product_returns_prior():
    prior = DiagGaussian.standard(3)
    out = poe_combine([], prior)
    assert np.array_equal(out.mean.data, np.zeros(3)) and np.array_equal(out.var.data, np.ones(3))


@pytest.mark.parametrize("means,variances,expected", [
    ([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], (0.0, 1 / 3)),
    ([0.0, 1.0], [1.0, 1.0], (0.5, 0.5)),
])
def test_poe_matches_grid_oracle(means, variances, expected):
    # expected values were read off the grid oracle before poe_combine existed
    gm, gv = grid_product_moments(means, variances)
    assert (gm, gv) == pytest.approx(expected, abs=1e-12)
    out = poe_combine([g(m, v) for m, v in zip(means[1:], variances[1:])], g(means[0], variances[0]))
    assert out.mean.item() == pytest.approx(gm, abs=1e-4)
    assert out.var.item() == pytest.approx(gv, abs=1e-4)


def test_poe_precision_additivity(rng):
    experts = [g(rng.normal(size=5), rng.uniform(0.1, 3, size=5)) for _ in range(3)]
    prior = g(rng.normal(size=5), rng.uniform(0.1, 3, size=5))
    out = poe_combine(experts, prior)
    expected = prior.precision.data + sum(e.precision.data for e in experts)
    assert np.allclose(1.0 / out.var.data, expected, atol=1e-12, rtol=0)


def test_single_expert_sharpens(rng):
    for _ in range(50):
        var = rng.uniform(0.05, 5, size=4)
        out = poe_combine([g(rng.normal(size=4), var)], DiagGaussian.standard(4))
        assert np.all(out.var.data < np.minimum(var, 1.0))


def test_poe_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        poe_combine([g([0.0, 1.0], [1.0, 1.0])], DiagGaussian.standard(3))


def test_poe_gradient(rng):
    def f(x):
        a = DiagGaussian.from_log_var(x[0], x[1])
        b = DiagGaussian.from_log_var(x[2], x[3])
        out = poe_combine([a, b], DiagGaussian.standard(3))
        return ad.sum_(ad.square(out.mean)) + ad.sum_(out.var * out.var)

    assert ad.finite_difference_check(f, rng.normal(size=(4, 3))) < 1e-5


def test_kl_to_standard_values():
    assert kl_to_standard(DiagGaussian.standard(4)).item() == 0.0
    assert kl_to_standard(g(1.0, 1.0)).item() == pytest.approx(0.5, abs=1e-15)


def test_kl_to_standard_matches_monte_carlo(rng):
    mean, var = rng.normal(size=3), rng.uniform(0.3, 2.0, size=3)
    est, se = monte_carlo_kl(mean, var, np.zeros(3), np.ones(3), 10**6, rng)
    assert abs(kl_to_standard(g(mean, var)).item() - est) < 3 * se


def test_kl_to_standard_per_row():
    q = DiagGaussian(np.array([[0.0, 0.0], [1.0, 0.0]]), np.ones((2, 2)))
    assert np.allclose(kl_to_standard(q, axis=-1).data, [0.0, 0.5])


def test_kl_between_values(rng):
    q = g(rng.normal(size=3), rng.uniform(0.2, 2, size=3))
    assert kl_between(q, q).item() == pytest.approx(0.0, abs=1e-14)
    value = kl_between(g(0.0, 1.0), g(0.0, 4.0)).item()
    assert value == pytest.approx(0.5 * (0.25 - 1 + math.log(4)), abs=1e-14)
    est, se = monte_carlo_kl([0.0], [1.0], [0.0], [4.0], 10**6, rng)
    assert abs(value - est) < 3 * se
    a, b = g(0.0, 1.0), g(1.0, 2.0)
    assert kl_between(a, b).item() != pytest.approx(kl_between(b, a).item(), abs=1e-6)


def test_kl_between_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        kl_between(g([0.0], [1.0]), DiagGaussian.standard(2))


def test_alignment_printed_form():
    a = g([1.0, 0.0], [1.0, 1.0])
    b = g([0.0, 0.0], [4.0, 1.0])
    assert wasserstein_align(a, b).item() == 10.0
    assert wasserstein_align(b, a).item() == 10.0
    assert wasserstein_align(a, a).item() == 0.0


def test_alignment_permutation_invariant(rng):
    a = g(rng.normal(size=6), rng.uniform(0.1, 2, size=6))
    b = g(rng.normal(size=6), rng.uniform(0.1, 2, size=6))
    p = rng.permutation(6)
    pa = g(a.mean.data[p], a.var.data[p])
    pb = g(b.mean.data[p], b.var.data[p])
    assert wasserstein_align(pa, pb).item() == pytest.approx(wasserstein_align(a, b).item(), abs=1e-12)


def test_exact_w2_values(rng):
    assert wasserstein2_exact(g(0.0, 1.0), g(0.0, 4.0)).item() == 1.0
    q = g(0.3, 0.7)
    assert wasserstein2_exact(q, q).item() == 0.0
    for _ in range(5):
        ma, mb = rng.normal(size=2)
        va, vb = rng.uniform(0.2, 3, size=2)
        grid = grid_w2_squared(ma, va, mb, vb)
        assert wasserstein2_exact(g(ma, va), g(mb, vb)).item() == pytest.approx(grid, abs=1e-2)


def test_alignment_gradients(rng):
    def make(fn):
        return lambda x: fn(DiagGaussian.from_log_var(x[0], x[1]), DiagGaussian.from_log_var(x[2], x[3]))

    for _ in range(5):
        x = rng.normal(size=(4, 5))
        assert ad.finite_difference_check(make(wasserstein_align), x) < 1e-4
        assert ad.finite_difference_check(make(wasserstein2_exact), x) < 1e-4


def test_divergences_nonnegative(rng):
    for _ in range(1000):
        a = g(rng.normal(size=3), rng.uniform(0.05, 4, size=3))
        b = g(rng.normal(size=3), rng.uniform(0.05, 4, size=3))
        for fn in (kl_between, wasserstein_align, wasserstein2_exact):
            assert fn(a, b).item() > 0
        assert kl_to_standard(a).item() >= 0


def test_log_variance_clamp():
    q = DiagGaussian.from_log_var(Tensor([0.0, 0.0, 0.0]), Tensor([-50.0, 0.0, 50.0]))
    lo, hi = LOG_VAR_CLAMP
    assert np.allclose(q.var.data, [math.exp(lo), 1.0, math.exp(hi)])
    assert np.all(q.var.data > 0)


def test_reparameterize_degenerate_variance():
    q = g([1.5, -2.0], [1e-30, 1e-30])
    assert np.allclose(reparameterize(q, NoiseSource(4)).data, [1.5, -2.0], atol=1e-10)


def test_reparameterize_deterministic_and_unbiased():
    q = g(np.full(10**5, 2.0), np.ones(10**5))
    a = reparameterize(q, NoiseSource(9)).data
    b = reparameterize(q, NoiseSource(9)).data
    assert np.array_equal(a, b)
    assert abs(a.mean() - 2.0) < 0.02


def test_reparameterize_gradient(rng):
    def f(x):
        return ad.sum_(ad.square(reparameterize(DiagGaussian.from_log_var(x[0], x[1]), NoiseSource(2))))

    assert ad.finite_difference_check(f, rng.normal(size=(2, 4))) < 1e-5


def test_noise_source_counter():
    a = NoiseSource(5)
    first, second = a.standard_normal(3), a.standard_normal(3)
    assert not np.array_equal(first, second)
    assert np.array_equal(NoiseSource(5, counter=1).standard_normal(3), second)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 5), st.floats(-3, 3), st.floats(0.1, 5))
def test_two_factor_product_closed_form(m1, v1, m2, v2):
    out = poe_combine([g(m1, v1)], g(m2, v2))
    var = 1 / (1 / v1 + 1 / v2)
    assert out.var.item() == pytest.approx(var, rel=1e-12)
    assert out.mean.item() == pytest.approx(var * (m1 / v1 + m2 / v2), rel=1e-9, abs=1e-12)
