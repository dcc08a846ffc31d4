import math

import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cskgp.errors import DimensionMismatch, NonPositiveLengthscale, ValidationError
from cskgp.kernels import (
    KernelSpec,
    convolution_closed_form,
    convolution_oracle,
    csk_correlation,
    csk_kernel,
    gram,
    gsm_kernel,
    nsq_kernel,
    oracle_correlation,
    pairwise_terms,
    point_hyper,
    sample_via_convolution,
    sm_kernel,
)
from cskgp.latent import FunctionField, HyperFunctionField

lengthscales = st.floats(0.2, 5.0)
freqs = st.floats(-3.0, 3.0)
inputs = st.floats(-3.0, 3.0)


# --- correlation -------------------------------------------------------------


def test_correlation_on_diagonal_is_one():
    h = point_hyper(1.0, 0.7, 2.3)
    assert csk_correlation(h, h, [0.4], [0.4]) == 1.0


def test_correlation_unit_lag_zero_frequency():
    h = point_hyper(1.0, 1.0, 0.0)
    assert csk_correlation(h, h, [1.0], [0.0]) == pytest.approx(0.7788008, abs=1e-7)


def test_correlation_unit_lag_unit_frequency():
    h = point_hyper(1.0, 1.0, 1.0)
    assert csk_correlation(h, h, [1.0], [0.0]) == pytest.approx(0.4207879, abs=1e-7)


def test_pairwise_terms_on_diagonal():
    h = point_hyper(1.0, [0.5, 2.0], [1.0, -0.5])
    x = jnp.array([[0.3, -0.2]])
    t = pairwise_terms(x, h, x, h)
    assert float(t.sigma_ij[0, 0, 0]) == pytest.approx(1.0, abs=1e-15)
    assert float(t.Q[0, 0, 0]) == 0.0 and float(t.S[0, 0, 0]) == 0.0
    np.testing.assert_allclose(np.asarray(t.omega[0, 0, 0]), np.array([1.0, -0.5]) / np.array([0.25, 4.0]))


@settings(max_examples=60, deadline=None)
@given(li=lengthscales, lj=lengthscales, mi=freqs, mj=freqs, xi=inputs, xj=inputs)
def test_correlation_bounded_and_symmetric(li, lj, mi, mj, xi, xj):
    hi, hj = point_hyper(1.0, li, mi), point_hyper(1.0, lj, mj)
    r = csk_correlation(hi, hj, [xi], [xj])
    assert abs(r) <= 1.0 + 1e-15
    assert r == csk_correlation(hj, hi, [xj], [xi])


def test_nonpositive_lengthscale_rejected():
    with pytest.raises(NonPositiveLengthscale):
        csk_correlation(point_hyper(1, 0.0, 0), point_hyper(1, 1.0, 0), [0.0], [1.0])
    with pytest.raises(NonPositiveLengthscale):
        KernelSpec.se([-1.0])


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        csk_correlation(point_hyper(1, [1.0, 1.0], 0), point_hyper(1, [1.0, 1.0], 0), [0.0], [1.0])


# --- NSQ -------------------------------------------------------------------------


@given(ell=lengthscales, tau=st.floats(-4, 4))
def test_nsq_constant_lengthscale_is_se(ell, tau):
    h = point_hyper(1.0, ell, 0.0)
    assert nsq_kernel(h, h, [tau], [0.0]) == pytest.approx(math.exp(-tau**2 / (4 * ell**2)), rel=1e-14, abs=1e-300)


def test_nsq_unequal_lengthscales_value():
    # sqrt(2 l_i l_j / (l_i^2 + l_j^2)) * exp(-tau^2 / (2 (l_i^2 + l_j^2))) with l = 1, 2, tau = 1
    v = nsq_kernel(point_hyper(1, 1.0, 0), point_hyper(1, 2.0, 0), [1.0], [0.0])
    assert v == pytest.approx(0.8093112, abs=1e-7)
    assert v == pytest.approx(math.sqrt(4 / 5) * math.exp(-0.1), rel=1e-14)


def test_nsq_equals_zero_frequency_csk_on_random_pairs(rng):
    for _ in range(100):
        hi = point_hyper(1.0, rng.uniform(0.2, 5, 2), 0.0)
        hj = point_hyper(1.0, rng.uniform(0.2, 5, 2), 0.0)
        xi, xj = rng.uniform(-3, 3, 2), rng.uniform(-3, 3, 2)
        assert abs(nsq_kernel(hi, hj, xi, xj) - csk_correlation(hi, hj, xi, xj)) <= 1e-14


# --- SM / GSM / CSK sums -------------------------------------------------------------


def test_sm_zero_frequency_is_se():
    spec = KernelSpec.sm([1.0], [[0.8]], [[0.0]])
    assert sm_kernel(spec, [0.5], [0.0]) == pytest.approx(math.exp(-0.5 * 0.25 / 0.64), rel=1e-14)


def test_sm_at_zero_lag_sums_weights():
    spec = KernelSpec.sm([0.3, 1.2], [[0.5], [2.0]], [[1.0], [-2.0]])
    assert sm_kernel(spec, [0.7], [0.7]) == pytest.approx(1.5, rel=1e-14)


def test_sm_half_period_value():
    spec = KernelSpec.sm([2.5], [[1.0]], [[math.pi]])
    assert sm_kernel(spec, [1.0], [0.0]) == pytest.approx(-0.606531 * 2.5, rel=1e-6)


def test_gsm_constant_fields_are_sm_form():
    hi = point_hyper(1.0, 0.9, 1.7)
    tau = 0.6
    expect = math.exp(-0.5 * tau**2 / (2 * 0.81)) * math.cos(1.7 * tau)
    assert gsm_kernel(hi, hi, [1.1 + tau], [1.1]) == pytest.approx(expect, rel=1e-13)


def test_gsm_on_diagonal():
    h = point_hyper(1.0, 0.4, 3.0)
    assert gsm_kernel(h, h, [0.9], [0.9]) == 1.0


def test_gsm_linear_frequency_phase():
    # mu(x) = 2x at x_i = 1 and x_j = 0.5 gives phase 2*1 - 1*0.5 = 1.5
    v = gsm_kernel(point_hyper(1, 1.0, 2.0), point_hyper(1, 1.0, 1.0), [1.0], [0.5])
    assert v == pytest.approx(math.exp(-0.0625) * math.cos(1.5), rel=1e-13)
    assert v == pytest.approx(0.06645145, abs=1e-8)


def _csk_function_field(sigma=None):
    return FunctionField(ell=lambda X: (0.6 + 0.2 * jnp.sin(X[:, 0]))[:, None, None],
                         mu=lambda X: (1.0 + 0.5 * X[:, 0])[:, None, None], sigma=sigma)


def test_single_component_csk_kernel_is_correlation():
    spec = KernelSpec("CSK", 1, field=_csk_function_field())
    X = jnp.array([[0.2], [-0.7]])
    hv = spec.values(X)
    hi, hj = hv.take(slice(0, 1)), hv.take(slice(1, 2))
    assert csk_kernel(spec, [0.2], [-0.7]) == pytest.approx(csk_correlation(hi, hj, [0.2], [-0.7]), rel=1e-14)


def test_csk_diagonal_is_sum_of_squared_amplitudes():
    sig = lambda X: jnp.stack([1.0 + 0.1 * X[:, 0], 0.5 * jnp.ones(X.shape[0])], axis=1)
    f = FunctionField(ell=lambda X: jnp.full((X.shape[0], 2, 1), 0.7),
                      mu=lambda X: jnp.full((X.shape[0], 2, 1), 0.3), sigma=sig)
    spec = KernelSpec("CSK", 2, field=f)
    assert csk_kernel(spec, [2.0], [2.0]) == pytest.approx(1.2**2 + 0.25, rel=1e-14)


def test_csk_components_add():
    on_left = lambda X: (X[:, 0] < 0).astype(jnp.float64)
    sig2 = lambda X: jnp.stack([on_left(X), 1.0 - on_left(X)], axis=1)
    ell2 = lambda X: jnp.stack([0.5 * jnp.ones(X.shape[0]), 1.5 * jnp.ones(X.shape[0])], axis=1)[:, :, None]
    mu2 = lambda X: jnp.stack([2.0 * jnp.ones(X.shape[0]), -1.0 * jnp.ones(X.shape[0])], axis=1)[:, :, None]
    both = KernelSpec("CSK", 2, field=FunctionField(ell2, mu2, sig2))
    parts = [KernelSpec("CSK", 1, field=FunctionField(lambda X, p=p: ell2(X)[:, p:p + 1],
                                                      lambda X, p=p: mu2(X)[:, p:p + 1],
                                                      lambda X, p=p: sig2(X)[:, p:p + 1]))
             for p in range(2)]
    X = np.linspace(-2, 2, 9)[:, None]
    np.testing.assert_allclose(gram(both, X), gram(parts[0], X) + gram(parts[1], X), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(ell=st.lists(lengthscales, min_size=2, max_size=2), mu=st.lists(freqs, min_size=2, max_size=2),
       tau=st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_constant_field_csk_is_stationary_sm_form(ell, mu, tau):
    ell, mu, tau = np.array(ell), np.array(mu), np.array(tau)
    h = point_hyper(1.0, ell, mu)
    x0 = np.array([0.3, -0.4])
    S = ell**2
    expect = math.exp(-0.5 * np.sum(tau**2 / (2 * S))) * math.cos(np.sum(mu / S * tau))
    assert abs(csk_correlation(h, h, x0 + tau, x0) - expect) <= 1e-14


# --- Gram ------------------------------------------------------------------------------


def _random_field(family, P, D, rng, M=8):
    f = HyperFunctionField.default(family, P, rng.uniform(-2, 2, (M, D)), medians={"mu": 1.0})
    f.v = rng.normal(size=f.v.shape)
    return f


def test_gram_of_one_row():
    spec = KernelSpec.se([0.5], 2.0)
    K = gram(spec, [[0.1]])
    assert K.shape == (1, 1) and K[0, 0] == pytest.approx(4.0)


@pytest.mark.parametrize("family", ["NSQ", "GSM", "CSK"])
def test_gram_exactly_symmetric_and_permutation_equivariant(family, rng):
    spec = KernelSpec(family, 1, field=_random_field(family, 1, 2, rng))
    X = rng.uniform(-2, 2, (25, 2))
    K = gram(spec, X)
    np.testing.assert_array_equal(K, K.T)
    perm = rng.permutation(25)
    np.testing.assert_allclose(gram(spec, X[perm]), K[np.ix_(perm, perm)], rtol=0, atol=1e-14)


def test_csk_gram_psd_on_200_points(rng):
    spec = KernelSpec("CSK", 2, field=_random_field("CSK", 2, 1, rng))
    X = rng.uniform(-2, 2, (200, 1))
    K = gram(spec, X)
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * np.trace(K) / 200


def test_rectangular_gram_matches_square_block(rng):
    spec = KernelSpec("GSM", 1, field=_random_field("GSM", 1, 1, rng))
    X = rng.uniform(-2, 2, (7, 1))
    np.testing.assert_allclose(gram(spec, X[:3], X[3:]), gram(spec, X)[:3, 3:], atol=1e-15)


def test_spec_validation():
    with pytest.raises(ValidationError):
        KernelSpec("NSQ", 2, field=object())
    with pytest.raises(ValidationError):
        KernelSpec("CSK", 1)
    with pytest.raises(ValidationError):
        KernelSpec("MATERN", 1, ell=[[1.0]])


# --- convolution oracle ------------------------------------------------------------------


def test_oracle_self_overlap_matches_gaussian_prefactor():
    for ell, mu in ((0.3, 0.0), (1.0, 2.0), (4.0, -3.0)):
        h = point_hyper(1.0, ell, mu)
        v = convolution_oracle(h, h, 0.5, 0.5)
        assert abs(v.real - 1.0 / math.sqrt(4 * math.pi * ell**2)) <= 1e-6
        assert abs(v.imag) <= 1e-10


@given(li=lengthscales, lj=lengthscales, xi=inputs, xj=inputs)
@settings(max_examples=20, deadline=None)
def test_oracle_real_for_zero_frequency(li, lj, xi, xj):
    v = convolution_oracle(point_hyper(1, li, 0.0), point_hyper(1, lj, 0.0), xi, xj)
    assert abs(v.imag) <= 1e-10


def test_oracle_matches_complex_closed_form(rng):
    for _ in range(10):
        hi = point_hyper(1.0, rng.uniform(0.2, 5), rng.uniform(-3, 3))
        hj = point_hyper(1.0, rng.uniform(0.2, 5), rng.uniform(-3, 3))
        xi, xj = rng.uniform(-2, 2), rng.uniform(-2, 2)
        a = convolution_oracle(hi, hj, xi, xj)
        b = convolution_closed_form(hi, hj, xi, xj)
        assert abs(a - b) <= 1e-8


def test_oracle_correlation_matches_closed_form(rng):
    for _ in range(20):
        hi = point_hyper(1.0, rng.uniform(0.2, 5), rng.uniform(-3, 3))
        hj = point_hyper(1.0, rng.uniform(0.2, 5), rng.uniform(-3, 3))
        xi = rng.uniform(-2, 2)
        xj = xi + rng.uniform(-4, 4)
        assert abs(oracle_correlation(hi, hj, xi, xj) - csk_correlation(hi, hj, [xi], [xj])) <= 1e-4


# --- white-noise sampler ---------------------------------------------------------------------


def test_zero_amplitude_gives_zero_path():
    f = FunctionField(ell=lambda X: jnp.full((X.shape[0], 1, 1), 0.5), sigma=lambda X: jnp.zeros((X.shape[0], 1)))
    path = sample_via_convolution(np.linspace(0, 1, 20), f, np.random.default_rng(0))
    np.testing.assert_array_equal(path, np.zeros(20))


def test_sampler_reproducible():
    f = _csk_function_field()
    a = sample_via_convolution(np.linspace(-1, 1, 30), f, np.random.default_rng(3))
    b = sample_via_convolution(np.linspace(-1, 1, 30), f, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_sampler_covariance_matches_correlation():
    ell, mu = 0.5, 1.0
    f = FunctionField(ell=lambda X: jnp.full((X.shape[0], 1, 1), ell), mu=lambda X: jnp.full((X.shape[0], 1, 1), mu))
    grid = np.array([0.0, 0.25, 0.5])
    r = np.random.default_rng(11)
    paths = np.stack([sample_via_convolution(grid, f, r) for _ in range(500)])
    var0 = np.mean(paths[:, 0] ** 2)
    assert abs(var0 - 1.0) <= 0.10
    h = point_hyper(1.0, ell, mu)
    for j in (1, 2):
        emp = np.mean(paths[:, 0] * paths[:, j])
        assert abs(emp - csk_correlation(h, h, [grid[0]], [grid[j]])) <= 0.12
