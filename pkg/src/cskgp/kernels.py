"""Kernel families: SE, SM, NSQ, GSM and the convolutional spectral kernel.

All pairwise evaluation is vectorised in ``jax.numpy`` so the same code
serves Gram construction, autodiff inside the inference objectives and the
scalar convenience functions used in tests.  Hyperparameters at a set of
inputs are carried as :class:`HyperValues` with shapes

    sigma (N, P), ell (N, P, D), mu (N, P, D)

where ``ell`` holds the diagonal square roots of the per-input covariance
``Sigma_p(x) = diag(ell**2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Any, NamedTuple, Optional

import jax.numpy as jnp
import numpy as np

from .errors import DimensionMismatch, NonPositiveLengthscale, ValidationError
from .numerics import quad_integral_1d

FAMILIES = ("SE", "SM", "NSQ", "GSM", "CSK")
NONPARAMETRIC = ("NSQ", "GSM", "CSK")


class HyperValues(NamedTuple):
    sigma: Any
    ell: Any
    mu: Any

    @property
    def n_components(self) -> int:
        return self.sigma.shape[-1]

    def take(self, rows) -> "HyperValues":
        return HyperValues(self.sigma[rows], self.ell[rows], self.mu[rows])

    def component(self, p: int) -> "HyperValues":
        return HyperValues(self.sigma[:, p:p + 1], self.ell[:, p:p + 1], self.mu[:, p:p + 1])


def point_hyper(sigma=1.0, ell=1.0, mu=0.0, dim: Optional[int] = None) -> HyperValues:
    """Single-input, single-component values, broadcast to ``dim`` dimensions."""
    ell = np.atleast_1d(np.asarray(ell, dtype=np.float64))
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    d = dim or max(ell.size, mu.size)
    ell = np.broadcast_to(ell, (d,)).reshape(1, 1, d)
    mu = np.broadcast_to(mu, (d,)).reshape(1, 1, d)
    return HyperValues(np.full((1, 1), float(sigma)), ell, mu)


@dataclass
class KernelSpec:
    """A kernel family plus its parameters.

    SE and SM carry constant ``sigma`` (P,), ``ell`` (P, D), ``mu`` (P, D);
    NSQ, GSM and CSK carry ``field``, any object with a
    ``values(X) -> HyperValues`` method (e.g. a ``HyperFunctionField``).
    """

    family: str
    n_components: int = 1
    sigma: Any = None
    ell: Any = None
    mu: Any = None
    field: Any = dc_field(default=None, repr=False)

    def __post_init__(self):
        self.family = self.family.upper()
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown kernel family {self.family!r}")
        if self.family in ("SE", "NSQ") and self.n_components != 1:
            raise ValidationError(f"{self.family} has exactly one component")
        if self.family in NONPARAMETRIC:
            if self.field is None:
                raise ValidationError(f"{self.family} requires a hyperfunction field")
        else:
            if self.ell is None:
                raise ValidationError(f"{self.family} requires constant lengthscales")
            P = self.n_components
            self.ell = np.asarray(self.ell, dtype=np.float64).reshape(P, -1)
            D = self.ell.shape[1]
            self.sigma = np.ones(P) if self.sigma is None else np.asarray(self.sigma, float).reshape(P)
            mu = np.zeros((P, D)) if self.mu is None or self.family == "SE" else self.mu
            self.mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (P, D)).copy()
            if np.any(self.ell <= 0):
                raise NonPositiveLengthscale("lengthscales must be positive")

    @classmethod
    def se(cls, ell, sigma=1.0):
        return cls("SE", 1, sigma=[sigma], ell=np.atleast_1d(ell)[None, :])

    @classmethod
    def sm(cls, weights, ell, mu):
        """SM with mixture weights ``w_p = sigma_p**2``."""
        w = np.atleast_1d(np.asarray(weights, float))
        return cls("SM", w.size, sigma=np.sqrt(w), ell=ell, mu=mu)

    def values(self, X) -> HyperValues:
        X = jnp.asarray(X)
        if self.family in NONPARAMETRIC:
            hv = self.field.values(X)
        else:
            n = X.shape[0]
            P, D = self.ell.shape
            hv = HyperValues(jnp.broadcast_to(self.sigma, (n, P)),
                             jnp.broadcast_to(self.ell, (n, P, D)),
                             jnp.broadcast_to(self.mu, (n, P, D)))
        _check_dims(X, hv)
        return hv


def _check_dims(X, hv: HyperValues):
    if hv.ell.shape[-1] != X.shape[-1]:
        raise DimensionMismatch(f"inputs have D={X.shape[-1]}, hyperparameters D={hv.ell.shape[-1]}")


# --- pairwise terms -------------------------------------------------------


class PairwiseTerms(NamedTuple):
    """Terms of the normalised CSK correlation, each shaped (N1, N2, P)."""

    sigma_ij: Any
    Q: Any
    omega: Any  # (N1, N2, P, D)
    S: Any
    phase: Any  # <omega_ij, x_i - x_j>


def pairwise_terms(x1, h1: HyperValues, x2, h2: HyperValues) -> PairwiseTerms:
    s1 = h1.ell[:, None] ** 2
    s2 = h2.ell[None, :] ** 2
    ssum = s1 + s2
    tau = (x1[:, None, :] - x2[None, :, :])[:, :, None, :]
    log_sig = 0.25 * jnp.log(s1) + 0.25 * jnp.log(s2) - 0.5 * jnp.log(ssum / 2.0)
    sigma_ij = jnp.exp(jnp.sum(log_sig, axis=-1))
    Q = jnp.sum(tau**2 / ssum, axis=-1)
    mu1 = h1.mu[:, None]
    mu2 = h2.mu[None, :]
    omega = (mu1 + mu2) / ssum
    dw = mu1 / s1 - mu2 / s2
    S = jnp.sum(dw**2 * (s1 * s2 / ssum), axis=-1)
    phase = jnp.sum(omega * tau, axis=-1)
    return PairwiseTerms(sigma_ij, Q, omega, S, phase)


def _gsm_phase(x1, h1, x2, h2):
    u1 = jnp.sum(h1.mu * x1[:, None, :], axis=-1)
    u2 = jnp.sum(h2.mu * x2[:, None, :], axis=-1)
    return u1[:, None, :] - u2[None, :, :]


def complex_form(family: str, x1, h1: HyperValues, x2, h2: HyperValues):
    """Per-component ``(amp, D, U)`` with ``k = sum_a amp * exp(-D/2) * exp(iU)``.

    The real kernel of every family is ``sum_a amp * exp(-D/2) * cos(U)``.
    """
    family = family.upper()
    if family in ("SE", "SM"):
        tau = (x1[:, None, :] - x2[None, :, :])[:, :, None, :]
        ell = h1.ell[:, None]
        D = jnp.sum(tau**2 / ell**2, axis=-1)
        U = jnp.sum(h1.mu[:, None] * tau, axis=-1)
        amp = jnp.broadcast_to(h1.sigma[:, None] ** 2, D.shape)
        return amp, D, U
    t = pairwise_terms(x1, h1, x2, h2)
    amp = h1.sigma[:, None, :] * h2.sigma[None, :, :] * t.sigma_ij
    if family == "NSQ":
        return amp, t.Q, jnp.zeros_like(t.Q)
    if family == "GSM":
        return amp, t.Q, _gsm_phase(x1, h1, x2, h2)
    if family == "CSK":
        return amp, t.Q + t.S, t.phase
    raise ValidationError(f"unknown kernel family {family!r}")


def cross_cov(family: str, x1, h1: HyperValues, x2, h2: HyperValues):
    """Kernel matrix ``k(x1_i, x2_j)`` summed over components."""
    amp, D, U = complex_form(family, x1, h1, x2, h2)
    if family.upper() == "NSQ":
        return jnp.sum(amp * jnp.exp(-0.5 * D), axis=-1)
    return jnp.sum(amp * jnp.exp(-0.5 * D) * jnp.cos(U), axis=-1)


def diag_cov(family: str, h: HyperValues):
    """``k(x, x)`` for every row; equals ``sum_p sigma_p(x)**2`` for all families."""
    return jnp.sum(h.sigma**2, axis=-1)


def gram(spec: KernelSpec, X, X2=None) -> np.ndarray:
    X = jnp.atleast_2d(jnp.asarray(X, dtype=jnp.float64))
    h1 = spec.values(X)
    if X2 is None:
        return np.asarray(cross_cov(spec.family, X, h1, X, h1))
    X2 = jnp.atleast_2d(jnp.asarray(X2, dtype=jnp.float64))
    return np.asarray(cross_cov(spec.family, X, h1, X2, spec.values(X2)))


# --- scalar convenience API ----------------------------------------------


def _pair_inputs(hyp_i, hyp_j, x_i, x_j):
    x_i = np.atleast_1d(np.asarray(x_i, dtype=np.float64))[None, :]
    x_j = np.atleast_1d(np.asarray(x_j, dtype=np.float64))[None, :]
    for h in (hyp_i, hyp_j):
        if np.any(np.asarray(h.ell) <= 0):
            raise NonPositiveLengthscale("lengthscales must be positive")
        _check_dims(x_i, h)
    if x_i.shape != x_j.shape:
        raise DimensionMismatch("x_i and x_j differ in dimension")
    return x_i, x_j


def csk_correlation(hyp_i: HyperValues, hyp_j: HyperValues, x_i, x_j) -> float:
    """Normalised CSK correlation for one component (amplitudes ignored)."""
    x_i, x_j = _pair_inputs(hyp_i, hyp_j, x_i, x_j)
    t = pairwise_terms(x_i, hyp_i, x_j, hyp_j)
    return float((t.sigma_ij * jnp.exp(-0.5 * (t.Q + t.S)) * jnp.cos(t.phase))[0, 0, 0])


def nsq_kernel(hyp_i: HyperValues, hyp_j: HyperValues, x_i, x_j) -> float:
    x_i, x_j = _pair_inputs(hyp_i, hyp_j, x_i, x_j)
    t = pairwise_terms(x_i, hyp_i, x_j, hyp_j)
    return float((t.sigma_ij * jnp.exp(-0.5 * t.Q))[0, 0, 0])


def gsm_kernel(hyp_i: HyperValues, hyp_j: HyperValues, x_i, x_j) -> float:
    x_i, x_j = _pair_inputs(hyp_i, hyp_j, x_i, x_j)
    t = pairwise_terms(x_i, hyp_i, x_j, hyp_j)
    U = _gsm_phase(x_i, hyp_i, x_j, hyp_j)
    return float((t.sigma_ij * jnp.exp(-0.5 * t.Q) * jnp.cos(U))[0, 0, 0])


def csk_kernel(spec: KernelSpec, x_i, x_j) -> float:
    if spec.family != "CSK":
        raise ValidationError("csk_kernel needs a CSK spec")
    return float(gram(spec, np.atleast_2d(x_i), np.atleast_2d(x_j))[0, 0])


def sm_kernel(spec: KernelSpec, x_i, x_j) -> float:
    if spec.family not in ("SM", "SE"):
        raise ValidationError("sm_kernel needs an SM spec")
    return float(gram(spec, np.atleast_2d(x_i), np.atleast_2d(x_j))[0, 0])


# --- convolution integral --------------------------------------------------


def feature_map(u, x, ell, mu):
    """Normalised complex basis function ``K_x(u)`` in one dimension."""
    s = ell * ell
    return (np.exp(-0.5 * (u - x) ** 2 / s) * np.exp(1j * (mu / s) * (u - x))
            / np.sqrt(2.0 * np.pi * s))


def convolution_closed_form(hyp_i: HyperValues, hyp_j: HyperValues, x_i: float, x_j: float) -> complex:
    """Closed-form Hermitian inner product of two normalised 1-d feature maps."""
    a_i = float(np.ravel(hyp_i.ell)[0]) ** 2
    a_j = float(np.ravel(hyp_j.ell)[0]) ** 2
    b_i = float(np.ravel(hyp_i.mu)[0]) / a_i
    b_j = float(np.ravel(hyp_j.mu)[0]) / a_j
    tau = x_i - x_j
    P = 1.0 / a_i + 1.0 / a_j
    log_mag = (-tau**2 / (2 * (a_i + a_j)) - (b_i - b_j) ** 2 / (2 * P)
               + 0.5 * np.log(2 * np.pi / P) - 0.5 * np.log(4 * np.pi**2 * a_i * a_j))
    phase = -tau * (b_i * a_i + b_j * a_j) / (a_i + a_j)
    return complex(np.exp(log_mag) * np.exp(1j * phase))


def convolution_integral(hyp_i: HyperValues, hyp_j: HyperValues, x_i: float, x_j: float,
                         n_nodes: int = 2001) -> complex:
    """Quadrature of ``int K_i(u) conj(K_j(u)) du`` over +-8 envelope stddevs."""
    l_i = float(np.ravel(hyp_i.ell)[0])
    l_j = float(np.ravel(hyp_j.ell)[0])
    m_i = float(np.ravel(hyp_i.mu)[0])
    m_j = float(np.ravel(hyp_j.mu)[0])
    if l_i <= 0 or l_j <= 0:
        raise NonPositiveLengthscale("lengthscales must be positive")
    prec = 1.0 / l_i**2 + 1.0 / l_j**2
    center = (x_i / l_i**2 + x_j / l_j**2) / prec
    sd = 1.0 / np.sqrt(prec)

    def integrand(u):
        return feature_map(u, x_i, l_i, m_i) * np.conj(feature_map(u, x_j, l_j, m_j))

    return quad_integral_1d(integrand, center - 8 * sd, center + 8 * sd, n_nodes)


def convolution_oracle(hyp_i: HyperValues, hyp_j: HyperValues, x_i: float, x_j: float,
                       n_nodes: int = 2001) -> complex:
    """Numerical inner product, plus its normalised correlation.

    Returns the raw complex integral; use :func:`oracle_correlation` for the
    value comparable with :func:`csk_correlation`.
    """
    return convolution_integral(hyp_i, hyp_j, float(x_i), float(x_j), n_nodes)


def oracle_correlation(hyp_i: HyperValues, hyp_j: HyperValues, x_i: float, x_j: float,
                       n_nodes: int = 2001) -> float:
    k_ij = convolution_integral(hyp_i, hyp_j, x_i, x_j, n_nodes)
    k_ii = convolution_integral(hyp_i, hyp_i, x_i, x_i, n_nodes)
    k_jj = convolution_integral(hyp_j, hyp_j, x_j, x_j, n_nodes)
    return k_ij.real / np.sqrt(k_ii.real * k_jj.real)


def sample_via_convolution(grid, hyp_field, rng: np.random.Generator, n_noise: int = 10_000,
                           pad: float = 8.0) -> np.ndarray:
    """Draw a 1-d CSK path as a discretised convolution with white noise.

    ``hyp_field`` maps a (N, 1) grid to single-component HyperValues.  The
    white noise is complex with unit variance so that the path covariance is
    the real part of the Hermitian inner product; each basis function is
    rescaled to unit discrete norm, giving ``Var f(x) = sigma(x)**2``.
    """
    grid = np.asarray(grid, dtype=np.float64).ravel()
    hv = hyp_field.values(grid[:, None]) if hasattr(hyp_field, "values") else hyp_field
    sigma = np.asarray(hv.sigma)[:, 0]
    ell = np.asarray(hv.ell)[:, 0, 0]
    mu = np.asarray(hv.mu)[:, 0, 0]
    lo = grid.min() - pad * ell.max()
    hi = grid.max() + pad * ell.max()
    u = np.linspace(lo, hi, n_noise)
    delta = u[1] - u[0]
    w = (rng.standard_normal(n_noise) + 1j * rng.standard_normal(n_noise)) / np.sqrt(2.0)
    basis = feature_map(u[None, :], grid[:, None], ell[:, None], mu[:, None])
    norm = np.sqrt(np.sum(np.abs(basis) ** 2, axis=1) * delta)
    path = np.real(basis @ w) * np.sqrt(delta) / norm * np.sqrt(2.0)
    return sigma * path
