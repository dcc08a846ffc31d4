"""The two-layer sparse model: hyperfunction GPs feeding the kernel of ``f``.

Everything in here is a pure jax function of three pytrees:

``hypers``
    ``log_beta``, ``z_f`` and either the latent-GP parameters ``log_lam``,
    ``log_s``, ``z_theta`` (nonparametric families) or the constant kernel
    parameters ``log_sigma``, ``log_ell``, ``mu`` (SE, SM).
``state``
    ``v_theta`` (H, M_theta) whitened hyperfunction inducing values and
    ``u_f`` (M_f,) inducing values of ``f``.  ``u_f`` is whitened unless the
    layout says otherwise, in which case it holds raw function values.
``noise``
    ``theta`` (H, B + M_f) and ``f`` (B,) standard normal draws.  Passing
    them explicitly keeps every estimator a deterministic function, which
    is what the finite-difference checks rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular

from ..errors import ValidationError
from ..kernels import FAMILIES, NONPARAMETRIC, HyperValues, KernelSpec, cross_cov, diag_cov
from ..latent import (
    HyperFunctionField,
    InducingState,
    LatentGPSpec,
    WarpSpec,
    assemble,
    default_specs,
    hyper_roles,
    latent_moments,
)
from ..numerics import BASE_JITTER, LOG_2PI, chol_traced, mvn_logpdf_traced, std_normal_logpdf

DEFAULT_BETA = 100.0
VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class LikelihoodModel:
    """Gaussian observation noise with precision ``beta``."""

    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValidationError(f"beta must be positive and finite, got {self.beta}")

    @property
    def noise_var(self) -> float:
        return 1.0 / self.beta


@dataclass(frozen=True)
class ModelLayout:
    """Static structure: which family, how many functions, which warps."""

    family: str
    n_components: int
    input_dim: int
    warps: tuple = ()
    shifts: tuple = ()
    whiten_f: bool = True

    def __post_init__(self):
        fam = self.family.upper()
        if fam not in FAMILIES:
            raise ValidationError(f"unknown kernel family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if fam == "SE" and self.n_components != 1:
            raise ValidationError("the SE family has a single component")
        if len(self.warps) != self.n_functions or len(self.shifts) != self.n_functions:
            raise ValidationError(f"{fam} with P={self.n_components}, D={self.input_dim} needs "
                                  f"{self.n_functions} warps and shifts")

    @classmethod
    def default(cls, family: str, n_components: int, input_dim: int, medians=None,
                whiten_f: bool = True) -> "ModelLayout":
        specs = default_specs(family, n_components, input_dim, medians)
        return cls(family, n_components, input_dim, tuple(s.warp for s in specs),
                   tuple(float(s.mean_shift) for s in specs), whiten_f)

    @property
    def nonparametric(self) -> bool:
        return self.family in NONPARAMETRIC

    @property
    def roles(self):
        return hyper_roles(self.family, self.n_components, self.input_dim)

    @property
    def n_functions(self) -> int:
        return len(self.roles)

    def with_shifts(self, shifts) -> "ModelLayout":
        return ModelLayout(self.family, self.n_components, self.input_dim, self.warps,
                           tuple(float(s) for s in shifts), self.whiten_f)


class Forward(NamedTuple):
    mean: jnp.ndarray
    var: jnp.ndarray
    A: jnp.ndarray
    L_f: jnp.ndarray
    hyper: HyperValues


# --- construction -----------------------------------------------------------


def init_hypers(layout: ModelLayout, z_f, z_theta=None, beta: float = DEFAULT_BETA,
                latent_lengthscale: float = 1.0, latent_variance: float = 1.0,
                kernel_sigma=1.0, kernel_ell=1.0, kernel_mu=0.0) -> dict:
    z_f = jnp.atleast_2d(jnp.asarray(z_f, dtype=jnp.float64))
    if z_f.shape[1] != layout.input_dim:
        raise ValidationError(f"z_f has dimension {z_f.shape[1]}, layout expects {layout.input_dim}")
    hypers = {"log_beta": jnp.log(jnp.asarray(beta, dtype=jnp.float64)), "z_f": z_f}
    P, D = layout.n_components, layout.input_dim
    if layout.nonparametric:
        z_theta = z_f if z_theta is None else jnp.atleast_2d(jnp.asarray(z_theta, dtype=jnp.float64))
        H = layout.n_functions
        hypers["z_theta"] = z_theta
        hypers["log_lam"] = jnp.full(H, math.log(latent_lengthscale))
        hypers["log_s"] = jnp.full(H, math.log(latent_variance))
    else:
        hypers["log_sigma"] = jnp.log(jnp.broadcast_to(jnp.asarray(kernel_sigma, float), (P,)))
        hypers["log_ell"] = jnp.log(jnp.broadcast_to(jnp.asarray(kernel_ell, float), (P, D)))
        hypers["mu"] = jnp.broadcast_to(jnp.asarray(kernel_mu, float), (P, D)) + jnp.zeros((P, D))
    return hypers


def init_state(layout: ModelLayout, hypers: dict) -> dict:
    m_theta = hypers["z_theta"].shape[0] if layout.nonparametric else 0
    return {
        "v_theta": jnp.zeros((layout.n_functions, m_theta)),
        "u_f": jnp.zeros(hypers["z_f"].shape[0]),
    }


def draw_noise(layout: ModelLayout, hypers: dict, batch_size: int, key) -> dict:
    k1, k2 = jax.random.split(key)
    m_f = hypers["z_f"].shape[0]
    return {
        "theta": jax.random.normal(k1, (layout.n_functions, batch_size + m_f)),
        "f": jax.random.normal(k2, (batch_size,)),
    }


# --- forward pass -------------------------------------------------------------


def hyper_values(layout: ModelLayout, hypers: dict, state: dict, X, eps_theta=None,
                 jitter: float = BASE_JITTER) -> HyperValues:
    """Hyperfunction values at the rows of ``X``.

    Without ``eps_theta`` the latent conditional means are warped; with it,
    a joint draw over all rows is taken.  The draw's Cholesky factor is
    held constant for differentiation, so gradients flow through the mean.
    """
    X = jnp.atleast_2d(X)
    n = X.shape[0]
    P, D = layout.n_components, layout.input_dim
    if not layout.nonparametric:
        sigma = jnp.broadcast_to(jnp.exp(hypers["log_sigma"]), (n, P))
        ell = jnp.broadcast_to(jnp.exp(hypers["log_ell"]), (n, P, D))
        mu = jnp.broadcast_to(hypers["mu"], (n, P, D))
        if layout.family == "SE":
            mu = jnp.zeros_like(mu)
        return HyperValues(sigma, ell, mu)
    args = (hypers["z_theta"], state["v_theta"], hypers["log_lam"], hypers["log_s"], X, jitter)
    if eps_theta is None:
        latent, _ = latent_moments(*args)
    else:
        mean, cov = latent_moments(*args, full_cov=True)
        cov = jax.lax.stop_gradient(0.5 * (cov + jnp.swapaxes(cov, 1, 2)))
        prior_var = jax.lax.stop_gradient(jnp.exp(hypers["log_s"]))[:, None, None]
        L = jnp.linalg.cholesky(cov + BASE_JITTER * prior_var * jnp.eye(n))
        latent = mean + jnp.einsum("hij,hj->hi", L, eps_theta)
    return assemble(layout.family, P, D, layout.warps, jnp.asarray(layout.shifts), latent)


def forward(layout: ModelLayout, hypers: dict, state: dict, X, eps_theta=None,
            jitter: float = BASE_JITTER) -> Forward:
    """Conditional moments of ``f(X)`` given the inducing values.

    The hyperfunctions are evaluated jointly over ``X`` and ``z_f`` so that
    the kernel between data and inducing inputs uses consistent values.
    """
    X = jnp.atleast_2d(X)
    n = X.shape[0]
    z_f = hypers["z_f"]
    hv = hyper_values(layout, hypers, state, jnp.concatenate([X, z_f], axis=0), eps_theta, jitter)
    hx, hz = hv.take(slice(0, n)), hv.take(slice(n, None))
    fam = layout.family
    Kzz = cross_cov(fam, z_f, hz, z_f, hz)
    L_f = chol_traced(0.5 * (Kzz + Kzz.T), jitter)
    Kzx = cross_cov(fam, z_f, hz, X, hx)
    A = solve_triangular(L_f, Kzx, lower=True)
    if layout.whiten_f:
        mean = A.T @ state["u_f"]
    else:
        mean = A.T @ solve_triangular(L_f, state["u_f"], lower=True)
    var = jnp.maximum(diag_cov(fam, hx) - jnp.sum(A**2, axis=0), VAR_FLOOR)
    return Forward(mean, var, A, L_f, hx)


def gaussian_loglik(y, f, log_beta):
    return 0.5 * log_beta - 0.5 * LOG_2PI - 0.5 * jnp.exp(log_beta) * (y - f) ** 2


def expected_loglik(y, mean, var, log_beta):
    """``E log N(y | f, 1/beta)`` under ``f ~ N(mean, var)``."""
    return gaussian_loglik(y, mean, log_beta) - 0.5 * jnp.exp(log_beta) * var


def prior_terms(layout: ModelLayout, state: dict, fw: Forward):
    if layout.whiten_f:
        prior_f = std_normal_logpdf(state["u_f"])
    else:
        prior_f = mvn_logpdf_traced(state["u_f"], jnp.zeros_like(state["u_f"]), fw.L_f)
    return prior_f, std_normal_logpdf(state["v_theta"])


def energy_terms(layout: ModelLayout, hypers: dict, state: dict, Xb, yb, n_total: int,
                 noise: dict, jitter: float = BASE_JITTER) -> dict:
    """The three pieces of the single-sample energy.

    ``lik`` is the minibatch log-likelihood at the sampled ``f`` scaled by
    ``N / B``; the energy is minus the sum of all three.
    """
    fw = forward(layout, hypers, state, Xb, noise["theta"], jitter)
    f_hat = fw.mean + jnp.sqrt(fw.var) * noise["f"]
    scale = n_total / Xb.shape[0]
    lik = scale * jnp.sum(gaussian_loglik(yb, f_hat, hypers["log_beta"]))
    prior_f, prior_theta = prior_terms(layout, state, fw)
    return {"lik": lik, "prior_f": prior_f, "prior_theta": prior_theta, "f_hat": f_hat}


def energy(layout: ModelLayout, hypers: dict, state: dict, Xb, yb, n_total: int, noise: dict,
           jitter: float = BASE_JITTER):
    t = energy_terms(layout, hypers, state, Xb, yb, n_total, noise, jitter)
    return -(t["lik"] + t["prior_f"] + t["prior_theta"])


def mean_path_objective(layout: ModelLayout, hypers: dict, state: dict, Xb, yb, n_total: int,
                        jitter: float = BASE_JITTER, include_prior: bool = True):
    """Deterministic log joint with hyperfunctions and ``f`` at conditional means.

    The likelihood is averaged over the conditional spread of ``f``, which
    keeps the noise precision from running off when it is being learned.
    """
    fw = forward(layout, hypers, state, Xb, None, jitter)
    scale = n_total / Xb.shape[0]
    obj = scale * jnp.sum(expected_loglik(yb, fw.mean, fw.var, hypers["log_beta"]))
    if include_prior:
        prior_f, prior_theta = prior_terms(layout, state, fw)
        obj = obj + prior_f + prior_theta
    return obj


def map_objective(layout: ModelLayout, hypers: dict, state: dict, X, y,
                  jitter: float = BASE_JITTER):
    """``log p(y|f) p(f|theta) p(theta)`` at the conditional means."""
    fw = forward(layout, hypers, state, X, None, jitter)
    lik = jnp.sum(gaussian_loglik(y, fw.mean, hypers["log_beta"]))
    prior_f, prior_theta = prior_terms(layout, state, fw)
    return lik + prior_f + prior_theta


# --- conversions ----------------------------------------------------------------


def field_from(layout: ModelLayout, hypers: dict, state: dict) -> Optional[HyperFunctionField]:
    if not layout.nonparametric:
        return None
    lam = np.exp(np.asarray(hypers["log_lam"]))
    s = np.exp(np.asarray(hypers["log_s"]))
    specs = [LatentGPSpec(float(lam[d]), float(s[d]), layout.warps[d], float(layout.shifts[d]))
             for d in range(layout.n_functions)]
    return HyperFunctionField(layout.family, layout.n_components, specs,
                              np.asarray(hypers["z_theta"]), np.asarray(state["v_theta"]))


def kernel_spec_from(layout: ModelLayout, hypers: dict, state: dict) -> KernelSpec:
    """A :class:`KernelSpec` whose nonparametric field is the conditional-mean field."""
    if layout.nonparametric:
        return KernelSpec(layout.family, layout.n_components,
                          field=field_from(layout, hypers, state))
    sigma = np.exp(np.asarray(hypers["log_sigma"]))
    ell = np.exp(np.asarray(hypers["log_ell"]))
    if layout.family == "SE":
        return KernelSpec.se(ell[0], sigma[0])
    return KernelSpec("SM", layout.n_components, sigma=sigma, ell=ell, mu=np.asarray(hypers["mu"]))


def inducing_state_from(layout: ModelLayout, hypers: dict, state: dict) -> InducingState:
    return InducingState(field_from(layout, hypers, state), np.asarray(hypers["z_f"]),
                         np.asarray(state["u_f"]),
                         extra={"whitened": layout.whiten_f,
                                "beta": float(np.exp(hypers["log_beta"]))})


def hyper_trace(layout: ModelLayout, hypers: dict, state: dict, X) -> dict:
    """Named hyperfunction curves over ``X`` on the conditional-mean path.

    ``frequency`` is the local spectral frequency in cycles per unit, the
    lengthscale-normalised ``mu / (2 pi ell^2)`` for CSK and ``mu / 2 pi``
    for GSM and SM.
    """
    hv = hyper_values(layout, hypers, state, jnp.atleast_2d(X))
    sigma, ell, mu = (np.asarray(a) for a in hv)
    out = {"sigma": sigma, "lengthscale": ell}
    if layout.family == "CSK":
        out["frequency"] = mu / (2.0 * math.pi * ell**2)
    elif layout.family in ("GSM", "SM"):
        out["frequency"] = mu / (2.0 * math.pi)
    return out
