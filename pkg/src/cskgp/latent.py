"""Warped latent-GP priors over kernel hyperfunctions.

Each hyperfunction ``theta_d(x) = warp_d(h_d(x) + mean_shift_d)`` where
``h_d`` is a zero-mean GP with an isotropic SE kernel, summarised by
whitened inducing values ``v_d`` at shared inducing inputs ``z``:
``u_d = chol(K_d(z, z)) @ v_d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular

from .errors import FactorizationFailed, ValidationError
from .kernels import NONPARAMETRIC, HyperValues
from .numerics import BASE_JITTER, cholesky_with_jitter, retry_with_jitter

WARPS = ("exp", "softplus", "identity")


@dataclass(frozen=True)
class WarpSpec:
    kind: str = "identity"
    offset: float = 0.0

    def __post_init__(self):
        if self.kind.lower() not in WARPS:
            raise ValidationError(f"unknown warp {self.kind!r}")
        object.__setattr__(self, "kind", self.kind.lower())


def warp(spec: WarpSpec, h):
    h = h + spec.offset
    if spec.kind == "exp":
        return jnp.exp(h)
    if spec.kind == "softplus":
        return jnp.logaddexp(0.0, h)
    return h


def inverse_warp(spec: WarpSpec, y: float) -> float:
    if spec.kind == "exp":
        v = math.log(y)
    elif spec.kind == "softplus":
        v = math.log(math.expm1(y))
    else:
        v = y
    return v - spec.offset


@dataclass(frozen=True)
class LatentGPSpec:
    lengthscale: float = 1.0
    variance: float = 1.0
    warp: WarpSpec = WarpSpec()
    mean_shift: float = 0.0

    def __post_init__(self):
        if not (self.lengthscale > 0 and self.variance > 0):
            raise ValidationError("latent GP lengthscale and variance must be positive")


def hyper_roles(family: str, n_components: int, input_dim: int):
    """Ordered ``(role, component, dim)`` triples of the hyperfunctions."""
    family = family.upper()
    if family not in NONPARAMETRIC:
        return []
    roles = []
    for p in range(n_components):
        roles.append(("sigma", p, None))
        roles.extend(("ell", p, d) for d in range(input_dim))
        if family in ("GSM", "CSK"):
            roles.extend(("mu", p, d) for d in range(input_dim))
    return roles


DEFAULT_MEDIANS = {"sigma": 1.0, "ell": 0.5, "mu": 0.0}
DEFAULT_WARPS = {"sigma": WarpSpec("softplus"), "ell": WarpSpec("exp"), "mu": WarpSpec("identity")}


def default_specs(family: str, n_components: int, input_dim: int, medians=None,
                  lengthscale: float = 1.0, variance: float = 1.0):
    """Latent specs whose prior median hyperfunction values are ``medians``.

    A median may be a scalar or a per-input-dimension sequence.
    """
    med = dict(DEFAULT_MEDIANS, **(medians or {}))
    specs = []
    for role, _, d in hyper_roles(family, n_components, input_dim):
        w = DEFAULT_WARPS[role]
        m = med[role] if np.ndim(med[role]) == 0 else np.asarray(med[role], float)[d]
        specs.append(LatentGPSpec(lengthscale, variance, w, inverse_warp(w, float(m))))
    return specs


def se_cov(x1, x2, lengthscale, variance, nugget=0.0):
    """Isotropic SE covariance; ``nugget * variance`` is added where inputs coincide."""
    d2 = jnp.sum((x1[:, None, :] - x2[None, :, :]) ** 2, axis=-1)
    K = variance * jnp.exp(-0.5 * d2 / lengthscale**2)
    if isinstance(nugget, (int, float)) and nugget == 0:
        return K
    return K + nugget * variance * (d2 == 0.0)


def latent_moments(z, v, log_lam, log_s, X, jitter, full_cov: bool = False):
    """Conditional moments of every latent ``h_d(X)`` given whitened ``v``.

    Shapes: ``v`` (H, M), ``log_lam``/``log_s`` (H,), ``X`` (N, D).  Returns
    the mean (H, N) and either the covariance (H, N, N) or variance (H, N).
    """

    # the jitter acts as a nugget so the conditional mean interpolates the
    # unwhitened values exactly at the inducing inputs
    def one(v_d, ll, ls):
        lam, s = jnp.exp(ll), jnp.exp(ls)
        L = jnp.linalg.cholesky(se_cov(z, z, lam, s, jitter))
        A = solve_triangular(L, se_cov(z, X, lam, s, jitter), lower=True)
        mean = A.T @ v_d
        if full_cov:
            return mean, se_cov(X, X, lam, s, jitter) - A.T @ A
        return mean, s * (1.0 + jitter * _on_any(X, z)) - jnp.sum(A**2, axis=0)

    return jax.vmap(one)(v, log_lam, log_s)


def _on_any(X, z):
    d2 = jnp.sum((X[:, None, :] - z[None, :, :]) ** 2, axis=-1)
    return jnp.any(d2 == 0.0, axis=1)


def assemble(family: str, n_components: int, input_dim: int, warps: Sequence[WarpSpec],
             shifts, latent) -> HyperValues:
    """Warp latent rows (H, N) into HyperValues."""
    roles = hyper_roles(family, n_components, input_dim)
    n = latent.shape[1]
    sig = [None] * n_components
    ell = [[None] * input_dim for _ in range(n_components)]
    mu = [[jnp.zeros(n)] * input_dim for _ in range(n_components)]
    for i, (role, p, d) in enumerate(roles):
        val = warp(warps[i], latent[i] + shifts[i])
        if role == "sigma":
            sig[p] = val
        elif role == "ell":
            ell[p][d] = val
        else:
            mu[p][d] = val
    sigma = jnp.stack(sig, axis=-1)
    ell = jnp.stack([jnp.stack(e, axis=-1) for e in ell], axis=1)
    mu = jnp.stack([jnp.stack(m, axis=-1) for m in mu], axis=1)
    return HyperValues(sigma, ell, mu)


@dataclass
class HyperFunctionField:
    """All hyperfunctions of a nonparametric kernel, with shared inducing inputs."""

    family: str
    n_components: int
    specs: list
    z: np.ndarray
    v: np.ndarray = None

    def __post_init__(self):
        self.family = self.family.upper()
        self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
        roles = hyper_roles(self.family, self.n_components, self.input_dim)
        if len(self.specs) != len(roles):
            raise ValidationError(f"expected {len(roles)} latent specs, got {len(self.specs)}")
        if self.v is None:
            self.v = np.zeros((len(roles), self.z.shape[0]))
        self.v = np.asarray(self.v, dtype=np.float64).reshape(len(roles), self.z.shape[0])
        if not np.all(np.isfinite(self.v)):
            raise ValidationError("whitened inducing values must be finite")
        if np.unique(self.z, axis=0).shape[0] != self.z.shape[0]:
            raise ValidationError("inducing inputs must be distinct")

    @classmethod
    def default(cls, family, n_components, z, medians=None, **kw):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return cls(family, n_components, default_specs(family, n_components, z.shape[1], medians, **kw), z)

    @property
    def input_dim(self) -> int:
        return self.z.shape[1]

    @property
    def roles(self):
        return hyper_roles(self.family, self.n_components, self.input_dim)

    @property
    def n_functions(self) -> int:
        return len(self.specs)

    @property
    def warps(self):
        return tuple(s.warp for s in self.specs)

    @property
    def shifts(self):
        return np.array([s.mean_shift for s in self.specs])

    @property
    def log_lam(self):
        return np.log([s.lengthscale for s in self.specs])

    @property
    def log_s(self):
        return np.log([s.variance for s in self.specs])

    def with_values(self, v) -> "HyperFunctionField":
        return replace(self, v=np.asarray(v, dtype=np.float64))

    def latent_mean(self, X, jitter: float = BASE_JITTER):
        X = jnp.atleast_2d(jnp.asarray(X, dtype=jnp.float64))
        mean, _ = latent_moments(jnp.asarray(self.z), jnp.asarray(self.v), jnp.asarray(self.log_lam),
                                 jnp.asarray(self.log_s), X, jitter)
        return mean

    def values(self, X, mode: str = "mean", rng: Optional[np.random.Generator] = None) -> HyperValues:
        return conditional_hyper(self, X, mode, rng)


def unwhiten(field: HyperFunctionField, d: int) -> np.ndarray:
    return _inducing_chol(field, d) @ field.v[d]


def whiten(field: HyperFunctionField, d: int, u) -> np.ndarray:
    from scipy.linalg import solve_triangular as np_solve

    return np_solve(_inducing_chol(field, d), np.asarray(u, float), lower=True)


def _inducing_chol(field: HyperFunctionField, d: int) -> np.ndarray:
    # same jittered factor as the traced conditional, falling back to escalation
    s = field.specs[d]
    K = np.asarray(se_cov(field.z, field.z, s.lengthscale, s.variance, BASE_JITTER))
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return cholesky_with_jitter(K).L


def conditional_hyper(field: HyperFunctionField, X, mode: str = "mean",
                      rng: Optional[np.random.Generator] = None) -> HyperValues:
    """Hyperfunction values at ``X`` from the latent GP conditionals.

    ``mode="mean"`` warps the conditional means; ``mode="sample"`` draws the
    latent functions jointly over the rows of ``X`` first.  Mean mode is
    traceable and differentiable in ``X``.
    """
    mode = mode.lower()
    if mode == "mean":
        X = jnp.atleast_2d(jnp.asarray(X, dtype=jnp.float64))
        latent = field.latent_mean(X)
        if isinstance(latent, jax.core.Tracer):
            return assemble(field.family, field.n_components, field.input_dim, field.warps,
                            field.shifts, latent)
        latent, _ = retry_with_jitter(lambda j: field.latent_mean(X, j), _finite)
        return assemble(field.family, field.n_components, field.input_dim, field.warps,
                        field.shifts, latent)
    if mode != "sample":
        raise ValidationError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValidationError("sample mode needs a random generator")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))

    def moments(j):
        return latent_moments(jnp.asarray(field.z), jnp.asarray(field.v), jnp.asarray(field.log_lam),
                              jnp.asarray(field.log_s), jnp.asarray(X), j, full_cov=True)

    (mean, cov), _ = retry_with_jitter(moments, _finite)
    mean, cov = np.asarray(mean), np.asarray(cov)
    latent = np.empty_like(mean)
    for d in range(field.n_functions):
        C = 0.5 * (cov[d] + cov[d].T)
        chol = _cond_chol(C, field.specs[d].variance)
        latent[d] = mean[d] + chol @ rng.standard_normal(X.shape[0])
    return assemble(field.family, field.n_components, field.input_dim, field.warps,
                    field.shifts, jnp.asarray(latent))


def _finite(out) -> bool:
    return all(bool(np.all(np.isfinite(np.asarray(a)))) for a in jax.tree_util.tree_leaves(out))


def _cond_chol(C, prior_variance):
    # conditional covariances can be numerically rank-deficient; jitter is
    # relative to the prior variance rather than the (tiny) conditional one
    n = C.shape[0]
    jitter = BASE_JITTER * prior_variance
    while jitter <= 1e-2 * prior_variance:
        try:
            return np.linalg.cholesky(C + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise FactorizationFailed("conditional covariance of a latent GP is not factorizable")


@dataclass
class FunctionField:
    """Hyperfunctions given as explicit callables of ``X`` (N, D).

    ``sigma(X)`` returns (N, P); ``ell(X)`` and ``mu(X)`` return (N, P, D).
    Callables should use ``jax.numpy`` to allow Jacobians.
    """

    ell: Callable
    mu: Callable = None
    sigma: Callable = None

    def values(self, X) -> HyperValues:
        X = jnp.atleast_2d(jnp.asarray(X, dtype=jnp.float64))
        ell = jnp.asarray(self.ell(X))
        n, P, D = ell.shape
        mu = jnp.zeros((n, P, D)) if self.mu is None else jnp.broadcast_to(self.mu(X), (n, P, D))
        sigma = jnp.ones((n, P)) if self.sigma is None else jnp.broadcast_to(self.sigma(X), (n, P))
        return HyperValues(sigma, ell, mu)


@dataclass
class InducingState:
    """Inducing inputs and values for the hyperfunctions and for f."""

    field: HyperFunctionField
    z_f: np.ndarray
    u_f: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z_f = np.atleast_2d(np.asarray(self.z_f, dtype=np.float64))
        if self.u_f is None:
            self.u_f = np.zeros(self.z_f.shape[0])
        self.u_f = np.asarray(self.u_f, dtype=np.float64).ravel()
        if self.field is not None and self.field.input_dim != self.z_f.shape[1]:
            raise ValidationError("z_f and z_theta have different input dimension")
