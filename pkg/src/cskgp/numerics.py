"""Dense linear algebra, Gaussian densities and brute-force numerical oracles.

The public functions here operate on numpy arrays and are the ground truth
used by the test-suite.  The ``*_traced`` helpers at the bottom are the
jax-traceable counterparts used inside jitted objectives; they take a
fixed jitter and leave escalation to the caller (see
:func:`retry_with_jitter`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular as jsolve_triangular
from scipy.integrate import simpson
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, FactorizationFailed, NonFiniteIntegrand, ValidationError

BASE_JITTER = 1e-6
JITTER_CAP = 1e-2
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor of ``M + applied_jitter * I``."""

    L: np.ndarray
    log_det: float
    applied_jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.L @ self.L.T


def _as_symmetric(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("matrix has non-finite entries")
    scale = 1.0 + np.max(np.abs(m), initial=0.0)
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-12 * scale:
        raise ValidationError("matrix is not symmetric")
    return 0.5 * (m + m.T)


def cholesky_with_jitter(m, base_jitter: float = BASE_JITTER) -> CholFactor:
    """Cholesky factor with diagonal jitter escalation.

    The first attempt adds ``base_jitter * mean(diag(m))``.  Each failure
    doubles the jitter (starting from ``BASE_JITTER`` relative when
    ``base_jitter`` is zero) until it would exceed ``JITTER_CAP`` relative,
    at which point :class:`FactorizationFailed` is raised.
    """
    if base_jitter < 0:
        raise ValidationError("base_jitter must be non-negative")
    m = _as_symmetric(m)
    n = m.shape[0]
    scale = float(np.mean(np.diag(m))) if n else 1.0
    if not scale > 0:
        scale = 1.0
    jitter = base_jitter * scale
    eye = np.eye(n)
    while jitter <= JITTER_CAP * scale:
        try:
            L = np.linalg.cholesky(m + jitter * eye if jitter else m)
        except np.linalg.LinAlgError:
            L = None
        if L is not None and np.all(np.diag(L) > 0):
            return CholFactor(L, float(2.0 * np.sum(np.log(np.diag(L)))), jitter)
        jitter = 2.0 * jitter if jitter > 0 else BASE_JITTER * scale
    raise FactorizationFailed(
        f"Cholesky failed with jitter up to {JITTER_CAP:g} x mean diagonal ({n}x{n} matrix)"
    )


def mvn_logpdf(x, mean, chol: CholFactor) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    mean = np.asarray(mean, dtype=np.float64).ravel()
    if x.shape != mean.shape or x.shape[0] != chol.n:
        raise DimensionMismatch(f"x {x.shape}, mean {mean.shape}, factor {chol.n}")
    alpha = solve_triangular(chol.L, x - mean, lower=True)
    n = x.shape[0]
    return float(-0.5 * alpha @ alpha - 0.5 * chol.log_det - 0.5 * n * LOG_2PI)


def mvn_sample(mean, chol: CholFactor, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).ravel()
    z = rng.standard_normal(chol.n)
    return mean + chol.L @ z


def quad_integral_1d(f: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                     n_nodes: int = 2001) -> complex:
    """Composite Simpson rule for a (possibly complex) vectorised integrand."""
    if not lo < hi:
        raise ValidationError("need lo < hi")
    if n_nodes < 3 or n_nodes % 2 == 0:
        raise ValidationError("n_nodes must be odd and at least 3")
    nodes = np.linspace(lo, hi, n_nodes)
    values = np.asarray(f(nodes), dtype=np.complex128)
    if values.shape != nodes.shape:
        values = np.broadcast_to(values, nodes.shape)
    if not np.all(np.isfinite(values)):
        raise NonFiniteIntegrand("integrand produced non-finite values")
    return complex(simpson(values, x=nodes))


def _default_steps(x: np.ndarray, rel: float) -> np.ndarray:
    return rel * (1.0 + np.abs(x))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h=None) -> np.ndarray:
    """Central-difference gradient; ``h`` defaults to ``1e-5 * (1 + |x_i|)``."""
    x = np.array(x, dtype=np.float64, ndmin=1)
    steps = _default_steps(x, 1e-5) if h is None else np.broadcast_to(np.asarray(h, float), x.shape)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = steps.flat[i]
        grad.flat[i] = (float(f(x + e)) - float(f(x - e))) / (2.0 * steps.flat[i])
    return grad


def finite_diff_second_dir(f: Callable[[np.ndarray], float], x, v, h=None) -> float:
    """Second directional derivative ``v^T H v`` by central differences."""
    x = np.array(x, dtype=np.float64, ndmin=1)
    v = np.array(v, dtype=np.float64, ndmin=1)
    if not np.any(v):
        raise ValidationError("direction must be nonzero")
    if h is None:
        h = 1e-3 * (1.0 + float(np.max(np.abs(x))))
    return (float(f(x + h * v)) - 2.0 * float(f(x)) + float(f(x - h * v))) / (h * h)


# --- traced helpers -------------------------------------------------------


def chol_traced(K, jitter):
    """Cholesky of ``K + jitter * mean(diag(K)) * I``; NaN on failure."""
    n = K.shape[-1]
    scale = jnp.mean(jnp.diagonal(K, axis1=-2, axis2=-1), axis=-1)[..., None, None]
    return jnp.linalg.cholesky(K + jitter * scale * jnp.eye(n))


def mvn_logpdf_traced(x, mean, L):
    alpha = jsolve_triangular(L, x - mean, lower=True)
    n = x.shape[-1]
    return (-0.5 * jnp.sum(alpha**2) - jnp.sum(jnp.log(jnp.diagonal(L)))
            - 0.5 * n * LOG_2PI)


def std_normal_logpdf(v):
    return -0.5 * jnp.sum(v**2) - 0.5 * v.size * LOG_2PI


def retry_with_jitter(fn: Callable[[float], object], is_ok: Callable[[object], bool],
                      base_jitter: float = BASE_JITTER):
    """Call ``fn(jitter)``, doubling the relative jitter until ``is_ok``."""
    jitter = base_jitter
    while jitter <= JITTER_CAP:
        out = fn(jitter)
        if is_ok(out):
            return out, jitter
        jitter *= 2.0
    raise FactorizationFailed(f"no finite result with relative jitter up to {JITTER_CAP:g}")


def all_finite(tree) -> bool:
    import jax

    return all(bool(np.all(np.isfinite(np.asarray(leaf)))) for leaf in jax.tree_util.tree_leaves(tree))
