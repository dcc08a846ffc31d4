"""Local spectrogram parameters, the approximate Wigner distribution and DGP prior draws.

Every kernel family is written as a mixture ``sum_a amp_a exp(-D_a/2) exp(i U_a)``
(see :func:`cskgp.kernels.complex_form`).  Around an input ``x`` the
distance ``D`` is approximated by ``tau^T Lambda_x tau`` and the phase ``U``
by ``<xi_x, tau>``, which gives a Gaussian-in-frequency spectrogram per
component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .errors import FactorizationFailed, FieldUnavailable, ValidationError
from .kernels import NONPARAMETRIC, HyperValues, KernelSpec, complex_form, cross_cov
from .latent import WarpSpec, warp
from .numerics import BASE_JITTER, cholesky_with_jitter, finite_diff_grad, finite_diff_second_dir
from .numerics import quad_integral_1d

TWO_PI = 2.0 * math.pi


@dataclass
class SpectrogramPoint:
    """Per-component frequency mean ``xi`` (P, D), ``lam`` (P, D, D) and ``amp`` (P,) at ``x``."""

    x: np.ndarray
    xi: np.ndarray
    lam: np.ndarray
    amp: np.ndarray

    @property
    def n_components(self) -> int:
        return self.amp.shape[0]


def _hyper_at(spec: KernelSpec, x) -> HyperValues:
    return spec.values(jnp.asarray(x, dtype=jnp.float64).reshape(1, -1))


def local_params(spec: KernelSpec, x) -> SpectrogramPoint:
    """Closed-form local spectrogram parameters."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return local_params_many(spec, x[None, :])[0]


def _target(fam, h):
    # the quantity whose Jacobian enters xi (GSM) or Lambda (CSK)
    return h.mu[0] if fam == "GSM" else h.mu[0] / h.ell[0] ** 2


def _traced_values(spec: KernelSpec, X):
    fam = spec.family

    def one(xv):
        h = _hyper_at(spec, xv)
        if fam == "NSQ":
            return h.sigma[0], h.ell[0], h.mu[0], jnp.zeros(())
        return h.sigma[0], h.ell[0], h.mu[0], jax.jacfwd(lambda v: _target(fam, _hyper_at(spec, v)))(xv)

    try:
        out = jax.jit(jax.vmap(one))(jnp.asarray(X))
    except Exception as exc:  # noqa: BLE001 - any tracing failure means no Jacobian
        if fam != "NSQ":
            raise FieldUnavailable(f"hyperfunction Jacobian unavailable: {exc}") from exc
        # NSQ needs no derivatives, so an opaque field can still be evaluated pointwise
        hs = [_hyper_at(spec, xv) for xv in X]
        out = tuple(np.stack([np.asarray(h[k])[0] for h in hs]) for k in range(3)) + (np.zeros(len(X)),)
    out = tuple(np.asarray(a) for a in out)
    if fam != "NSQ" and not np.all(np.isfinite(out[3])):
        raise FieldUnavailable("hyperfunction Jacobian is not finite")
    return out


def local_params_many(spec: KernelSpec, X) -> list:
    """:func:`local_params` at each row of ``X`` (N, D), sharing one compiled evaluation."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    D = X.shape[1]
    fam = spec.family
    if fam in ("SE", "SM"):
        inv = 1.0 / spec.ell**2
        lam = np.stack([np.diag(r) for r in inv])
        mu = np.array(spec.mu, float).reshape(-1, D)
        return [SpectrogramPoint(x, mu.copy(), lam.copy(), spec.sigma**2) for x in X]
    if fam not in NONPARAMETRIC:
        raise ValidationError(f"no spectrogram for {fam}")
    sig, ells, mus, Js = _traced_values(spec, X)
    pts = []
    for i, x in enumerate(X):
        ell, amp, mu = ells[i], sig[i] ** 2, mus[i]
        P = amp.shape[0]
        inv = np.stack([np.diag(1.0 / ell[p] ** 2) for p in range(P)])
        if fam == "NSQ":
            pts.append(SpectrogramPoint(x, np.zeros((P, D)), 0.5 * inv, amp))
        elif fam == "GSM":
            J = Js[i]  # (P, D, D): d mu_pa / d x_b
            pts.append(SpectrogramPoint(x, mu + np.einsum("pab,a->pb", J, x), 0.5 * inv, amp))
        else:
            J = Js[i]
            lam = np.stack([0.5 * (inv[p] + J[p].T @ np.diag(ell[p] ** 2) @ J[p]) for p in range(P)])
            pts.append(SpectrogramPoint(x, mu / ell**2, lam, amp))
    return pts


def _jacobian(fn, x) -> np.ndarray:
    try:
        J = np.asarray(jax.jacfwd(fn)(jnp.asarray(x)))
    except Exception as exc:  # noqa: BLE001 - any tracing failure means no Jacobian
        raise FieldUnavailable(f"hyperfunction Jacobian unavailable: {exc}") from exc
    if not np.all(np.isfinite(J)):
        raise FieldUnavailable("hyperfunction Jacobian is not finite")
    return J


def dgp_se_local_params(warp_fn: Callable, x, Sigma, weight: float = 1.0) -> SpectrogramPoint:
    """Spectrogram of ``w^2 exp(-(f(x)-f(x'))^T Sigma^{-1} (f(x)-f(x')) / 2)``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    Jf = np.atleast_2d(_jacobian(lambda xv: jnp.atleast_1d(warp_fn(xv)), x))
    Sinv = np.linalg.inv(np.atleast_2d(Sigma))
    lam = Jf.T @ Sinv @ Jf
    return SpectrogramPoint(x, np.zeros((1, x.size)), lam[None], np.array([weight**2]))


def dgp_se_form(warp_fn: Callable, Sigma, weight: float = 1.0):
    """``(amp, D, U)`` callable of a DGP-SE kernel, for the finite-difference oracle."""
    Sinv = jnp.linalg.inv(jnp.atleast_2d(jnp.asarray(Sigma, dtype=jnp.float64)))

    def form(x1, x2):
        df = jnp.atleast_1d(warp_fn(x1)) - jnp.atleast_1d(warp_fn(x2))
        return jnp.array([weight**2]), jnp.array([df @ Sinv @ df]), jnp.zeros(1)
    return form


def kernel_form(spec: KernelSpec, jit: bool = True):
    """``(amp, D, U)`` of ``spec`` at one pair of inputs, each of shape (P,).

    The jitted form captures the field values at trace time; rebuild it
    after mutating the field.
    """

    def form(x1, x2):
        a = jnp.asarray(x1, dtype=jnp.float64).reshape(1, -1)
        b = jnp.asarray(x2, dtype=jnp.float64).reshape(1, -1)
        amp, D, U = complex_form(spec.family, a, spec.values(a), b, spec.values(b))
        return amp[0, 0], D[0, 0], U[0, 0]
    return jax.jit(form) if jit else form


def local_params_fd_oracle(spec, x, h_grad=None, h_curv=None) -> SpectrogramPoint:
    """Local parameters by finite differences along the anti-diagonal ``(x+t/2, x-t/2)``.

    ``spec`` is a KernelSpec or a form callable ``(x1, x2) -> (amp, D, U)``.
    ``xi`` is the gradient of ``U`` at ``t=0``; ``lam`` is half the Hessian of
    ``D``, with off-diagonal entries recovered by polarization.
    """
    form = kernel_form(spec) if isinstance(spec, KernelSpec) else spec
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    Dm = x.size
    scale = 1.0 + float(np.max(np.abs(x)))
    h_grad = 1e-5 * scale if h_grad is None else h_grad
    h_curv = 1e-3 * scale if h_curv is None else h_curv

    def at(t):
        amp, D, U = form(x + t / 2.0, x - t / 2.0)
        return np.asarray(amp), np.asarray(D), np.asarray(U)

    amp, _, _ = at(np.zeros(Dm))
    P = amp.shape[0]
    xi = np.zeros((P, Dm))
    lam = np.zeros((P, Dm, Dm))
    t0 = np.zeros(Dm)
    eye = np.eye(Dm)
    for p in range(P):
        xi[p] = finite_diff_grad(lambda t: at(t)[2][p], t0, h_grad)

        def Dp(t, p=p):
            return at(t)[1][p]
        for a in range(Dm):
            lam[p, a, a] = 0.5 * finite_diff_second_dir(Dp, t0, eye[a], h_curv)
        for a in range(Dm):
            for b in range(a + 1, Dm):
                plus = 0.5 * finite_diff_second_dir(Dp, t0, eye[a] + eye[b], h_curv)
                minus = 0.5 * finite_diff_second_dir(Dp, t0, eye[a] - eye[b], h_curv)
                lam[p, a, b] = lam[p, b, a] = 0.25 * (plus - minus)
    return SpectrogramPoint(x, xi, lam, amp)


def spectrogram_eval(pt: SpectrogramPoint, omega) -> np.ndarray:
    """Approximate Wigner distribution at frequencies ``omega`` (cycles per unit).

    Each component contributes ``amp * N(omega | xi / 2pi, lam / (4 pi^2))``,
    the exact Fourier transform of its locally Gaussian kernel estimate.
    ``omega`` is (D,) or (K, D); a 1-d input also accepts a flat (K,) grid.
    """
    omega = np.asarray(omega, dtype=np.float64)
    Dm = pt.x.size
    single = omega.ndim == 0 or (omega.ndim == 1 and Dm > 1)
    om = omega.reshape(-1, Dm)
    total = np.zeros(om.shape[0])
    for a in range(pt.n_components):
        cov = pt.lam[a] / (4.0 * math.pi**2)
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise FactorizationFailed("spectrogram precision matrix is not positive definite") from exc
        r = np.linalg.solve(L, (om - pt.xi[a] / TWO_PI).T)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        total += pt.amp[a] * np.exp(-0.5 * np.sum(r**2, axis=0) - 0.5 * logdet - 0.5 * Dm * math.log(TWO_PI))
    return total[0] if single else total


def wigner_numeric(spec, x: float, omegas, n_nodes: int = 2001, half_width: Optional[float] = None) -> np.ndarray:
    """Numerical Wigner transform of the complex kernel form at a 1-d input ``x``."""
    form = kernel_form(spec) if isinstance(spec, KernelSpec) else spec
    x = float(np.ravel(x)[0])
    if half_width is None:
        if not isinstance(spec, KernelSpec):
            raise ValidationError("half_width is required for a bare kernel form")
        ell = np.asarray(spec.values(jnp.array([[x]])).ell)
        half_width = 8.0 * math.sqrt(2.0) * float(np.max(ell))
    taus = np.linspace(-half_width, half_width, n_nodes)
    vmapped = jax.vmap(lambda t: form(jnp.array([x + t / 2.0]), jnp.array([x - t / 2.0])))
    amp, D, U = (np.asarray(a) for a in vmapped(jnp.asarray(taus)))
    k = np.sum(amp * np.exp(-0.5 * D) * np.exp(1j * U), axis=-1)
    cache = {"nodes": taus, "k": k}

    def integrand_at(w):
        def f(nodes):
            if nodes.shape != cache["nodes"].shape or not np.allclose(nodes, cache["nodes"], rtol=0, atol=0):
                raise ValidationError("quadrature nodes changed")
            return cache["k"] * np.exp(-2j * math.pi * w * nodes)
        return f

    return np.array([quad_integral_1d(integrand_at(float(w)), -half_width, half_width, n_nodes).real
                     for w in np.ravel(omegas)])


@dataclass
class SpectrogramGrid:
    """``values[k, i]`` is the spectrogram at ``omega[k]`` and ``x[i]``."""

    x: np.ndarray
    omega: np.ndarray
    values: np.ndarray
    amp_total: np.ndarray = field(default=None)

    def column_integrals(self) -> np.ndarray:
        return np.trapezoid(self.values, self.omega, axis=0)

    def triples(self):
        X, W = np.meshgrid(self.x, self.omega)
        return np.column_stack([X.ravel(), W.ravel(), self.values.ravel()])


def default_omega_grid(points: Sequence[SpectrogramPoint], n_min: int = 64, n_sd: float = 5.0, n_max: int = 4096):
    centers, sds = [], []
    for pt in points:
        for a in range(pt.n_components):
            centers.append(pt.xi[a, 0] / TWO_PI)
            sds.append(math.sqrt(pt.lam[a, 0, 0]) / TWO_PI)
    centers, sds = np.array(centers), np.array(sds)
    lo = float(np.min(centers - n_sd * sds))
    hi = float(np.max(centers + n_sd * sds))
    n = int(min(n_max, max(n_min, math.ceil((hi - lo) / (0.5 * sds.min())) + 1)))
    return np.linspace(lo, hi, n)


def spectrogram_grid(spec: KernelSpec, x_grid, omega=None, points=None) -> SpectrogramGrid:
    """Spectrogram over a 1-d input grid; ``points`` may carry precomputed local parameters."""
    x_grid = np.asarray(x_grid, dtype=np.float64).ravel()
    pts = points if points is not None else local_params_many(spec, x_grid[:, None])
    omega = default_omega_grid(pts) if omega is None else np.asarray(omega, float).ravel()
    values = np.column_stack([spectrogram_eval(pt, omega[:, None]) for pt in pts])
    return SpectrogramGrid(x_grid, omega, values, np.array([pt.amp.sum() for pt in pts]))


# --- covariance-function DGP prior draws --------------------------------------


@dataclass(frozen=True)
class DgpStackSpec:
    """``depth`` extra layers whose hyperfunctions are warped previous-layer draws.

    Layer ``l >= 1`` uses ``ell = ell_warp(ell_gain * f_{l-1})`` and, for CSK,
    ``mu = mu_warp(mu_gain * f_{l-1})``; layer 0 uses the constants obtained by
    warping zero.
    """

    depth: int = 1
    family: str = "NSQ"
    ell_warp: WarpSpec = WarpSpec("exp", math.log(0.3))
    ell_gain: float = 1.0
    mu_warp: WarpSpec = WarpSpec("identity", 0.5)
    mu_gain: float = 0.5

    def __post_init__(self):
        if not 0 <= self.depth <= 8:
            raise ValidationError("depth must be in [0, 8]")
        if self.family.upper() not in ("NSQ", "CSK"):
            raise ValidationError("DGP layers use NSQ or CSK correlations")
        object.__setattr__(self, "family", self.family.upper())


def _layer_hyper(stack: DgpStackSpec, prev) -> HyperValues:
    n = prev.shape[0]
    ell = warp(stack.ell_warp, stack.ell_gain * prev)
    mu = warp(stack.mu_warp, stack.mu_gain * prev) if stack.family == "CSK" else jnp.zeros(n)
    return HyperValues(jnp.ones((n, 1)), ell.reshape(n, 1, 1), mu.reshape(n, 1, 1))


def sample_dgp_prior(stack: DgpStackSpec, grid, rng: np.random.Generator, return_grams: bool = False):
    """Draw ``f_0, ..., f_depth`` on ``grid`` (N, D); hyperfunctions act on every dimension."""
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if grid.shape[0] == 1 and grid.shape[1] > 1:
        grid = grid.T
    n, D = grid.shape
    if n > 10_000:
        raise ValidationError("grid is limited to 10^4 points")
    X = jnp.asarray(grid)
    prev = jnp.zeros(n)
    layers, grams = [], []
    for _ in range(stack.depth + 1):
        h = _layer_hyper(stack, prev)
        h = HyperValues(h.sigma, jnp.repeat(h.ell, D, axis=2), jnp.repeat(h.mu, D, axis=2))
        K = np.asarray(cross_cov(stack.family, X, h, X, h))
        chol = cholesky_with_jitter(K, BASE_JITTER)
        f = chol.L @ rng.standard_normal(n)
        layers.append(f)
        grams.append(K)
        prev = jnp.asarray(f)
    return (layers, grams) if return_grams else layers
