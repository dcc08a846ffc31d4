"""Brute-force cross-checks of the closed forms, runnable from the command line."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, List

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from ..kernels import KernelSpec, cross_cov, csk_correlation, gram, oracle_correlation, point_hyper
from ..latent import HyperFunctionField
from ..numerics import cholesky_with_jitter, finite_diff_grad
from ..spectrogram import kernel_form, local_params, local_params_fd_oracle, spectrogram_eval, wigner_numeric


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


def _convolution(rng) -> float:
    worst = 0.0
    for _ in range(5):
        hi = point_hyper(1.0, rng.uniform(0.2, 5.0), rng.uniform(-3.0, 3.0))
        hj = point_hyper(1.0, rng.uniform(0.2, 5.0), rng.uniform(-3.0, 3.0))
        xi = rng.uniform(-2.0, 2.0)
        xj = xi + rng.uniform(-4.0, 4.0)
        worst = max(worst, abs(oracle_correlation(hi, hj, xi, xj) - csk_correlation(hi, hj, xi, xj)))
    return worst


def _nsq_lattice(rng) -> float:
    f = HyperFunctionField.default("CSK", 1, rng.uniform(-2, 2, (8, 1)))
    f.v = rng.normal(size=f.v.shape)
    mu_row = [i for i, (role, _, _) in enumerate(f.roles) if role == "mu"]
    f.v[mu_row] = 0.0
    X = rng.uniform(-2, 2, (30, 1))
    nsq_field = HyperFunctionField("NSQ", 1, [f.specs[i] for i, r in enumerate(f.roles) if r[0] != "mu"], f.z,
                                   f.v[[i for i, r in enumerate(f.roles) if r[0] != "mu"]])
    a = gram(KernelSpec("CSK", 1, field=f), X)
    b = gram(KernelSpec("NSQ", 1, field=nsq_field), X)
    return float(np.max(np.abs(a - b)))


def _psd(rng) -> float:
    worst = 0.0
    for fam in ("NSQ", "GSM", "CSK"):
        P = 1 if fam == "NSQ" else 2
        f = HyperFunctionField.default(fam, P, rng.uniform(-2, 2, (10, 2)), medians={"mu": 1.0})
        f.v = rng.normal(size=f.v.shape)
        X = rng.uniform(-2, 2, (80, 2))
        K = gram(KernelSpec(fam, P, field=f), X)
        lam = np.linalg.eigvalsh(K).min()
        worst = max(worst, max(0.0, -lam) / (np.trace(K) / K.shape[0]))
    return worst


def _sm_spectrogram(rng) -> float:
    spec = KernelSpec.sm(rng.uniform(0.2, 1.0, 2), rng.uniform(0.3, 1.5, (2, 1)), rng.uniform(-3, 3, (2, 1)))
    omegas = np.linspace(-1.5, 1.5, 32)
    pt = local_params(spec, [0.3])
    return float(np.max(np.abs(spectrogram_eval(pt, omegas) - wigner_numeric(spec, 0.3, omegas))))


def _table_closed_forms(rng) -> float:
    worst = 0.0
    for fam in ("NSQ", "GSM", "CSK"):
        f = HyperFunctionField.default(fam, 1, rng.uniform(-2, 2, (6, 1)), medians={"mu": 1.0})
        f.v = 0.5 * rng.normal(size=f.v.shape)
        spec = KernelSpec(fam, 1, field=f)
        form = kernel_form(spec)
        for x in rng.uniform(-1.5, 1.5, 3):
            a, b = local_params(spec, [x]), local_params_fd_oracle(form, [x])
            worst = max(worst, float(np.max(np.abs(a.lam - b.lam) / np.abs(b.lam))),
                        float(np.max(np.abs(a.xi - b.xi) / (np.abs(b.xi) + 1e-8))))
    return worst


def _gradients(rng, which: str) -> float:
    from ..inference import dsvi
    from ..inference import model as mdl

    X = rng.uniform(-1, 1, (6, 1))
    y = np.sin(3 * X[:, 0])
    lay = mdl.ModelLayout.default("CSK", 1, 1, medians={"mu": 1.0})
    h = mdl.init_hypers(lay, np.linspace(-1, 1, 5)[:, None], np.linspace(-1, 1, 4)[:, None], beta=10.0)
    st = {k: jnp.asarray(0.5 * rng.normal(size=v.shape)) for k, v in mdl.init_state(lay, h).items()}
    if which == "energy":
        noise = mdl.draw_noise(lay, h, 6, jax.random.PRNGKey(0))
        flat, unravel = ravel_pytree(st)
        fn = lambda x: mdl.energy(lay, h, unravel(jnp.asarray(x)), X, y, 12, noise)
    else:
        vs = dsvi.init_vstate(lay, h, state=st, theta_scale=0.3, f_scale=0.5)
        noise = dsvi.draw_vnoise(lay, h, vs, 6, jax.random.PRNGKey(0))
        flat, unravel = ravel_pytree(vs)
        fn = lambda x: dsvi.dsvi_elbo(lay, h, unravel(jnp.asarray(x)), X, y, 12, noise)
    g = np.asarray(jax.grad(fn)(flat))
    gf = finite_diff_grad(lambda x: float(fn(x)), np.asarray(flat))
    return float(np.max(np.abs(g - gf)) / np.max(np.abs(gf)))


def _jitter(rng) -> float:
    A = rng.normal(size=(50, 3))
    K = A @ A.T
    c = cholesky_with_jitter(K)
    target = K + c.applied_jitter * np.eye(K.shape[0])
    return float(np.max(np.abs(c.reconstruct() - target)) / np.mean(np.diag(K)))


CHECKS: List = [
    ("convolution integral vs closed-form correlation", _convolution, 1e-4),
    ("CSK with zero frequency vs NSQ", _nsq_lattice, 1e-12),
    ("Gram positive semidefinite (relative)", _psd, 1e-8),
    ("SM spectrogram vs numeric Wigner transform", _sm_spectrogram, 1e-3),
    ("local parameters vs finite differences", _table_closed_forms, 1e-4),
    ("energy gradient vs finite differences", lambda r: _gradients(r, "energy"), 1e-4),
    ("ELBO gradient vs finite differences", lambda r: _gradients(r, "elbo"), 1e-3),
    ("jittered Cholesky reconstruction", _jitter, 1e-10),
]


def run_all(seed: int = 0, checks=None) -> List[CheckResult]:
    out = []
    for name, fn, tol in checks or CHECKS:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            err = float(fn(rng))
        except Exception:  # a crash counts as a failed comparison
            err = math.inf
        out.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return out


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'error':>10}  {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:>10.3e}  {r.tolerance:>8.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
