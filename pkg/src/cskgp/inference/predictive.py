"""Predictive mixtures and the test metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from scipy.special import logsumexp

from ..errors import UntrainedModel, ValidationError
from ..numerics import BASE_JITTER, LOG_2PI
from . import model as mdl

CHUNK = 512


@dataclass
class PredictiveResult:
    """Uniform Gaussian mixture per test point; components are posterior samples."""

    means: np.ndarray        # (S, N)
    variances: np.ndarray    # (S, N), observation noise included
    mse: Optional[float] = None
    mean_loglik: Optional[float] = None

    @property
    def mean(self) -> np.ndarray:
        return self.means.mean(axis=0)

    @property
    def variance(self) -> np.ndarray:
        m = self.mean
        return np.mean(self.variances + self.means**2, axis=0) - m**2

    def score(self, y) -> "PredictiveResult":
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.shape[0] != self.means.shape[1]:
            raise ValidationError("targets do not match the number of test points")
        self.mse = float(np.mean((self.mean - y) ** 2))
        self.mean_loglik = float(np.mean(mixture_logpdf(y, self.means, self.variances)))
        return self


def mixture_logpdf(y, means, variances) -> np.ndarray:
    """Per-point log density of the uniform mixture ``sum_s N(y | means_s, variances_s) / S``."""
    means = np.atleast_2d(means)
    variances = np.atleast_2d(variances)
    comp = -0.5 * (LOG_2PI + np.log(variances) + (y - means) ** 2 / variances)
    return logsumexp(comp, axis=0) - math.log(means.shape[0])


def _moments_fn(layout, theta_mode):
    def fn(hypers, state, X, key, jitter, S_f):
        if theta_mode == "sample":
            eps = jax.random.normal(key, (layout.n_functions, X.shape[0] + hypers["z_f"].shape[0]))
        else:
            eps = None
        fw = mdl.forward(layout, hypers, state, X, eps, jitter)
        var = fw.var
        if S_f is not None:
            var = var + jnp.sum((jnp.tril(S_f).T @ fw.A) ** 2, axis=0)
        return fw.mean, var

    return fn


_CACHE = {}


def _jitted(layout, theta_mode, with_s):
    k = (layout, theta_mode, with_s)
    if k not in _CACHE:
        fn = _moments_fn(layout, theta_mode)
        if with_s:
            _CACHE[k] = jax.jit(fn)
        else:
            _CACHE[k] = jax.jit(lambda h, s, X, key, j: fn(h, s, X, key, j, None))
    return _CACHE[k]


def predict(layout: mdl.ModelLayout, samples: Sequence[dict], X_test, y_test=None,
            theta_mode: str = "sample", seed: int = 0, jitter: Optional[float] = None,
            chunk: int = CHUNK) -> PredictiveResult:
    """Predictive mixture at ``X_test`` (standardized units).

    ``samples`` are dicts with ``state`` and ``hypers`` and optionally
    ``S_f``, a whitened covariance factor of ``u_f`` to integrate over (used
    for variational posteriors).  Each sample contributes one component
    ``N(mean_s, var_s + 1/beta_s)``; with ``theta_mode="sample"`` the
    hyperfunctions are drawn jointly over each chunk of test points and
    ``z_f``, otherwise they sit at their conditional means.
    """
    if not samples:
        raise UntrainedModel("no posterior samples to predict with")
    if theta_mode not in ("sample", "mean"):
        raise ValidationError(f"unknown theta_mode {theta_mode!r}")
    X_test = np.atleast_2d(np.asarray(X_test, dtype=np.float64))
    if X_test.shape[1] != layout.input_dim:
        raise ValidationError(f"test inputs have dimension {X_test.shape[1]}, model expects {layout.input_dim}")
    n = X_test.shape[0]
    jitter = BASE_JITTER if jitter is None else jitter
    key = jax.random.PRNGKey(seed)
    means = np.empty((len(samples), n))
    variances = np.empty((len(samples), n))
    for s, smp in enumerate(samples):
        hypers, state = smp["hypers"], smp["state"]
        S_f = smp.get("S_f")
        fn = _jitted(layout, theta_mode, S_f is not None)
        noise_var = float(np.exp(hypers["log_beta"])) ** -1
        for lo in range(0, n, chunk):
            key, k = jax.random.split(key)
            Xc = jnp.asarray(X_test[lo:lo + chunk])
            args = (hypers, state, Xc, k, jitter) + ((S_f,) if S_f is not None else ())
            m, v = fn(*args)
            means[s, lo:lo + chunk] = np.asarray(m)
            variances[s, lo:lo + chunk] = np.asarray(v) + noise_var
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
        from ..errors import NumericalError

        raise NumericalError("non-finite predictive moments")
    res = PredictiveResult(means, variances)
    if y_test is not None:
        res.score(y_test)
    return res
