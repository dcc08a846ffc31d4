"""Doubly stochastic variational inference in whitened coordinates.

``q(v_theta_d) = N(m_theta_d, S_theta_d S_theta_d^T)`` for every
hyperfunction and ``q(v_f) = N(m_f, S_f S_f^T)``, all against standard
normal priors.  One hyperfunction draw per evaluation is pushed through
the conditional of the first layer.  With ``estimator="marginal"`` the
draw of ``f`` given ``theta`` is integrated out in closed form; with
``"sample"`` both ``u_f`` and ``f`` are drawn too.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np
import optax

from ..errors import FactorizationFailed, ValidationError
from ..numerics import BASE_JITTER, JITTER_CAP, all_finite
from . import model as mdl

log = logging.getLogger(__name__)

S_DIAG_FLOOR = 1e-6
ESTIMATORS = ("marginal", "sample")


def init_vstate(layout: mdl.ModelLayout, hypers: dict, f_scale: float = 1.0,
                theta_scale: float = 0.1, state: Optional[dict] = None) -> dict:
    """Variational parameters; means from ``state`` (default zero)."""
    state = mdl.init_state(layout, hypers) if state is None else state
    H, M_t = state["v_theta"].shape
    M_f = state["u_f"].shape[0]
    return {
        "m_f": jnp.asarray(state["u_f"], dtype=jnp.float64),
        "S_f": f_scale * jnp.eye(M_f),
        "m_theta": jnp.asarray(state["v_theta"], dtype=jnp.float64),
        "S_theta": theta_scale * jnp.broadcast_to(jnp.eye(M_t), (H, M_t, M_t)),
    }


def _tril(S):
    return jnp.tril(S)


def kl_whitened(m, S):
    """``KL(N(m, S S^T) || N(0, I))`` for lower-triangular ``S``; batched over leading axes."""
    S = _tril(S)
    M = m.shape[-1]
    tr = jnp.sum(S**2, axis=(-2, -1))
    logdet = 2.0 * jnp.sum(jnp.log(jnp.abs(jnp.diagonal(S, axis1=-2, axis2=-1))), axis=-1)
    return 0.5 * (tr + jnp.sum(m**2, axis=-1) - M - logdet)


def draw_vnoise(layout: mdl.ModelLayout, hypers: dict, vstate: dict, batch_size: int, key) -> dict:
    k1, k2, k3 = jax.random.split(key, 3)
    noise = mdl.draw_noise(layout, hypers, batch_size, k1)
    noise["v_theta"] = jax.random.normal(k2, vstate["m_theta"].shape)
    noise["v_f"] = jax.random.normal(k3, vstate["m_f"].shape)
    return noise


def dsvi_elbo(layout: mdl.ModelLayout, hypers: dict, vstate: dict, Xb, yb, n_total: int,
              noise: dict, jitter: float = BASE_JITTER, estimator: str = "marginal"):
    """Minibatch-scaled single-sample ELBO estimate."""
    if not layout.whiten_f:
        raise ValidationError("variational inference works in whitened coordinates")
    v_theta = vstate["m_theta"] + jnp.einsum("hij,hj->hi", _tril(vstate["S_theta"]), noise["v_theta"])
    S_f = _tril(vstate["S_f"])
    if estimator == "sample":
        state = {"v_theta": v_theta, "u_f": vstate["m_f"] + S_f @ noise["v_f"]}
        fw = mdl.forward(layout, hypers, state, Xb, noise["theta"], jitter)
        f_hat = fw.mean + jnp.sqrt(fw.var) * noise["f"]
        lik = jnp.sum(mdl.gaussian_loglik(yb, f_hat, hypers["log_beta"]))
    elif estimator == "marginal":
        state = {"v_theta": v_theta, "u_f": vstate["m_f"]}
        fw = mdl.forward(layout, hypers, state, Xb, noise["theta"], jitter)
        var = fw.var + jnp.sum((S_f.T @ fw.A) ** 2, axis=0)
        lik = jnp.sum(mdl.expected_loglik(yb, fw.mean, var, hypers["log_beta"]))
    else:
        raise ValidationError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    kl = kl_whitened(vstate["m_f"], vstate["S_f"]) + jnp.sum(
        kl_whitened(vstate["m_theta"], vstate["S_theta"]))
    return n_total / Xb.shape[0] * lik - kl


def clamp_vstate(vstate: dict) -> dict:
    def fix(S):
        S = _tril(S)
        d = jnp.diagonal(S, axis1=-2, axis2=-1)
        eye = jnp.eye(S.shape[-1], dtype=bool)
        return jnp.where(eye, jnp.broadcast_to(jnp.maximum(d, S_DIAG_FLOOR)[..., None, :], S.shape), S)

    return dict(vstate, S_f=fix(vstate["S_f"]), S_theta=fix(vstate["S_theta"]))


@dataclass
class DsviResult:
    vstate: dict
    hypers: dict
    layout: mdl.ModelLayout
    elbo_trace: list = field(default_factory=list)
    jitter: float = BASE_JITTER


def learnable_keys(layout: mdl.ModelLayout) -> tuple:
    from .sghmc import learnable_keys as keys

    return keys(layout)


def fit_dsvi(X, y, layout: mdl.ModelLayout, hypers: dict, iterations: int, lr: float = 1e-3,
             minibatch: int = 256, seed: int = 0, vstate: Optional[dict] = None,
             learn_hypers: bool = True, estimator: str = "marginal", chunk: int = 100,
             progress: Optional[Callable] = None) -> DsviResult:
    """Adam ascent on the ELBO, jointly over variational parameters and hyperparameters."""
    X = jnp.asarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    y = jnp.asarray(np.asarray(y, dtype=np.float64).ravel())
    n = X.shape[0]
    if n == 0 or n != y.shape[0]:
        raise ValidationError("need a nonempty dataset with matching X and y")
    if estimator not in ESTIMATORS:
        raise ValidationError(f"unknown estimator {estimator!r}")
    B = min(int(minibatch), n)
    hypers = jax.tree_util.tree_map(jnp.asarray, hypers)
    vstate = init_vstate(layout, hypers) if vstate is None else jax.tree_util.tree_map(jnp.asarray, vstate)
    keys = learnable_keys(layout) if learn_hypers else ()
    opt = optax.adam(lr)
    params = {"v": vstate, "h": {k: hypers[k] for k in keys}}
    opt_state = opt.init(params)

    def objective(params, fixed, idx, noise, jitter):
        h = dict(fixed, **params["h"])
        return dsvi_elbo(layout, h, params["v"], X[idx], y[idx], n, noise, jitter, estimator)

    value_grad = jax.value_and_grad(objective)

    def run(params, opt_state, fixed, key, jitter, n_steps):
        def body(carry, k):
            params, opt_state = carry
            kb, kn = jax.random.split(k)
            idx = jnp.arange(n) if B >= n else jax.random.choice(kb, n, (B,), replace=False)
            noise = draw_vnoise(layout, dict(fixed, **params["h"]), params["v"], B, kn)
            val, g = value_grad(params, fixed, idx, noise, jitter)
            updates, opt_state = opt.update(jax.tree_util.tree_map(lambda a: -a, g), opt_state, params)
            params = optax.apply_updates(params, updates)
            params = dict(params, v=clamp_vstate(params["v"]))
            return (params, opt_state), val

        return jax.lax.scan(body, (params, opt_state), jax.random.split(key, n_steps))

    runners = {}
    key = jax.random.PRNGKey(seed)
    fixed = {k: v for k, v in hypers.items() if k not in keys}
    jitter = BASE_JITTER
    trace = []
    done = 0
    while done < iterations:
        n_run = min(chunk, iterations - done)
        if n_run not in runners:
            runners[n_run] = jax.jit(lambda p, o, f, k, j, _n=n_run: run(p, o, f, k, j, _n))
        key, kc = jax.random.split(key)
        while True:
            (p_new, o_new), vals = runners[n_run](params, opt_state, fixed, kc, jitter)
            if all_finite((p_new, vals)):
                break
            jitter *= 2.0
            if jitter > JITTER_CAP:
                raise FactorizationFailed("ELBO became non-finite at every jitter level")
            log.info("non-finite ELBO chunk at iteration %d; jitter raised to %g", done, jitter)
        params, opt_state = p_new, o_new
        trace.extend(np.asarray(vals).tolist())
        done += n_run
        if progress is not None:
            progress(done, iterations, trace[-1])
    hypers = dict(fixed, **params["h"])
    return DsviResult(params["v"], hypers, layout, trace, jitter)


def sample_states(vstate: dict, n_samples: int, key) -> list:
    """Draws of ``(v_theta, u_f)`` from the variational posterior."""
    out = []
    for k in jax.random.split(key, n_samples):
        k1, k2 = jax.random.split(k)
        e_t = jax.random.normal(k1, vstate["m_theta"].shape)
        e_f = jax.random.normal(k2, vstate["m_f"].shape)
        out.append({
            "v_theta": vstate["m_theta"] + jnp.einsum("hij,hj->hi", _tril(vstate["S_theta"]), e_t),
            "u_f": vstate["m_f"] + _tril(vstate["S_f"]) @ e_f,
        })
    return out
