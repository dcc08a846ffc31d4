"""Stochastic-gradient HMC over the inducing values, with windowed MCEM.

The sampler runs in chunks of ``em_every`` steps.  Each chunk is a jitted
``lax.scan``; between chunks the host checks for non-finite values (and
re-runs the chunk with doubled jitter if needed), stores thinned snapshots
in the window and takes one MCEM step on the hyperparameters.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np
import optax
from jax.flatten_util import ravel_pytree

from ..errors import EmptyWindow, FactorizationFailed, ValidationError
from ..numerics import BASE_JITTER, JITTER_CAP, all_finite
from . import model as mdl

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    step_size: float = 5e-4
    friction: float = 0.05
    n_leapfrog: int = 5
    minibatch: int = 256
    window_len: int = 30
    thin: int = 10
    em_every: int = 50
    burn_in: int = 2000
    n_samples: int = 3000
    mcem_lr: float = 1e-3
    seed: int = 0
    precondition: bool = False
    learn_hypers: bool = True

    def __post_init__(self):
        for name in ("step_size", "friction"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("n_leapfrog", "minibatch", "window_len", "thin", "em_every"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be at least 1")
        if self.burn_in < 0 or self.n_samples < 0:
            raise ValidationError("burn_in and n_samples must be non-negative")
        if self.mcem_lr < 0:
            raise ValidationError("mcem_lr must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class SampleWindow:
    """Fixed-capacity FIFO of recent snapshots."""

    def __init__(self, window_len: int, items=()):
        if window_len < 1:
            raise ValidationError("window_len must be at least 1")
        self.window_len = int(window_len)
        self._items = deque(items, maxlen=self.window_len)

    def push(self, item) -> None:
        self._items.append(item)

    def clear(self) -> None:
        self._items.clear()

    def draw(self, rng: np.random.Generator):
        if not self._items:
            raise EmptyWindow("the sample window is empty")
        return self._items[int(rng.integers(len(self._items)))]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]


def sghmc_step(x, momentum, grad_fn: Callable, cfg: SamplerConfig, key=None, noise=None,
               eta: Optional[float] = None, mass=None):
    """``n_leapfrog`` SGHMC substeps.

    Each substep updates ``momentum <- (1 - friction) momentum - eta grad + n``
    with ``n ~ N(0, 2 friction eta)``, then ``x <- x + momentum``.  The
    gradient callback receives ``(x, substep)``.  ``noise`` (n_leapfrog, dim)
    of standard normals overrides ``key``; ``mass`` is an optional diagonal
    preconditioner multiplying both the gradient and the noise variance.
    """
    eta = cfg.step_size if eta is None else eta
    if noise is None:
        if key is None:
            raise ValidationError("sghmc_step needs a key or explicit noise")
        noise = jax.random.normal(key, (cfg.n_leapfrog,) + jnp.shape(x))
    m = 1.0 if mass is None else mass
    a = cfg.friction
    scale = jnp.sqrt(2.0 * a * eta * m)
    for k in range(cfg.n_leapfrog):
        g = grad_fn(x, k)
        momentum = (1.0 - a) * momentum - eta * m * g + scale * noise[k]
        x = x + momentum
    return x, momentum


def sample_chain(grad_fn: Callable, x0, cfg: SamplerConfig, n_steps: int, key, eta=None):
    """Jitted trajectory of ``n_steps`` calls to :func:`sghmc_step` (positions after each)."""
    x0 = jnp.asarray(x0, dtype=jnp.float64)

    def body(carry, k):
        x, v = carry
        x, v = sghmc_step(x, v, grad_fn, cfg, key=k, eta=eta)
        return (x, v), x

    keys = jax.random.split(key, n_steps)
    _, xs = jax.jit(lambda c: jax.lax.scan(body, c, keys))((x0, jnp.zeros_like(x0)))
    return xs


# --- MCEM -----------------------------------------------------------------------


def hyper_optimizer(lr: float):
    return optax.adam(lr)


def mcem_update(window: SampleWindow, hypers: dict, lr: float, grad_fn: Callable,
                rng: np.random.Generator, opt_state=None):
    """One Adam ascent step on the hyperparameters given a random window snapshot.

    ``grad_fn(state, hypers)`` returns the gradient of the objective with
    respect to ``hypers``.  Returns ``(hypers, opt_state)``.
    """
    snap = window.draw(rng)
    state = snap["state"] if isinstance(snap, dict) and "state" in snap else snap
    opt = hyper_optimizer(lr)
    if opt_state is None:
        opt_state = opt.init(hypers)
    g = grad_fn(state, hypers)
    neg = jax.tree_util.tree_map(lambda a: -a, g)
    updates, opt_state = opt.update(neg, opt_state, hypers)
    return optax.apply_updates(hypers, updates), opt_state


# --- driver -----------------------------------------------------------------------


@dataclass
class SamplerResult:
    window: SampleWindow
    hypers: dict
    state: dict
    momentum: np.ndarray
    layout: mdl.ModelLayout
    energy_trace: list = field(default_factory=list)
    beta_trace: list = field(default_factory=list)
    jitter: float = BASE_JITTER
    n_steps: int = 0


def _effective_batch(cfg: SamplerConfig, n: int) -> int:
    return min(int(cfg.minibatch), n)


def _make_chunk(layout: mdl.ModelLayout, X, y, cfg: SamplerConfig, n_steps: int):
    X = jnp.asarray(X)
    y = jnp.asarray(y)
    n = X.shape[0]
    B = _effective_batch(cfg, n)
    eta = cfg.step_size / n

    def run(state, momentum, hypers, key, jitter, mass):
        flat, unravel = ravel_pytree(state)

        def energy_flat(xf, idx, noise):
            return mdl.energy(layout, hypers, unravel(xf), X[idx], y[idx], n, noise, jitter)

        grad_e = jax.grad(energy_flat)
        value_grad = jax.value_and_grad(energy_flat)

        def body(carry, k):
            x, v = carry
            kb, kn, ks = jax.random.split(k, 3)
            idx = jnp.stack([_batch_indices(kk, n, B) for kk in jax.random.split(kb, cfg.n_leapfrog)])
            noises = [mdl.draw_noise(layout, hypers, B, kk) for kk in jax.random.split(kn, cfg.n_leapfrog)]
            x, v = sghmc_step(x, v, lambda xf, j: grad_e(xf, idx[j], noises[j]), cfg, key=ks,
                              eta=eta, mass=mass)
            e, g = value_grad(x, idx[-1], noises[-1])
            return (x, v), (x, e, g)

        keys = jax.random.split(key, n_steps)
        (x, v), (xs, es, gs) = jax.lax.scan(body, (flat, momentum), keys)
        return x, v, xs, es, gs

    return jax.jit(run)


def _batch_indices(key, n, B):
    if B >= n:
        return jnp.arange(n)
    return jax.random.choice(key, n, (B,), replace=False)


def _make_mcem_grad(layout: mdl.ModelLayout, X, y, cfg: SamplerConfig, learn_keys):
    X = jnp.asarray(X)
    y = jnp.asarray(y)
    n = X.shape[0]

    def obj(sub, rest, state, idx, jitter):
        hypers = dict(rest, **sub)
        return mdl.mean_path_objective(layout, hypers, state, X[idx], y[idx], n, jitter,
                                       include_prior=False)

    g = jax.jit(jax.grad(obj))

    def grad_fn(state, hypers, idx, jitter):
        sub = {k: hypers[k] for k in learn_keys}
        rest = {k: v for k, v in hypers.items() if k not in learn_keys}
        return g(sub, rest, state, idx, jitter)

    return grad_fn


def learnable_keys(layout: mdl.ModelLayout) -> tuple:
    if layout.nonparametric:
        return ("log_beta", "log_lam", "log_s", "z_theta", "z_f")
    return ("log_beta", "log_sigma", "log_ell", "mu", "z_f")


def run_sghmc(X, y, layout: mdl.ModelLayout, hypers: dict, cfg: SamplerConfig,
              state0: Optional[dict] = None, progress: Optional[Callable] = None) -> SamplerResult:
    """Burn-in then sampling; snapshots every ``thin`` steps, MCEM every ``em_every``.

    The window is cleared at the end of burn-in so that it only ever holds
    post-burn-in snapshots once sampling starts.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise ValidationError("need a nonempty dataset with matching X and y")
    state = mdl.init_state(layout, hypers) if state0 is None else state0
    state = jax.tree_util.tree_map(jnp.asarray, state)
    hypers = jax.tree_util.tree_map(jnp.asarray, hypers)
    flat, unravel = ravel_pytree(state)
    momentum = jnp.zeros_like(flat)
    window = SampleWindow(cfg.window_len)
    total = cfg.burn_in + cfg.n_samples
    chunk_len = cfg.em_every
    learn = learnable_keys(layout)
    mcem_grad = _make_mcem_grad(layout, X, y, cfg, learn)
    opt_state = hyper_optimizer(cfg.mcem_lr).init({k: hypers[k] for k in learn})
    rng = np.random.default_rng(cfg.seed)
    key = jax.random.PRNGKey(cfg.seed)
    B = _effective_batch(cfg, X.shape[0])
    jitter = BASE_JITTER
    mass = jnp.ones_like(flat)
    grad_var = None
    result = SamplerResult(window, hypers, state, np.asarray(momentum), layout, jitter=jitter)
    step = 0
    chunks = {}
    while step < total:
        n_run = min(chunk_len, total - step)
        if n_run not in chunks:
            chunks[n_run] = _make_chunk(layout, X, y, cfg, n_run)
        key, kc = jax.random.split(key)
        while True:
            x, v, xs, es, gs = chunks[n_run](state, momentum, hypers, kc, jitter, mass)
            if all_finite((x, v, es)):
                break
            jitter *= 2.0
            if jitter > JITTER_CAP:
                raise FactorizationFailed("sampler produced non-finite values at every jitter level")
            log.info("non-finite sampler chunk at step %d; jitter raised to %g", step, jitter)
        xs, es = np.asarray(xs), np.asarray(es)
        state, momentum = unravel(x), v
        for i in range(n_run):
            if (step + i + 1) % cfg.thin == 0:
                window.push({"state": unravel(jnp.asarray(xs[i])), "hypers": hypers})
        result.energy_trace.extend(es.tolist())
        step += n_run
        if step == cfg.burn_in and cfg.burn_in > 0:
            window.clear()
            window.push({"state": state, "hypers": hypers})
        if cfg.precondition:
            gv = np.var(np.asarray(gs), axis=0) + 1e-12
            grad_var = gv if grad_var is None else 0.9 * grad_var + 0.1 * gv
            m = 1.0 / np.sqrt(grad_var)
            mass = jnp.asarray(m / np.mean(m))
        if cfg.learn_hypers and cfg.mcem_lr > 0 and len(window):
            idx = jnp.asarray(np.sort(rng.choice(X.shape[0], B, replace=False)))
            sub = {k: hypers[k] for k in learn}
            sub, opt_state = mcem_update(
                window, sub, cfg.mcem_lr,
                lambda st, sb: mcem_grad(st, dict(hypers, **sb), idx, jitter), rng, opt_state)
            hypers = dict(hypers, **sub)
        result.beta_trace.append(float(np.exp(hypers["log_beta"])))
        if progress is not None:
            progress(step, total, float(es[-1]))
    result.window = window
    result.hypers = hypers
    result.state = state
    result.momentum = np.asarray(momentum)
    result.jitter = jitter
    result.n_steps = step
    return result
