"""Deterministic MAP baseline: ascent on the log joint along the conditional-mean path."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from ..errors import FactorizationFailed, ValidationError
from ..numerics import BASE_JITTER, JITTER_CAP
from . import model as mdl

LINE_SEARCH_TOL = 1e-10


@dataclass
class MapResult:
    state: dict
    hypers: dict
    layout: mdl.ModelLayout
    objective_trace: list = field(default_factory=list)
    jitter: float = BASE_JITTER


def map_fit(X, y, layout: mdl.ModelLayout, hypers: dict, state0: Optional[dict] = None,
            iters: int = 500, lr: float = 1e-2, max_halvings: int = 40) -> MapResult:
    """Gradient ascent with a backtracking line search on the inducing values.

    A step is accepted when the objective does not drop by more than
    ``LINE_SEARCH_TOL``; otherwise the step length is halved.  After each
    accepted step the length grows by half again.  ``iters=0`` returns
    ``state0`` untouched.
    """
    X = jnp.asarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    y = jnp.asarray(np.asarray(y, dtype=np.float64).ravel())
    if X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise ValidationError("need a nonempty dataset with matching X and y")
    if iters < 0 or not lr > 0:
        raise ValidationError("iters must be non-negative and lr positive")
    state0 = mdl.init_state(layout, hypers) if state0 is None else state0
    hypers = jax.tree_util.tree_map(jnp.asarray, hypers)
    flat, unravel = ravel_pytree(jax.tree_util.tree_map(jnp.asarray, state0))

    def obj(xf, jitter):
        return mdl.map_objective(layout, hypers, unravel(xf), X, y, jitter)

    value = jax.jit(obj)
    value_grad = jax.jit(jax.value_and_grad(obj))
    jitter = BASE_JITTER
    while True:
        f0, g = value_grad(flat, jitter)
        if np.isfinite(float(f0)) and np.all(np.isfinite(np.asarray(g))):
            break
        jitter *= 2.0
        if jitter > JITTER_CAP:
            raise FactorizationFailed("MAP objective is non-finite at every jitter level")
    trace = [float(f0)]
    step = lr
    for _ in range(iters):
        # normalised direction keeps the first trial step at a sane length
        gnorm = float(jnp.linalg.norm(g))
        if gnorm == 0.0:
            break
        d = g / max(gnorm, 1.0)
        accepted = False
        for _ in range(max_halvings):
            cand = flat + step * d
            fc = float(value(cand, jitter))
            if np.isfinite(fc) and fc >= trace[-1] - LINE_SEARCH_TOL:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        flat = cand
        f0, g = value_grad(flat, jitter)
        trace.append(float(f0))
        step *= 1.5
    return MapResult(unravel(flat), hypers, layout, trace, jitter)
