"""Trained-model container and its versioned text checkpoint.

A checkpoint is the line ``NSGP1`` followed by one JSON document.  Arrays
are stored as nested lists; JSON floats use ``repr`` so values survive a
roundtrip exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np

from ..errors import IoError, ParseError, UntrainedModel, ValidationError
from ..inference import dsvi
from ..inference.model import ModelLayout, kernel_spec_from
from ..latent import WarpSpec
from .data import Stats, atomic_write_text

MAGIC = "NSGP1"
KINDS = ("sghmc", "dsvi", "map")


@dataclass
class TrainedModel:
    layout: ModelLayout
    kind: str
    hypers: dict
    stats: Stats
    samples: list = field(default_factory=list)   # [{"state", "hypers"}]
    vstate: Optional[dict] = None
    config: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown model kind {self.kind!r}")

    @property
    def beta(self) -> float:
        return float(np.exp(np.asarray(self.hypers["log_beta"])))

    def point_state(self) -> dict:
        """A single representative state: window average, variational mean or MAP point."""
        if self.kind == "dsvi":
            if self.vstate is None:
                raise UntrainedModel("variational model has no variational state")
            return {"v_theta": self.vstate["m_theta"], "u_f": self.vstate["m_f"]}
        if not self.samples:
            raise UntrainedModel("model holds no samples")
        return jax.tree_util.tree_map(lambda *a: jnp.mean(jnp.stack(a), axis=0),
                                      *[s["state"] for s in self.samples])

    def kernel_spec(self):
        return kernel_spec_from(self.layout, self.hypers, self.point_state())

    def predictive_samples(self, n_draws: int = 20, seed: int = 0) -> list:
        """Components of the predictive mixture."""
        if self.kind == "dsvi":
            if self.vstate is None:
                raise UntrainedModel("variational model has no variational state")
            draws = dsvi.sample_states(self.vstate, n_draws, jax.random.PRNGKey(seed))
            return [{"state": {"v_theta": d["v_theta"], "u_f": self.vstate["m_f"]},
                     "hypers": self.hypers, "S_f": self.vstate["S_f"]} for d in draws]
        if not self.samples:
            raise UntrainedModel("model holds no samples")
        return list(self.samples)

    @property
    def theta_mode(self) -> str:
        return "mean" if self.kind == "map" else "sample"


# --- serialization ----------------------------------------------------------------


def _tree_to_json(tree):
    return {k: np.asarray(v).tolist() for k, v in tree.items()}


def _tree_from_json(d):
    return {k: jnp.asarray(np.asarray(v, dtype=np.float64)) for k, v in d.items()}


def _fix_shapes(tree: dict, ref: dict) -> dict:
    # empty arrays lose their trailing shape in JSON
    return {k: (jnp.reshape(v, ref[k]) if k in ref else v) for k, v in tree.items()}


def _layout_to_json(layout: ModelLayout) -> dict:
    return {"family": layout.family, "n_components": layout.n_components,
            "input_dim": layout.input_dim, "whiten_f": layout.whiten_f,
            "warps": [[w.kind, w.offset] for w in layout.warps], "shifts": list(layout.shifts)}


def _layout_from_json(d: dict) -> ModelLayout:
    return ModelLayout(d["family"], int(d["n_components"]), int(d["input_dim"]),
                       tuple(WarpSpec(k, float(o)) for k, o in d["warps"]),
                       tuple(float(s) for s in d["shifts"]), bool(d["whiten_f"]))


def _shapes(tree: dict) -> dict:
    return {k: list(np.shape(v)) for k, v in tree.items()}


def model_to_text(model: TrainedModel) -> str:
    doc = {
        "format": MAGIC,
        "kind": model.kind,
        "layout": _layout_to_json(model.layout),
        "likelihood": {"beta": model.beta},
        "hypers": _tree_to_json(model.hypers),
        "hyper_shapes": _shapes(model.hypers),
        "stats": model.stats.to_dict(),
        "samples": [{"state": _tree_to_json(s["state"]), "state_shapes": _shapes(s["state"]),
                     "hypers": _tree_to_json(s["hypers"])} for s in model.samples],
        "vstate": None if model.vstate is None else _tree_to_json(model.vstate),
        "vstate_shapes": None if model.vstate is None else _shapes(model.vstate),
        "config": model.config,
        "traces": {k: np.asarray(v).tolist() for k, v in model.traces.items()},
    }
    return MAGIC + "\n" + json.dumps(doc, sort_keys=True) + "\n"


def model_from_text(text: str) -> TrainedModel:
    head, _, body = text.partition("\n")
    if head.strip() != MAGIC:
        raise ParseError(f"not a model checkpoint (expected header {MAGIC!r})", 1)
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ParseError(f"corrupt checkpoint: {exc.msg}", exc.lineno + 1) from None
    try:
        hshapes = doc["hyper_shapes"]
        hypers = _fix_shapes(_tree_from_json(doc["hypers"]), hshapes)
        samples = []
        for s in doc["samples"]:
            samples.append({"state": _fix_shapes(_tree_from_json(s["state"]), s["state_shapes"]),
                            "hypers": _fix_shapes(_tree_from_json(s["hypers"]), hshapes)})
        vstate = None
        if doc["vstate"] is not None:
            vstate = _fix_shapes(_tree_from_json(doc["vstate"]), doc["vstate_shapes"])
        return TrainedModel(_layout_from_json(doc["layout"]), doc["kind"], hypers,
                            Stats.from_dict(doc["stats"]), samples, vstate, doc["config"],
                            {k: np.asarray(v) for k, v in doc["traces"].items()})
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed checkpoint: {exc}") from None


def save_model(model: TrainedModel, path) -> None:
    atomic_write_text(path, model_to_text(model))


def load_model(path) -> TrainedModel:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return model_from_text(text)
