"""Experiment configuration, model fitting and the end-to-end pipeline."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jax.numpy as jnp
import numpy as np
from scipy.signal import lombscargle

from ..errors import ValidationError
from ..inference import dsvi, mapfit, sghmc
from ..inference import model as mdl
from ..inference.predictive import mixture_logpdf, predict
from . import data as D
from .checkpoint import TrainedModel, save_model

log = logging.getLogger(__name__)

INFERENCE = ("sghmc", "dsvi", "map")
SAMPLER_KEYS = tuple(f.name for f in dataclasses.fields(sghmc.SamplerConfig)
                     if f.name not in ("seed", "minibatch", "n_samples"))


@dataclass
class ExperimentConfig:
    """One experiment.  Unknown keys are rejected when loading from JSON.

    ``iterations`` counts optimizer steps for ``dsvi`` and ``map`` and
    post-burn-in sampler steps for ``sghmc``.  ``map_warm_start`` MAP steps
    on the inducing values precede sampling.
    """

    family: str = "CSK"
    n_components: int = 1
    m_f: int = 30
    m_theta: int = 30
    inference: str = "sghmc"
    iterations: int = 1000
    learning_rate: float = 1e-3
    minibatch: int = 256
    seed: int = 0
    sampler: dict = field(default_factory=dict)
    split_fraction: float = 0.8
    split_file: Optional[str] = None
    data: Optional[str] = None
    out_dir: Optional[str] = None
    beta_init: float = 100.0
    lengthscale_init: float = 0.5
    latent_lengthscale: float = 1.0
    latent_variance: float = 1.0
    lengthscale_latent_variance: float = 0.05
    frequency_latent_variance: float = 1.0
    spectral_init: bool = True
    map_warm_start: int = 1000
    map_lr: float = 0.1
    predictive_draws: int = 20
    learn_hypers: bool = True
    dsvi_estimator: str = "marginal"

    def __post_init__(self):
        self.family = self.family.upper()
        self.inference = self.inference.lower()
        if self.inference not in INFERENCE:
            raise ValidationError(f"inference must be one of {INFERENCE}, got {self.inference!r}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValidationError("split_fraction must lie in (0, 1)")
        if self.iterations < 0:
            raise ValidationError("iterations must be non-negative")
        for name in ("m_f", "m_theta", "n_components", "minibatch", "predictive_draws"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")
        unknown = set(self.sampler) - set(SAMPLER_KEYS)
        if unknown:
            raise ValidationError(f"unknown sampler keys: {sorted(unknown)}")
        self.sampler_config()  # validates the values too

    def sampler_config(self) -> sghmc.SamplerConfig:
        return sghmc.SamplerConfig(seed=self.seed, minibatch=self.minibatch,
                                   n_samples=self.iterations, **self.sampler)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ValidationError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        from ..errors import IoError, ParseError

        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, exc.lineno) from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --- initialization -----------------------------------------------------------------------


def peak_frequencies(X, y, n_peaks: int = 1, n_grid: int = 2000) -> np.ndarray:
    """Dominant frequencies (cycles per unit) of ``y`` along each input column.

    Uses the Lomb-Scargle periodogram, which copes with irregular sampling.
    Returns an (n_peaks, D) array, strongest peak first.
    """
    X = np.atleast_2d(X)
    out = np.zeros((n_peaks, X.shape[1]))
    for d in range(X.shape[1]):
        x = X[:, d]
        span = float(np.ptp(x)) or 1.0
        spacing = span / max(len(x) - 1, 1)
        freqs = np.linspace(0.5 / span, 0.5 / spacing, n_grid)
        power = lombscargle(x, y - y.mean(), 2.0 * math.pi * freqs)
        peaks = [i for i in range(1, n_grid - 1) if power[i] >= power[i - 1] and power[i] >= power[i + 1]]
        peaks = sorted(peaks, key=lambda i: -power[i])[:n_peaks] or [int(np.argmax(power))]
        while len(peaks) < n_peaks:
            peaks.append(peaks[-1])
        out[:, d] = freqs[peaks]
    return out


def build_model(cfg: ExperimentConfig, train: D.Dataset):
    """Layout and initial hyperparameters for standardized training data."""
    X, y = train.X, train.y
    P, dim = cfg.n_components, train.dim
    n_distinct = np.unique(X, axis=0).shape[0]
    M_f = min(cfg.m_f, n_distinct)
    z_f = D.kmeans_init(X, M_f, cfg.seed)
    ell = cfg.lengthscale_init
    if cfg.family in ("CSK", "GSM") and cfg.spectral_init:
        f0 = peak_frequencies(X, y)[0]
        # CSK's local frequency is mu / ell^2, GSM's is mu
        scale = ell**2 if cfg.family == "CSK" else 1.0
        mu_med = [float(v) for v in 2.0 * math.pi * f0 * scale]
    else:
        mu_med = 0.0
    layout = mdl.ModelLayout.default(cfg.family, P, dim, medians={"mu": mu_med, "ell": ell})
    kw = {}
    if cfg.family == "SM":
        peaks = peak_frequencies(X, y, P)
        kw = {"kernel_sigma": 1.0 / math.sqrt(P), "kernel_ell": ell, "kernel_mu": 2.0 * math.pi * peaks}
    elif cfg.family == "SE":
        kw = {"kernel_ell": ell}
    z_theta = D.kmeans_init(X, min(cfg.m_theta, n_distinct), cfg.seed + 1) if layout.nonparametric else None
    hypers = mdl.init_hypers(layout, z_f, z_theta, beta=cfg.beta_init,
                             latent_lengthscale=cfg.latent_lengthscale,
                             latent_variance=cfg.latent_variance, **kw)
    if layout.nonparametric:
        per_role = {"ell": cfg.lengthscale_latent_variance, "mu": cfg.frequency_latent_variance}
        s = np.array([per_role.get(role, cfg.latent_variance) for role, _, _ in layout.roles])
        hypers["log_s"] = jnp.log(jnp.asarray(s))
    return layout, hypers


def fit(cfg: ExperimentConfig, train: D.Dataset, progress=None) -> TrainedModel:
    """Fit on standardized data and package the result."""
    layout, hypers = build_model(cfg, train)
    X, y = train.X, train.y
    traces = {}
    if cfg.inference == "map":
        res = mapfit.map_fit(X, y, layout, hypers, iters=cfg.iterations, lr=cfg.map_lr)
        traces["objective"] = np.asarray(res.objective_trace)
        samples = [{"state": res.state, "hypers": res.hypers}]
        model = TrainedModel(layout, "map", res.hypers, train.stats, samples, None, cfg.to_dict(), traces)
    elif cfg.inference == "dsvi":
        vs = None
        if cfg.map_warm_start and layout.nonparametric:
            warm = mapfit.map_fit(X, y, layout, hypers, iters=cfg.map_warm_start, lr=cfg.map_lr)
            vs = dsvi.init_vstate(layout, hypers, state=warm.state)
        res = dsvi.fit_dsvi(X, y, layout, hypers, cfg.iterations, cfg.learning_rate, cfg.minibatch,
                            cfg.seed, vs, cfg.learn_hypers, cfg.dsvi_estimator, progress=progress)
        traces["elbo"] = np.asarray(res.elbo_trace)
        model = TrainedModel(layout, "dsvi", res.hypers, train.stats, [], res.vstate, cfg.to_dict(), traces)
    else:
        scfg = dataclasses.replace(cfg.sampler_config(), learn_hypers=cfg.learn_hypers)
        state0 = None
        map_state = None
        if cfg.map_warm_start:
            warm = mapfit.map_fit(X, y, layout, hypers, iters=cfg.map_warm_start, lr=cfg.map_lr)
            state0 = map_state = warm.state
        res = sghmc.run_sghmc(X, y, layout, hypers, scfg, state0=state0, progress=progress)
        traces["energy"] = np.asarray(res.energy_trace)
        traces["beta"] = np.asarray(res.beta_trace)
        model = TrainedModel(layout, "sghmc", res.hypers, train.stats, list(res.window), None,
                             cfg.to_dict(), traces)
        if map_state is not None:
            model.traces["map_state_u_f"] = np.asarray(map_state["u_f"])
            model.traces["map_state_v_theta"] = np.asarray(map_state["v_theta"])
            # the warm start ran under the initial hyperparameters
            for k, v in hypers.items():
                model.traces["map_hyper_" + k] = np.asarray(v)
    return model


def map_point(model: TrainedModel):
    """The MAP state stored alongside a sampled model, if any."""
    if model.kind == "map":
        return model.samples[0]["state"], model.samples[0]["hypers"]
    if "map_state_u_f" in model.traces:
        st = {"u_f": jnp.asarray(model.traces["map_state_u_f"]),
              "v_theta": jnp.asarray(model.traces["map_state_v_theta"]).reshape(
                  model.layout.n_functions, -1)}
        hy = {k[len("map_hyper_"):]: jnp.asarray(v).reshape(np.shape(model.hypers[k[len("map_hyper_"):]]))
              for k, v in model.traces.items() if k.startswith("map_hyper_")}
        return st, hy or model.hypers
    return None


# --- prediction and metrics --------------------------------------------------------------


def predict_original_units(model: TrainedModel, X, y=None, seed: int = 0) -> dict:
    """Predictive mixture at raw inputs ``X``; moments and metrics in original units."""
    Xs = D.standardize_inputs(model.stats, X)
    n_draws = int(model.config.get("predictive_draws", 20))
    res = predict(model.layout, model.predictive_samples(n_draws, seed), Xs,
                  theta_mode=model.theta_mode, seed=seed)
    st = model.stats
    means = res.means * st.y_std + st.y_mean
    variances = res.variances * st.y_std**2
    out = {"mean": means.mean(axis=0),
           "variance": np.mean(variances + means**2, axis=0) - means.mean(axis=0) ** 2,
           "means": means, "variances": variances}
    if y is not None:
        y = np.asarray(y, dtype=np.float64).ravel()
        out["mse"] = float(np.mean((out["mean"] - y) ** 2))
        out["mean_loglik"] = float(np.mean(mixture_logpdf(y, means, variances)))
    return out


def write_metrics(path, metrics: dict) -> None:
    D.atomic_write_text(path, json.dumps(metrics, sort_keys=True, indent=2) + "\n")


def write_predictions(path, X, result: dict, y=None, columns=None) -> None:
    X = np.atleast_2d(X)
    columns = columns or [f"x{d}" for d in range(X.shape[1])]
    header = list(columns) + (["y"] if y is not None else []) + ["mean", "variance"]
    cols = [X] + ([np.asarray(y)[:, None]] if y is not None else []) + [
        result["mean"][:, None], result["variance"][:, None]]
    D.atomic_write_text(path, D.format_table(header, np.hstack(cols)))


def run_experiment(cfg: ExperimentConfig, dataset: Optional[D.Dataset] = None, progress=None) -> dict:
    """load -> standardize -> split -> fit -> predict -> metrics, writing all artifacts.

    Returns the metrics dictionary (also written to ``metrics.json``).
    """
    from .plots import emit_plot_data

    if dataset is None:
        if not cfg.data:
            raise ValidationError("no dataset given and config has no data path")
        dataset = D.load_csv(cfg.data)
    if cfg.split_file:
        train_raw, test_raw = D.split_from_file(dataset, cfg.split_file)
    else:
        train_raw, test_raw = D.split(dataset, cfg.split_fraction, cfg.seed)
    train = D.standardize(train_raw)
    model = fit(cfg, train, progress)
    pred = predict_original_units(model, test_raw.X, test_raw.y, seed=cfg.seed)
    metrics = {
        "family": cfg.family,
        "inference": cfg.inference,
        "n_train": train.n,
        "n_test": test_raw.n,
        "test_mse": pred["mse"],
        "test_mean_loglik": pred["mean_loglik"],
        "beta": model.beta,
    }
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        write_metrics(out / "metrics.json", metrics)
        write_predictions(out / "predictions.csv", test_raw.X, pred, test_raw.y, test_raw.columns)
        save_model(model, out / "model.nsgp")
        emit_plot_artifacts(model, train_raw, out)
    metrics["_model"] = model
    return metrics


def emit_plot_artifacts(model: TrainedModel, train_raw: D.Dataset, out: Path, n_grid: int = 101) -> list:
    from .plots import emit_plot_data

    written = []
    if model.layout.input_dim == 1:
        lo, hi = float(train_raw.X.min()), float(train_raw.X.max())
        grid = np.linspace(lo, hi, n_grid)
        if model.layout.nonparametric:
            written += emit_plot_data("HyperTraces", model, grid, out / "hyper_traces")
        written += emit_plot_data("Spectrogram", model, grid, out / "spectrogram")
        written += emit_plot_data("Predictions", model, grid, out / "predictions_grid")
    return written


# --- chirp demo ------------------------------------------------------------------------------


def chirp_config(inference: str = "sghmc", seed: int = 0) -> ExperimentConfig:
    iterations = {"sghmc": 1000, "dsvi": 3000, "map": 2000}[inference]
    lr = {"sghmc": 1e-3, "dsvi": 1e-2, "map": 1e-3}[inference]
    return ExperimentConfig(family="CSK", n_components=1, m_f=30, m_theta=30, inference=inference,
                            iterations=iterations, learning_rate=lr, seed=seed, lengthscale_init=0.6,
                            frequency_latent_variance=4.0)


def run_chirp_demo(out_dir, inference: str = "sghmc", seed: int = 0, n: int = 400,
                   noise_sd: float = 0.1, cfg: Optional[ExperimentConfig] = None, progress=None) -> dict:
    """Train on ``n`` noisy chirp observations; score against the clean signal.

    Metrics: predictive MSE against the clean signal on a dense grid, and
    the relative error of the recovered frequency function (point estimate
    and posterior mean) over the central 80% of the interval.
    """
    cfg = cfg or chirp_config(inference, seed)
    ds = D.generate_chirp(n, noise_sd, seed)
    train = D.standardize(ds)
    model = fit(cfg, train, progress)
    t = np.linspace(-1.0, 1.0, 401)
    clean = D.chirp_signal(t)
    pred = predict_original_units(model, t[:, None], clean, seed=seed)
    central = np.linspace(-0.8, 0.8, 161)
    truth = D.chirp_frequency(central)
    metrics = {
        "inference": cfg.inference,
        "n_train": ds.n,
        "noise_variance": noise_sd**2,
        "clean_mse": pred["mse"],
        "clean_mean_loglik": pred["mean_loglik"],
        "beta": model.beta,
    }
    from .plots import hyper_traces

    tr = hyper_traces(model, central)
    freq_post = np.mean(tr["frequency"], axis=0) if "frequency" in tr else None
    if freq_post is not None:
        metrics["frequency_median_rel_error_posterior"] = float(np.median(np.abs(freq_post - truth) / truth))
    mp = map_point(model)
    if mp is not None and "frequency" in tr:
        st, hy = mp
        xs = D.standardize_inputs(model.stats, central[:, None])
        f_map = mdl.hyper_trace(model.layout, hy, st, xs)["frequency"][:, 0, 0] / model.stats.x_std[0]
        metrics["frequency_median_rel_error_map"] = float(np.median(np.abs(f_map - truth) / truth))
    out = Path(out_dir)
    write_metrics(out / "metrics.json", metrics)
    write_predictions(out / "predictions.csv", t[:, None], pred, clean, ["t"])
    D.write_csv(out / "train.csv", ds)
    save_model(model, out / "model.nsgp")
    emit_plot_artifacts(model, ds, out)
    metrics["_model"] = model
    return metrics
