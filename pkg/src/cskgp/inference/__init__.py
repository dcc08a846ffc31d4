from .dsvi import DsviResult, dsvi_elbo, fit_dsvi, init_vstate, kl_whitened, sample_states
from .mapfit import MapResult, map_fit
from .model import (
    LikelihoodModel,
    ModelLayout,
    energy,
    energy_terms,
    forward,
    init_hypers,
    init_state,
    kernel_spec_from,
)
from .predictive import PredictiveResult, mixture_logpdf, predict
from .sghmc import SampleWindow, SamplerConfig, SamplerResult, mcem_update, run_sghmc, sghmc_step

__all__ = [
    "DsviResult", "LikelihoodModel", "MapResult", "ModelLayout", "PredictiveResult",
    "SampleWindow", "SamplerConfig", "SamplerResult", "dsvi_elbo", "energy", "energy_terms",
    "fit_dsvi", "forward", "init_hypers", "init_state", "init_vstate", "kernel_spec_from",
    "kl_whitened", "map_fit", "mcem_update", "mixture_logpdf", "predict", "run_sghmc",
    "sample_states", "sghmc_step",
]
