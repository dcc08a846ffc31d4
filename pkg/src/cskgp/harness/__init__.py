from .checkpoint import TrainedModel, load_model, save_model
from .data import (
    Dataset,
    Stats,
    destandardize_predictions,
    generate_chirp,
    kmeans_init,
    load_csv,
    split,
    standardize,
    write_csv,
)
from .experiment import ExperimentConfig, fit, run_chirp_demo, run_experiment
from .plots import emit_plot_data

__all__ = [
    "Dataset", "ExperimentConfig", "Stats", "TrainedModel", "destandardize_predictions",
    "emit_plot_data", "fit", "generate_chirp", "kmeans_init", "load_csv", "load_model",
    "run_chirp_demo", "run_experiment", "save_model", "split", "standardize", "write_csv",
]
