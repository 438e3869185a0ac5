"""Graph-aware patch transformer for zero-shot city traffic forecasting."""

from .data import (
    SyntheticSpec,
    TrafficDataset,
    generate_synthetic_city,
    load_dataset,
    save_dataset,
)
from .evaluation import (
    compute_metrics,
    export_predictions,
    measure_latency,
    scaling_experiment,
    zero_shot_eval,
)
from .graph import TrafficGraph, build_adjacency, region_embeddings
from .model import CityForecaster, ModelConfig, count_parameters, init_params, preset_config
from .training import (
    Checkpoint,
    TrainConfig,
    finetune_head,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

__version__ = "0.1.0"
