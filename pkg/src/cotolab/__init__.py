"""Progressive adapter activation on small gated MLPs.

Train low-rank adapters with stochastic layer gates whose activation
probability ramps to one, then probe the trained adapters by merging or
pruning them and by cooperative-game attribution.
"""

__version__ = "0.1.0"

from .adapters import AdapterPair, BaseLayer, EnsembleAdapter, GatedModel, build_model
from .config import RunConfig, load_run_config, reference_run_config
from .schedule import ScheduleSpec, activation_prob, binomial_weights, sample_gates
from .trainer import CheckpointBundle, TrainingConfig, evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "AdapterPair", "BaseLayer", "EnsembleAdapter", "GatedModel", "build_model",
    "RunConfig", "load_run_config", "reference_run_config",
    "ScheduleSpec", "activation_prob", "binomial_weights", "sample_gates",
    "CheckpointBundle", "TrainingConfig", "evaluate", "load_checkpoint", "save_checkpoint", "train",
]
