"""Open-world recognition with nearest-mean prototypes, a learned rejection
threshold and incremental class learning."""

from .benchmark import benchmark_config, run_deepnno, run_ncm, run_nno
from .config import RunConfig
from .data import Dataset, generate_synthetic, load_csv, split_open_world, write_csv
from .embedding import EmbeddingNetwork, NetworkSnapshot, Sgd
from .prototypes import PrototypeStore
from .protocol import (
    EvalReport,
    GroundTruthOracle,
    NoisyWebOracle,
    OwrState,
    TrainSettings,
    discover,
    evaluate,
    incremental_step,
    load_checkpoint,
    save_checkpoint,
    train_initial,
)
from .rejection import UNKNOWN, Prediction, RejectionWeights, ThresholdState

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EmbeddingNetwork", "EvalReport", "GroundTruthOracle", "NetworkSnapshot",
    "NoisyWebOracle", "OwrState", "Prediction", "PrototypeStore", "RejectionWeights",
    "RunConfig", "Sgd", "ThresholdState", "TrainSettings", "UNKNOWN", "benchmark_config",
    "discover", "evaluate", "generate_synthetic", "incremental_step", "load_checkpoint",
    "load_csv", "run_deepnno", "run_ncm", "run_nno", "save_checkpoint", "split_open_world",
    "train_initial", "write_csv",
]
