from hetpar.tinymodel.engine import DistributedTrainer, ReplicaDivergence, StepResult
from hetpar.tinymodel.model import (
    DivisibilityViolation,
    ModelError,
    TinyModelSpec,
    TrainBatch,
    dump_params,
    init_params,
    load_params,
    make_batch,
    param_infos,
)

__all__ = [
    "DistributedTrainer",
    "DivisibilityViolation",
    "ModelError",
    "ReplicaDivergence",
    "StepResult",
    "TinyModelSpec",
    "TrainBatch",
    "dump_params",
    "init_params",
    "load_params",
    "make_batch",
    "param_infos",
]
