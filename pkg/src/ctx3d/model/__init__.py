from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .network import (
    Assignment,
    FeatureCache,
    Losses,
    Model,
    build_model,
    forward_infer,
    forward_train,
)
from .train import TraceRow, TrainingDiverged, read_trace, train, write_trace
