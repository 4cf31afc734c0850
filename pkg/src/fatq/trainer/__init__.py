"""Desk-scale quantization-aware training harness."""
from fatq.trainer.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from fatq.trainer.cost import bop, transform_overhead
from fatq.trainer.data import Dataset, load_npz, make_dataset
from fatq.trainer.layers import QatLayer, QatSettings, StaleCacheError, backward_layer, forward_layer
from fatq.trainer.model import TinyCNN
from fatq.trainer.train import PRETRAIN_LR, TrainConfig, evaluate, finetune, pretrain, train

__all__ = [
    "PRETRAIN_LR",
    "Checkpoint",
    "Dataset",
    "QatLayer",
    "QatSettings",
    "StaleCacheError",
    "TinyCNN",
    "TrainConfig",
    "backward_layer",
    "bop",
    "evaluate",
    "finetune",
    "forward_layer",
    "load_checkpoint",
    "load_npz",
    "make_dataset",
    "pretrain",
    "save_checkpoint",
    "train",
    "transform_overhead",
]
