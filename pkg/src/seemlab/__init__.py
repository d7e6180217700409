"""seemlab: desk-scale diagnostics for Q-value divergence in offline TD learning.

Train small ReLU MLP Q-functions on offline transition datasets, compute
the spectral divergence detector from tangent-kernel Gram matrices, predict
crash times under SGD and growth laws under Adam, and demonstrate that
normalizing layers bound the kernel and keep training stable.
"""

from . import diagnostics, envs, linalg, net, train
from .envs import (
    BairdInstance,
    Dataset,
    ToyNav,
    Transition,
    baird_dataset,
    baird_step,
    load_dataset,
    save_dataset,
    subsample,
    toy_nav_dataset,
)
from .net import MLPSpec, Params, init, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainTrace, run

__version__ = "0.1.0"

__all__ = [
    "BairdInstance",
    "Dataset",
    "MLPSpec",
    "Params",
    "ToyNav",
    "TrainConfig",
    "TrainTrace",
    "Transition",
    "baird_dataset",
    "baird_step",
    "diagnostics",
    "envs",
    "init",
    "linalg",
    "load_checkpoint",
    "load_dataset",
    "net",
    "run",
    "save_checkpoint",
    "save_dataset",
    "subsample",
    "toy_nav_dataset",
    "train",
]
