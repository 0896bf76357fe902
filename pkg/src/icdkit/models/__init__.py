"""Desk-scale encoder-decoder model zoo with analytic gradients."""

from icdkit.models.config import DECODERS, ENCODERS, ModelConfig, TrainConfig
from icdkit.models.network import ForwardTrace, backward, bce_loss, forward, init_parameters
from icdkit.models.optim import AdamWState, adamw_step, lr_schedule
from icdkit.models.serialize import load_model, load_pretrained_embeddings, save_model
from icdkit.models.training import TrainResult, build_vocab, ordered_map, predict, train, vectorize

__all__ = [
    "AdamWState",
    "DECODERS",
    "ENCODERS",
    "ForwardTrace",
    "ModelConfig",
    "TrainConfig",
    "TrainResult",
    "adamw_step",
    "backward",
    "bce_loss",
    "build_vocab",
    "forward",
    "init_parameters",
    "load_model",
    "load_pretrained_embeddings",
    "lr_schedule",
    "ordered_map",
    "predict",
    "save_model",
    "train",
    "vectorize",
]
