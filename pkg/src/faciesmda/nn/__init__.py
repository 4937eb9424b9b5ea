"""Minimal numpy neural-network stack for the convolutional VAE."""
from .layers import (LayerSpec, NumericalError, ShapeError, activate, build_layer,
                     forward_layer)
from .losses import BCE_EPS, bce_loss, kl_divergence, reparameterize, total_loss
from .network import (PRESETS, VaeNetwork, backward, decode, encode, mirrored_architecture,
                      preset_architecture, reconstruction_accuracy)
from .train import (AdamState, TrainConfig, TrainHistory, TrainingDiverged, read_history_csv,
                    train, write_history_csv)
from .checkpoint import CheckpointError, load_checkpoint, load_training_state, save_checkpoint

__all__ = [
    "LayerSpec", "NumericalError", "ShapeError", "activate", "build_layer", "forward_layer",
    "BCE_EPS", "bce_loss", "kl_divergence", "reparameterize", "total_loss",
    "PRESETS", "VaeNetwork", "backward", "decode", "encode", "mirrored_architecture",
    "preset_architecture", "reconstruction_accuracy",
    "AdamState", "TrainConfig", "TrainHistory", "TrainingDiverged", "read_history_csv", "train",
    "write_history_csv",
    "CheckpointError", "load_checkpoint", "load_training_state", "save_checkpoint",
]
