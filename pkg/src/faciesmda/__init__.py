"""Facies history matching with a convolutional VAE and ES-MDA.

Submodules:

``geomodel``
    channel realizations, the facies data model and dataset files
``nn``
    the numpy VAE: layers, losses, training, checkpoints
``flowsim``
    single-phase pressure and tracer forward model
``assimilate``
    ensemble smoother with multiple data assimilation in latent space
``config`` / ``cli``
    experiment configuration and the ``faciesmda`` command
"""
from . import assimilate, flowsim, geomodel, nn
from .geomodel import FaciesGrid, ChannelGenParams

__version__ = "0.1.0"

__all__ = ["assimilate", "flowsim", "geomodel", "nn", "FaciesGrid", "ChannelGenParams",
           "__version__"]
