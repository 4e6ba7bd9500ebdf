"""Hyperbolic image-text embeddings with masked images and feature-interaction
distillation, implemented on numpy at toy scale."""
from . import data, encoders, engine, evaluation, lorentz, losses, masking, trainer

__all__ = ["data", "encoders", "engine", "evaluation", "lorentz", "losses", "masking", "trainer"]
__version__ = "0.1.0"
