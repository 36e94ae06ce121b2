"""Generator-based transferable adversarial perturbations for cross-domain black-box attacks."""

from .generator import AttackBudget, GeneratorSpec, build_generator, generate, project
from .objectives import ObjectiveKind, RNParams, Variant
from .training import TrainConfig, load_checkpoint, save_checkpoint, train_generator

__version__ = "0.1.0"

__all__ = [
    "AttackBudget", "GeneratorSpec", "build_generator", "generate", "project",
    "ObjectiveKind", "RNParams", "Variant",
    "TrainConfig", "train_generator", "save_checkpoint", "load_checkpoint",
]
