"""Reference-free face demorphing by identity-preserving image decomposition."""
from .biometric import DEFAULT_TAU, ToyComparator, embed_toy, get_comparator, is_match, similarity
from .imaging import (IdentityParams, MorphSample, build_scenario1_split, generate_dataset,
                      make_morph, render_bonafide)
from .losses import LossConfig, crossroad_loss, decomposition_loss, default_lambda, final_loss
from .nets import NetworkConfig, apply_weights, decompose, demorph, init_params, merge
from .training import TrainConfig, desk_recipe, paper_recipe, train_decomposition, train_demorph

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_TAU", "ToyComparator", "embed_toy", "get_comparator", "is_match", "similarity",
    "IdentityParams", "MorphSample", "build_scenario1_split", "generate_dataset", "make_morph",
    "render_bonafide", "LossConfig", "crossroad_loss", "decomposition_loss", "default_lambda",
    "final_loss", "NetworkConfig", "apply_weights", "decompose", "demorph", "init_params", "merge",
    "TrainConfig", "desk_recipe", "paper_recipe", "train_decomposition", "train_demorph",
]
