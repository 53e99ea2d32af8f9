"""Train-time data poisoning toolkit for image classifiers.

Craft stealth-constrained poisoning attacks (class-pair universal
perturbations, adversarial replacement, cross-class swaps), apply them as
reproducible recipes, measure the accuracy damage on models trained from the
poisoned data, and detect tampering with hash manifests.
"""

from .attacks import (
    AttackConfig,
    StealthReport,
    adv_replace_attack,
    craft_attack,
    jsd_swap_attack,
    random_swap_attack,
    trainwreck_attack,
    verify_stealth,
)
from .datasets import (
    ImageDataset,
    load_dataset,
    materialize_poisoned,
    sample_poison_targets,
    save_dataset,
    subsample_per_class,
    synthetic_dataset,
)
from .defense import (
    HashManifest,
    build_manifest,
    read_manifest,
    verify_manifest,
    write_manifest,
)
from .divergence import (
    DivergenceMatrix,
    FeatureMatrix,
    class_histograms,
    closest_class,
    divergence_matrix,
    extract_features,
    jsd_pair,
    load_divergence_matrix,
    make_extractor,
    save_divergence_matrix,
)
from .evaluation import (
    EvaluationReport,
    delta_perf,
    evaluate_target,
    poison_rate_sweep,
    surrogate_total_cost,
    total_cost,
    windowed_best,
)
from .models import (
    ClassifierHandle,
    TrainingConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
    train_surrogate,
)
from .pgd import Perturbation, PGDConfig, craft_cpup, pgd_attack
from .recipes import (
    PerturbEdit,
    PoisonRecipe,
    SwapEdit,
    read_recipe,
    recipe_bytes,
    write_recipe,
)
from .utils import STEALTH_EPSILON, parse_epsilon

__version__ = "0.1.0"
