"""Full train-time attacks emitting poison recipes, plus the stealth validator.

Four attacks are implemented:

* trainwreck   - per attacked class, craft one universal perturbation pushing
                 the class toward its lowest-divergence neighbor (using *all*
                 of the class's training data regardless of the poison rate),
                 then apply it to a uniformly sampled fraction of the class.
* adv_replace  - per-image untargeted PGD deltas against the surrogate on a
                 uniformly sampled fraction of every class.
* random_swap  - uniformly random cross-class image swaps.
* jsd_swap     - swaps routed by class divergence: classes are visited in
                 ascending order of their minimal divergence from any other
                 class, each swapping with its closest class.

Every attack preserves the dataset size, the per-class counts, and all labels;
perturbation attacks additionally keep every delta inside the 8/255 L-inf
stealth budget. `verify_stealth` checks all three properties on a finished
recipe.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .datasets import ImageDataset, materialize_poisoned, sample_poison_targets
from .divergence import (
    DivergenceMatrix,
    closest_class,
    divergence_matrix,
    extract_features,
    make_extractor,
)
from .models import ClassifierHandle, train_surrogate
from .pgd import PGDConfig, craft_cpup
from .recipes import PerturbEdit, PoisonRecipe, SwapEdit
from .utils import STEALTH_EPSILON, format_epsilon, parse_epsilon

logger = logging.getLogger(__name__)

PERTURBATION_ATTACKS = ("trainwreck", "adv_replace")
SWAP_ATTACKS = ("random_swap", "jsd_swap")
ATTACK_NAMES = PERTURBATION_ATTACKS + SWAP_ATTACKS

# Experimental-protocol poison-rate ranges; soft constraints, see AttackConfig.
SWAP_PI_MAX = 0.25
PERTURBATION_PI_MIN = 0.25


@dataclass
class AttackConfig:
    """Configuration shared by all attacks.

    poison_rate ranges are protocol conventions, not mathematical necessities:
    swap attacks are visually conspicuous and capped at 0.25, perturbation
    attacks below 0.25 have little effect. Rates outside these ranges raise
    unless unsafe_pi is set; a rate of exactly 0 (empty attack) is always
    allowed.
    """

    attack_name: str
    poison_rate: float
    epsilon: str = "8/255"
    seed: int = 0
    n_iter_cpup: int = 1
    n_iter_pgd: int = 10
    step_size: float | None = None
    extractor_id: str = "flatten"
    surrogate_architecture: str = "simple_cnn"
    surrogate_epochs: int = 10
    n_bins: int = 64
    unsafe_pi: bool = False
    pgd_from_composite: bool = False
    min_surrogate_accuracy_factor: float = 2.0

    def __post_init__(self):
        if self.attack_name not in ATTACK_NAMES:
            raise ValueError(f"unknown attack {self.attack_name!r}, expected {ATTACK_NAMES}")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError(f"poison_rate must lie in [0, 1], got {self.poison_rate}")
        self.epsilon = format_epsilon(self.epsilon)
        if not self.unsafe_pi and self.poison_rate > 0.0:
            if self.attack_name in SWAP_ATTACKS and self.poison_rate > SWAP_PI_MAX:
                raise ValueError(
                    f"swap attacks cap poison_rate at {SWAP_PI_MAX} "
                    f"(got {self.poison_rate}); pass unsafe_pi=True to override"
                )
            if (self.attack_name in PERTURBATION_ATTACKS
                    and self.poison_rate < PERTURBATION_PI_MIN):
                raise ValueError(
                    f"perturbation attacks expect poison_rate in "
                    f"[{PERTURBATION_PI_MIN}, 1] (got {self.poison_rate}); "
                    f"pass unsafe_pi=True to override"
                )

    @property
    def epsilon_value(self) -> float:
        return parse_epsilon(self.epsilon)


@dataclass(frozen=True)
class StealthReport:
    """Outcome of the three-part stealth check for one recipe.

    Sub-checks: total count preserved, per-class counts preserved, and the max
    L-inf norm over perturb-edit deltas within the 8/255 budget. Swap edits
    are exempt from the L-inf check by definition (they break visual stealth
    by design) and are reported via swap_edits_present.
    """

    count_preserved: bool
    per_class_counts_preserved: bool
    max_linf: float
    linf_limit: float
    linf_within_limit: bool
    has_perturb_edits: bool
    swap_edits_present: bool
    violations: tuple = ()

    @property
    def passed(self) -> bool:
        return (self.count_preserved and self.per_class_counts_preserved
                and self.linf_within_limit)


def verify_stealth(clean: ImageDataset, recipe: PoisonRecipe) -> StealthReport:
    """Check a recipe against the three stealth requirements; never mutates inputs."""
    poisoned = materialize_poisoned(clean, recipe)
    violations = []

    count_preserved = poisoned.n == clean.n
    if not count_preserved:
        violations.append(f"total count changed: {clean.n} -> {poisoned.n}")
    clean_counts = clean.class_counts()
    poisoned_counts = poisoned.class_counts()
    per_class_ok = bool((clean_counts == poisoned_counts).all())
    if not per_class_ok:
        for c in np.flatnonzero(clean_counts != poisoned_counts):
            violations.append(
                f"class {c + 1} count changed: {clean_counts[c]} -> {poisoned_counts[c]}"
            )

    limit = float(STEALTH_EPSILON)
    max_linf = 0.0
    linf_ok = True
    has_perturb = False
    swap_present = False
    for position, edit in enumerate(recipe.edits):
        if edit.kind == "swap":
            swap_present = True
            continue
        has_perturb = True
        worst = float(np.abs(recipe.perturbations[edit.tensor]).max())
        max_linf = max(max_linf, worst)
        if worst > limit:
            linf_ok = False
            violations.append(
                f"edit {position} (index {edit.index}, tensor {edit.tensor!r}) "
                f"exceeds 8/255: linf={worst!r}"
            )
    return StealthReport(
        count_preserved=count_preserved,
        per_class_counts_preserved=per_class_ok,
        max_linf=max_linf,
        linf_limit=limit,
        linf_within_limit=linf_ok,
        has_perturb_edits=has_perturb,
        swap_edits_present=swap_present,
        violations=tuple(violations),
    )


def _require_nonempty_classes(train: ImageDataset) -> None:
    counts = train.class_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class {empty[0] + 1} has no training images")


def _surrogate_for(train, test, config, surrogate):
    """Train the surrogate if not injected; warn when it is barely above chance."""
    if surrogate is None:
        if test is None:
            raise ValueError("either a trained surrogate or a test split is required")
        surrogate, accuracy = train_surrogate(
            train, test, config.surrogate_architecture,
            epochs=config.surrogate_epochs, seed=config.seed,
        )
    elif test is not None:
        accuracy = surrogate.accuracy(test)
    else:
        accuracy = None
    if accuracy is not None:
        floor = config.min_surrogate_accuracy_factor / train.n_classes
        if accuracy < floor:
            warnings.warn(
                f"surrogate test accuracy {accuracy:.4f} is below the quality floor "
                f"{floor:.4f}; the crafted perturbations may be weak",
                stacklevel=3,
            )
    return surrogate


def _divergence_for(train, config, matrix):
    if matrix is None:
        features = extract_features(train, make_extractor(config.extractor_id))
        matrix = divergence_matrix(features, config.n_bins)
    return matrix


def trainwreck_attack(
    train: ImageDataset,
    test: ImageDataset | None,
    config: AttackConfig,
    divergence: DivergenceMatrix | None = None,
    surrogate: ClassifierHandle | None = None,
) -> PoisonRecipe:
    """Craft the full class-conflation attack as a poison recipe.

    Pipeline: extract features and compute the class divergence matrix, train
    the surrogate, then for every attacked class select floor(rate * n_c)
    poison indices uniformly at random, pick the closest class by divergence,
    craft the class universal perturbation from all of the class's data, and
    emit one perturb edit per selected index. The divergence matrix and the
    surrogate are poison-rate independent and can be injected to reuse them
    across a rate sweep.
    """
    if config.attack_name != "trainwreck":
        raise ValueError(f"config.attack_name must be 'trainwreck', got {config.attack_name!r}")
    _require_nonempty_classes(train)
    targets = sample_poison_targets(train, config.poison_rate, config.seed)
    edits = []
    perturbations = {}
    if any(len(v) for v in targets.values()):
        divergence = _divergence_for(train, config, divergence)
        surrogate = _surrogate_for(train, test, config, surrogate)
        for class_a in range(1, train.n_classes + 1):
            selected = targets[class_a]
            if not len(selected):
                continue
            class_c = closest_class(divergence, class_a)
            cpup = craft_cpup(
                train, class_a, class_c, surrogate,
                epsilon=config.epsilon_value,
                n_iter_cpup=config.n_iter_cpup,
                n_iter_pgd=config.n_iter_pgd,
                step_size=config.step_size,
                pgd_from_composite=config.pgd_from_composite,
            )
            name = f"cpup_c{class_a:03d}"
            perturbations[name] = cpup.delta
            edits.extend(PerturbEdit(int(i), name) for i in selected)
            logger.info("trainwreck: class %d -> %d, %d edits, cpup linf %.6f",
                        class_a, class_c, len(selected), cpup.linf)
    recipe = PoisonRecipe(
        dataset_id=train.dataset_id,
        poison_rate=config.poison_rate,
        epsilon=config.epsilon,
        seed=config.seed,
        attack_name="trainwreck",
        edits=tuple(edits),
        perturbations=perturbations,
    )
    report = verify_stealth(train, recipe)
    if not report.passed:  # pragma: no cover - construction guarantees stealth
        raise RuntimeError(f"crafted recipe failed the stealth check: {report.violations}")
    return recipe


def adv_replace_attack(
    train: ImageDataset,
    config: AttackConfig,
    surrogate: ClassifierHandle | None = None,
    test: ImageDataset | None = None,
    batch_size: int = 256,
) -> PoisonRecipe:
    """Replace a fraction of every class with untargeted adversarial versions.

    Poison indices are selected exactly as in the trainwreck attack; each
    selected image gets its own untargeted PGD delta against the surrogate.
    """
    if config.attack_name != "adv_replace":
        raise ValueError(f"config.attack_name must be 'adv_replace', got {config.attack_name!r}")
    _require_nonempty_classes(train)
    targets = sample_poison_targets(train, config.poison_rate, config.seed)
    all_selected = np.concatenate([targets[c] for c in sorted(targets)]) \
        if targets else np.empty(0, dtype=np.int64)
    edits = []
    perturbations = {}
    if all_selected.size:
        surrogate = _surrogate_for(train, test, config, surrogate)
        pgd_config = PGDConfig(epsilon=config.epsilon_value, n_iter=config.n_iter_pgd,
                               step_size=config.step_size, mode="untargeted")
        all_selected = np.sort(all_selected)
        import torch

        from .models import to_nchw
        from .pgd import _pgd_deltas

        for start in range(0, all_selected.size, batch_size):
            chunk = all_selected[start:start + batch_size]
            images = to_nchw(np.asarray(train.images[chunk])).to(surrogate.device)
            labels0 = torch.from_numpy(
                np.asarray(train.labels[chunk]) - 1).to(surrogate.device)
            deltas = _pgd_deltas(images, labels0, surrogate.module, pgd_config)
            for offset, index in enumerate(chunk):
                name = f"delta_{int(index):08d}"
                perturbations[name] = deltas[offset].cpu().numpy().transpose(1, 2, 0)
                edits.append(PerturbEdit(int(index), name))
    recipe = PoisonRecipe(
        dataset_id=train.dataset_id,
        poison_rate=config.poison_rate,
        epsilon=config.epsilon,
        seed=config.seed,
        attack_name="adv_replace",
        edits=tuple(edits),
        perturbations=perturbations,
    )
    report = verify_stealth(train, recipe)
    if not report.passed:  # pragma: no cover - construction guarantees stealth
        raise RuntimeError(f"crafted recipe failed the stealth check: {report.violations}")
    return recipe


class _ClassPools:
    """Per-class index pools with O(1) uniform draws and removals."""

    def __init__(self, train: ImageDataset):
        self.pools = {c: list(train.class_indices(c))
                      for c in range(1, train.n_classes + 1)}

    @property
    def total(self) -> int:
        return sum(len(p) for p in self.pools.values())

    def total_excluding(self, class_label: int) -> int:
        return self.total - len(self.pools[class_label])

    def draw(self, rng: np.random.Generator, exclude_class: int | None = None):
        """Uniform draw over all remaining indices (optionally excluding a class)."""
        weights = [(c, len(p)) for c, p in self.pools.items()
                   if c != exclude_class and p]
        total = sum(w for _, w in weights)
        if total == 0:
            return None, None
        r = int(rng.integers(total))
        for c, w in weights:
            if r < w:
                return c, self._take(rng, c, r)
            r -= w
        raise AssertionError("unreachable")  # pragma: no cover

    def draw_from(self, rng: np.random.Generator, class_label: int):
        pool = self.pools[class_label]
        if not pool:
            return None
        return self._take(rng, class_label, int(rng.integers(len(pool))))

    def _take(self, rng, class_label, position):
        pool = self.pools[class_label]
        value = pool[position]
        pool[position] = pool[-1]
        pool.pop()
        return value


def random_swap_attack(train: ImageDataset, config: AttackConfig) -> PoisonRecipe:
    """Uniformly random cross-class swaps, up to floor(rate * n / 2) pairs.

    Each swap consumes both indices permanently (no index reuse); the attack
    stops early if no cross-class partner remains.
    """
    if config.attack_name != "random_swap":
        raise ValueError(f"config.attack_name must be 'random_swap', got {config.attack_name!r}")
    if train.n_classes < 2:
        raise ValueError("swap attacks require at least 2 classes")
    budget = math.floor(config.poison_rate * train.n / 2)
    rng = np.random.default_rng(config.seed)
    pools = _ClassPools(train)
    edits = []
    for _ in range(budget):
        class_a, index_a = pools.draw(rng)
        if index_a is None:
            break
        if pools.total_excluding(class_a) == 0:
            break  # no cross-class partner left; index_a stays consumed
        class_b, index_b = pools.draw(rng, exclude_class=class_a)
        edits.append(SwapEdit(int(index_a), int(index_b)))
    return PoisonRecipe(
        dataset_id=train.dataset_id,
        poison_rate=config.poison_rate,
        epsilon=config.epsilon,
        seed=config.seed,
        attack_name="random_swap",
        edits=tuple(edits),
    )


def jsd_swap_attack(
    train: ImageDataset,
    config: AttackConfig,
    divergence: DivergenceMatrix | None = None,
) -> PoisonRecipe:
    """Divergence-routed swaps.

    Classes are visited in ascending order of their minimal divergence from
    any other class; each class swaps floor(rate * n_c / 2) uniformly selected
    images with uniformly selected images of its closest class. A global
    budget of floor(rate * n / 2) swaps is enforced on top of the per-class
    caps, and any image is swapped at most once.
    """
    if config.attack_name != "jsd_swap":
        raise ValueError(f"config.attack_name must be 'jsd_swap', got {config.attack_name!r}")
    if train.n_classes < 2:
        raise ValueError("swap attacks require at least 2 classes")
    divergence = _divergence_for(train, config, divergence)
    if divergence.n_classes != train.n_classes:
        raise ValueError(
            f"divergence matrix covers {divergence.n_classes} classes, "
            f"dataset has {train.n_classes}"
        )
    rng = np.random.default_rng(config.seed)
    pools = _ClassPools(train)
    budget = math.floor(config.poison_rate * train.n / 2)
    counts = train.class_counts()

    off_diagonal = divergence.values + np.diag(np.full(train.n_classes, np.inf))
    min_divergence = off_diagonal.min(axis=1)
    class_order = [int(c) + 1 for c in np.argsort(min_divergence, kind="stable")]

    edits = []
    for class_a in class_order:
        if budget <= 0:
            break
        partner = closest_class(divergence, class_a)
        cap = math.floor(config.poison_rate * counts[class_a - 1] / 2)
        for _ in range(min(cap, budget)):
            index_a = pools.draw_from(rng, class_a)
            if index_a is None:
                break
            index_b = pools.draw_from(rng, partner)
            if index_b is None:
                break  # partner class exhausted; index_a stays consumed
            edits.append(SwapEdit(int(index_a), int(index_b)))
            budget -= 1
    return PoisonRecipe(
        dataset_id=train.dataset_id,
        poison_rate=config.poison_rate,
        epsilon=config.epsilon,
        seed=config.seed,
        attack_name="jsd_swap",
        edits=tuple(edits),
    )


def craft_attack(
    train: ImageDataset,
    test: ImageDataset | None,
    config: AttackConfig,
    divergence: DivergenceMatrix | None = None,
    surrogate: ClassifierHandle | None = None,
) -> PoisonRecipe:
    """Dispatch to the attack named by the configuration."""
    if config.attack_name == "trainwreck":
        return trainwreck_attack(train, test, config, divergence=divergence,
                                 surrogate=surrogate)
    if config.attack_name == "adv_replace":
        return adv_replace_attack(train, config, surrogate=surrogate, test=test)
    if config.attack_name == "random_swap":
        return random_swap_attack(train, config)
    if config.attack_name == "jsd_swap":
        return jsd_swap_attack(train, config, divergence=divergence)
    raise ValueError(f"unknown attack {config.attack_name!r}")  # pragma: no cover
