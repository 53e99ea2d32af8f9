"""Projected gradient descent attacks and class-pair universal perturbations.

All perturbations are additive image deltas constrained to an L-inf ball of
radius epsilon and to the valid image range: after every step the accumulated
delta is clipped to [-eps, +eps] and image+delta is projected back into
[0, 1]. Deltas are float32; the ball radius is floored to the largest float32
value not exceeding the requested budget, so a zero-tolerance `<= epsilon`
check holds in float64 as well.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import ImageDataset, PIXEL_DTYPE
from .models import ClassifierHandle, to_nchw
from .utils import STEALTH_EPSILON, dtype_floor

logger = logging.getLogger(__name__)

PGD_MODES = ("targeted", "untargeted")


@dataclass(frozen=True)
class PGDConfig:
    """PGD parameters.

    step_size defaults to 2 * epsilon / n_iter so every point of the ball is
    reachable from any start. n_iter = 0 is the explicit no-op (zero delta).
    """

    epsilon: float = float(STEALTH_EPSILON)
    n_iter: int = 10
    step_size: float | None = None
    mode: str = "targeted"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.n_iter < 0:
            raise ValueError(f"n_iter must be >= 0, got {self.n_iter}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.mode not in PGD_MODES:
            raise ValueError(f"mode must be one of {PGD_MODES}, got {self.mode!r}")

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.0 * self.epsilon / max(self.n_iter, 1)


@dataclass(frozen=True)
class Perturbation:
    """An additive image delta with a hard L-inf budget (holds exactly post-clip)."""

    delta: np.ndarray  # (H, W, C) float32
    epsilon: float

    def __post_init__(self):
        delta = np.ascontiguousarray(self.delta, dtype=PIXEL_DTYPE)
        if not np.isfinite(delta).all():
            raise ValueError("perturbation contains non-finite values")
        budget = np.asarray(self.epsilon, dtype=delta.dtype)
        if delta.size and float(np.abs(delta).max()) > float(budget):
            raise ValueError(
                f"perturbation exceeds budget: linf={float(np.abs(delta).max())!r} "
                f"> epsilon={self.epsilon!r}"
            )
        delta.flags.writeable = False
        object.__setattr__(self, "delta", delta)

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta).max()) if self.delta.size else 0.0


def _pgd_deltas(
    images: torch.Tensor,
    classes0: torch.Tensor,
    model: torch.nn.Module,
    config: PGDConfig,
) -> torch.Tensor:
    """Core PGD loop on an NCHW batch; `classes0` are 0-indexed class targets.

    Targeted mode descends the cross-entropy toward the target class,
    untargeted ascends it away from the true class. Uses a summed loss so
    per-sample gradients are independent of the batch composition.
    """
    eps = float(dtype_floor(config.epsilon, np.float32))
    step = config.resolved_step_size
    sign = -1.0 if config.mode == "targeted" else 1.0
    model.eval()
    delta = torch.zeros_like(images)
    for iteration in range(config.n_iter):
        composite = (images + delta).detach().requires_grad_(True)
        loss = F.cross_entropy(model(composite), classes0, reduction="sum")
        grad = torch.autograd.grad(loss, composite)[0]
        if not torch.isfinite(grad).all():
            raise ArithmeticError(f"non-finite PGD gradient at iteration {iteration}")
        delta = delta + sign * step * torch.sign(grad)
        delta = torch.clamp(delta, -eps, eps)
        delta = torch.clamp(images + delta, 0.0, 1.0) - images
    # The [0,1] projection subtracts in float32 and can round a delta half an
    # ulp past the ball; the budget clip must be the final operation. It can
    # only shrink magnitudes, so image+delta stays inside [0, 1].
    return torch.clamp(delta, -eps, eps).detach()


def pgd_attack(
    image: np.ndarray,
    class_label: int,
    model: ClassifierHandle,
    config: PGDConfig,
) -> Perturbation:
    """Craft a PGD perturbation for a single image.

    `class_label` (1-indexed) is the target class in targeted mode and the
    true label in untargeted mode; callers in targeted mode must pass a target
    different from the image's true label.
    """
    image = np.asarray(image, dtype=PIXEL_DTYPE)
    if image.ndim != 3:
        raise ValueError(f"image must have shape (H, W, C), got {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image pixel values must lie in [0, 1]")
    if not 1 <= class_label <= model.n_classes:
        raise ValueError(f"class {class_label} outside [1, {model.n_classes}]")
    batch = to_nchw(image).to(model.device)
    classes0 = torch.tensor([class_label - 1], device=model.device)
    delta = _pgd_deltas(batch, classes0, model.module, config)
    return Perturbation(delta[0].cpu().numpy().transpose(1, 2, 0), config.epsilon)


def craft_cpup(
    train: ImageDataset,
    attacked_class: int,
    target_class: int,
    surrogate: ClassifierHandle,
    epsilon: float = float(STEALTH_EPSILON),
    n_iter_cpup: int = 1,
    n_iter_pgd: int = 10,
    step_size: float | None = None,
    pgd_from_composite: bool = False,
    batch_size: int = 256,
) -> Perturbation:
    """Craft the class-pair universal perturbation pushing one class toward another.

    Starting from a zero delta, makes `n_iter_cpup` passes over all attacked-
    class training images in ascending index order. For each image the current
    universal delta is added (projected into [0, 1]); if the surrogate still
    predicts the attacked class on that composite, a targeted PGD delta toward
    `target_class` is crafted for the image and accumulated into the universal
    delta, which is re-clipped to [-epsilon, +epsilon] after every update.

    By default the per-image PGD runs from the clean image, which makes the
    per-image deltas independent of the accumulation state; set
    `pgd_from_composite=True` to run PGD from image+current-delta instead.

    Raises:
        ValueError: attacked_class == target_class, or the attacked class is
            empty.
    """
    if attacked_class == target_class:
        raise ValueError(f"attacked and target class must differ, got {attacked_class}")
    eps32 = float(dtype_floor(epsilon, np.float32))
    pgd_config = PGDConfig(epsilon=epsilon, n_iter=n_iter_pgd, step_size=step_size,
                           mode="targeted")
    indices = train.class_indices(attacked_class)
    if indices.size == 0:
        raise ValueError(f"class {attacked_class} has no training images")
    shape = train.image_shape
    if n_iter_cpup == 0:
        return Perturbation(np.zeros(shape, dtype=PIXEL_DTYPE), epsilon)

    device = surrogate.device
    images = to_nchw(np.asarray(train.images[indices])).to(device)
    targets0 = torch.full((1,), target_class - 1, device=device)
    surrogate.module.eval()

    precomputed = None
    if not pgd_from_composite:
        chunks = []
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start:start + batch_size]
            chunks.append(_pgd_deltas(chunk, targets0.expand(chunk.shape[0]),
                                      surrogate.module, pgd_config))
        precomputed = torch.cat(chunks, dim=0)

    cpup = torch.zeros(images.shape[1:], device=device)
    attacked0 = attacked_class - 1
    updates = 0
    for _ in range(n_iter_cpup):
        for k in range(images.shape[0]):
            composite = torch.clamp(images[k] + cpup, 0.0, 1.0)
            with torch.no_grad():
                predicted = int(surrogate.module(composite[None]).argmax(dim=1))
            if predicted != attacked0:
                continue
            if precomputed is not None:
                delta_k = precomputed[k]
            else:
                delta_k = _pgd_deltas(composite[None], targets0, surrogate.module,
                                      pgd_config)[0]
            cpup = torch.clamp(cpup + delta_k, -eps32, eps32)
            updates += 1
    logger.debug("cpup class %d -> %d: %d updates over %d images", attacked_class,
                 target_class, updates, images.shape[0] * n_iter_cpup)
    return Perturbation(cpup.cpu().numpy().transpose(1, 2, 0), epsilon)
