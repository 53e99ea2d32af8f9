"""Dataset loading, indexing, poison-target sampling, and poisoned materialization.

Images live in memory as float32 arrays of shape (n, H, W, C) with values in
[0, 1]; labels are 1-indexed integers in [1, n_classes]. Datasets are immutable
after construction (the backing arrays are marked read-only) and therefore safe
to share across threads.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .utils import FormatError, RecipeMismatchError, atomic_write_text

PIXEL_DTYPE = np.float32
SPLITS = ("train", "test")

DATASET_DIR_VERSION = 1


@dataclass(frozen=True)
class ImageDataset:
    """A labeled image collection for one split of a classification dataset.

    Attributes:
        images: float32 array (n, H, W, C), every value in [0, 1].
        labels: int64 array (n,), every value in [1, n_classes].
        split: "train" or "test".
        n_classes: number of classes.
        dataset_id: stable identity string; recipes and manifests bind to it.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str
    n_classes: int
    dataset_id: str

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=PIXEL_DTYPE)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must have shape (n, H, W, C), got {images.shape}")
        if labels.ndim != 1:
            raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
        if images.shape[0] != labels.shape[0]:
            raise ValueError(
                f"images/labels length mismatch: {images.shape[0]} vs {labels.shape[0]}"
            )
        if images.shape[0] == 0:
            raise ValueError("dataset must contain at least one image")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be positive, got {self.n_classes}")
        if not ((images >= 0.0).all() and (images <= 1.0).all()):
            raise ValueError("pixel values must lie in [0, 1]")
        if labels.min() < 1 or labels.max() > self.n_classes:
            raise ValueError(
                f"labels must lie in [1, {self.n_classes}], "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self, class_label: int) -> np.ndarray:
        """Ascending dataset indices of all items with the given 1-indexed label."""
        if not 1 <= class_label <= self.n_classes:
            raise ValueError(f"class {class_label} outside [1, {self.n_classes}]")
        return np.flatnonzero(self.labels == class_label)

    def class_counts(self) -> np.ndarray:
        """Per-class item counts; entry c-1 is the count of class c."""
        return np.bincount(self.labels, minlength=self.n_classes + 1)[1:]


def load_dataset(source, split: str, data_dir=None, download: bool = False) -> ImageDataset:
    """Load a dataset by registry name ("cifar10", "cifar100", "synthetic10") or path.

    Registry CIFAR loads go through torchvision under `data_dir` (default
    $TRAINWRECK_DATA_DIR or ./data); pass download=True to fetch missing data.
    A path must point to a dataset directory written by `save_dataset`.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    name = os.fspath(source)
    if name == "cifar10":
        return _load_cifar(name, 10, split, data_dir, download)
    if name == "cifar100":
        return _load_cifar(name, 100, split, data_dir, download)
    if name == "synthetic10":
        per_class = 500 if split == "train" else 100
        return synthetic_dataset(split, per_class=per_class)
    if os.path.isdir(name):
        return _load_dataset_dir(name, split)
    raise FileNotFoundError(
        f"dataset source {source!r} is neither a registry name "
        f"(cifar10, cifar100, synthetic10) nor an existing dataset directory"
    )


def _resolve_data_dir(data_dir) -> str:
    if data_dir is not None:
        return os.fspath(data_dir)
    return os.environ.get("TRAINWRECK_DATA_DIR", "data")


def _load_cifar(name: str, n_classes: int, split: str, data_dir, download: bool) -> ImageDataset:
    from torchvision import datasets as tv_datasets

    root = _resolve_data_dir(data_dir)
    loader = tv_datasets.CIFAR10 if name == "cifar10" else tv_datasets.CIFAR100
    try:
        raw = loader(root=root, train=(split == "train"), download=download)
    except (RuntimeError, OSError) as exc:
        raise FileNotFoundError(
            f"{name} not available under {root!r} ({exc}); "
            f"pass download=True or place the archives there"
        ) from None
    images = np.asarray(raw.data, dtype=PIXEL_DTYPE) / 255.0
    labels = np.asarray(raw.targets, dtype=np.int64) + 1
    return ImageDataset(images, labels, split, n_classes, f"{name}:{split}")


def _load_dataset_dir(path: str, split: str) -> ImageDataset:
    meta_path = os.path.join(path, "dataset.json")
    if not os.path.isfile(meta_path):
        raise FileNotFoundError(f"no dataset.json under {path!r}")
    try:
        with open(meta_path, "r", encoding="utf-8") as handle:
            meta = json.load(handle)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt dataset.json in {path!r}: {exc}") from None
    if meta.get("format_version") != DATASET_DIR_VERSION:
        raise FormatError(
            f"unsupported dataset directory version {meta.get('format_version')!r} in {path!r}"
        )
    splits = meta.get("splits", {})
    if split not in splits:
        raise FileNotFoundError(f"split {split!r} not present in {path!r}")
    images_path = os.path.join(path, f"{split}_images.npy")
    labels_path = os.path.join(path, f"{split}_labels.npy")
    for record in (images_path, labels_path):
        if not os.path.isfile(record):
            raise FileNotFoundError(f"missing dataset record {record!r}")
    images = np.load(images_path, allow_pickle=False)
    labels = np.load(labels_path, allow_pickle=False)
    try:
        return ImageDataset(
            images, labels, split, int(meta["n_classes"]), str(splits[split]["dataset_id"])
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"dataset.json in {path!r} missing field: {exc}") from None
    except ValueError as exc:
        raise FormatError(f"invalid dataset records in {path!r}: {exc}") from None


def save_dataset(dataset: ImageDataset, out_dir) -> None:
    """Write a dataset directory ({split}_images.npy, {split}_labels.npy, dataset.json).

    Saving a second split into the same directory merges the metadata.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    meta_path = os.path.join(out_dir, "dataset.json")
    meta = {"format_version": DATASET_DIR_VERSION, "n_classes": dataset.n_classes, "splits": {}}
    if os.path.isfile(meta_path):
        with open(meta_path, "r", encoding="utf-8") as handle:
            existing = json.load(handle)
        if existing.get("n_classes") == dataset.n_classes:
            meta = existing
    np.save(os.path.join(out_dir, f"{dataset.split}_images.npy"), np.asarray(dataset.images))
    np.save(os.path.join(out_dir, f"{dataset.split}_labels.npy"), np.asarray(dataset.labels))
    meta.setdefault("splits", {})[dataset.split] = {"dataset_id": dataset.dataset_id}
    atomic_write_text(meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")


def subsample_per_class(dataset: ImageDataset, per_class: int, seed: int) -> ImageDataset:
    """Uniform per-class subsample without replacement; deterministic in the seed."""
    if per_class < 1:
        raise ValueError(f"per_class must be positive, got {per_class}")
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(1, dataset.n_classes + 1):
        idx = dataset.class_indices(c)
        if len(idx) < per_class:
            raise ValueError(f"class {c} has only {len(idx)} items, need {per_class}")
        keep.append(np.sort(rng.choice(idx, size=per_class, replace=False)))
    keep = np.concatenate(keep)
    return ImageDataset(
        dataset.images[keep].copy(),
        dataset.labels[keep].copy(),
        dataset.split,
        dataset.n_classes,
        f"{dataset.dataset_id}|sub{per_class}s{seed}",
    )


def sample_poison_targets(dataset: ImageDataset, poison_rate: float, seed: int) -> dict:
    """Select the per-class poison index sets for a given poison rate.

    For every class c, draws exactly floor(poison_rate * n_c) distinct class-c
    indices uniformly without replacement. Pure function of (dataset, rate,
    seed): repeated calls agree elementwise.

    Returns:
        dict mapping class label (1-indexed) to a sorted int64 index array.
    """
    if not 0.0 <= poison_rate <= 1.0:
        raise ValueError(f"poison_rate must lie in [0, 1], got {poison_rate}")
    if dataset.split != "train":
        raise ValueError("poison targets are sampled from the train split only")
    rng = np.random.default_rng(seed)
    targets = {}
    for c in range(1, dataset.n_classes + 1):
        idx = dataset.class_indices(c)
        k = math.floor(poison_rate * len(idx))
        chosen = rng.choice(idx, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
        targets[c] = np.sort(chosen.astype(np.int64))
    return targets


def materialize_poisoned(dataset: ImageDataset, recipe) -> ImageDataset:
    """Apply a poison recipe to a clean dataset, returning the poisoned copy.

    Perturb edits produce clip(image + delta, 0, 1); swap edits exchange the
    two images while leaving both labels in place. Untouched entries are
    bit-identical to the input. The input dataset is never mutated.
    """
    if recipe.dataset_id != dataset.dataset_id:
        raise RecipeMismatchError(
            f"recipe was crafted for {recipe.dataset_id!r}, "
            f"dataset is {dataset.dataset_id!r}"
        )
    n = dataset.n
    images = dataset.images.copy()
    shape = dataset.image_shape
    for edit in recipe.edits:
        if edit.kind == "perturb":
            if not 0 <= edit.index < n:
                raise IndexError(f"perturb edit index {edit.index} outside [0, {n})")
            delta = recipe.perturbations[edit.tensor]
            if delta.shape != shape:
                raise FormatError(
                    f"perturbation {edit.tensor!r} has shape {delta.shape}, "
                    f"images have shape {shape}"
                )
            images[edit.index] = np.clip(images[edit.index] + delta, 0.0, 1.0)
        elif edit.kind == "swap":
            a, b = edit.index_a, edit.index_b
            if not (0 <= a < n and 0 <= b < n):
                raise IndexError(f"swap edit indices ({a}, {b}) outside [0, {n})")
            tmp = images[a].copy()
            images[a] = images[b]
            images[b] = tmp
        else:  # pragma: no cover - recipe validation rejects unknown kinds
            raise FormatError(f"unknown edit kind {edit.kind!r}")
    return ImageDataset(
        images, dataset.labels.copy(), dataset.split, dataset.n_classes, dataset.dataset_id
    )


def synthetic_dataset(
    split: str,
    n_classes: int = 10,
    per_class: int = 500,
    image_hw: int = 32,
    channels: int = 3,
    seed: int = 7,
    template_scale: float = 0.28,
    sibling_scale: float = 0.02,
    noise_scale: float = 0.06,
) -> ImageDataset:
    """Generate a CIFAR-shaped synthetic classification dataset.

    Classes come in sibling pairs: each pair shares a smooth low-frequency
    anchor texture and differs by a smaller class-specific offset, so the
    class-similarity structure is nontrivial (every class has one close
    neighbor). Instances add smooth per-image jitter plus pixel noise. Train
    and test splits draw from the same class distributions. The default
    sibling offset keeps within-pair margins comparable to an 8/255 L-inf
    ball, so small-perturbation poisoning has a measurable effect while clean
    classes remain well separable.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    if n_classes < 2 or n_classes % 2:
        raise ValueError(f"n_classes must be an even number >= 2, got {n_classes}")
    import torch

    def smooth_field(rng, count, grid):
        # low-res gaussian grid upsampled bilinearly to the image resolution
        coarse = rng.standard_normal((count, channels, grid, grid)).astype(np.float32)
        up = torch.nn.functional.interpolate(
            torch.from_numpy(coarse), size=(image_hw, image_hw),
            mode="bilinear", align_corners=False,
        )
        return up.numpy().transpose(0, 2, 3, 1)

    template_rng = np.random.default_rng([seed, 0])
    anchors = smooth_field(template_rng, n_classes // 2, grid=4)
    offsets = smooth_field(template_rng, n_classes, grid=8)
    templates = np.repeat(anchors, 2, axis=0) * template_scale + offsets * sibling_scale

    split_rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    images = np.empty((n_classes * per_class, image_hw, image_hw, channels), dtype=PIXEL_DTYPE)
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    for c in range(n_classes):
        jitter = smooth_field(split_rng, per_class, grid=8) * noise_scale
        grain = split_rng.standard_normal(jitter.shape).astype(np.float32) * (noise_scale / 4)
        block = 0.5 + templates[c][None] + jitter + grain
        lo, hi = c * per_class, (c + 1) * per_class
        images[lo:hi] = np.clip(block, 0.0, 1.0)
        labels[lo:hi] = c + 1
    dataset_id = f"synthetic{n_classes}x{per_class}-s{seed}:{split}"
    return ImageDataset(images, labels, split, n_classes, dataset_id)
