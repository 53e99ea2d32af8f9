"""Pairwise class-distribution divergence from auxiliary features.

For a pair of classes (i, j), every feature column is summarized by
equal-width histograms whose bins span the pooled min-max of the pair, and
the per-feature Jensen-Shannon divergence is accumulated:

    d(i, j) = sum_f  1/2 * KL(h_f_i || h_f_pooled) + 1/2 * KL(h_f_j || h_f_pooled)

where h_f_pooled is the histogram of the *pooled* data of both classes (not
the average of the two class histograms) and KL uses natural logarithms.
The full symmetric matrix of d(i, j) values drives target-class selection:
each attacked class is pushed toward its lowest-divergence neighbor.

Binning convention (shared with the tests' independent oracle): for a value v
in [lo, hi], bin = floor((v - lo) / (hi - lo) * n_bins), with v == hi assigned
to the last bin; a constant feature (lo == hi) collapses to a single occupied
bin and contributes zero divergence.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .datasets import ImageDataset
from .utils import FormatError, atomic_write_text

# Additive smoothing applied to every histogram bin before KL, so empty bins
# can never produce infinite divergence.
HISTOGRAM_SMOOTHING = 1e-12
DEFAULT_N_BINS = 64


@dataclass(frozen=True)
class FeatureMatrix:
    """Auxiliary per-image feature rows, order-aligned with the source dataset."""

    values: np.ndarray  # (n, n_feat)
    labels: np.ndarray  # (n,), 1-indexed class labels
    n_classes: int
    extractor_id: str

    def __post_init__(self):
        values = np.ascontiguousarray(self.values)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if values.ndim != 2:
            raise ValueError(f"feature values must be 2-D, got shape {values.shape}")
        if values.shape[0] != labels.shape[0]:
            raise ValueError(
                f"feature rows ({values.shape[0]}) do not match labels ({labels.shape[0]})"
            )
        if not np.isfinite(values).all():
            raise ValueError("feature values must be finite")
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be positive, got {self.n_classes}")
        if labels.size and (labels.min() < 1 or labels.max() > self.n_classes):
            raise ValueError(f"labels must lie in [1, {self.n_classes}]")
        values.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def class_rows(self, class_label: int) -> np.ndarray:
        return self.values[self.labels == class_label]


@dataclass(frozen=True)
class HistogramSet:
    """Per-feature normalized histograms for a set of classes plus their pooled mixture."""

    classes: tuple
    class_hists: dict  # class label -> (n_feat, n_bins) float64, rows sum to 1
    pooled: np.ndarray  # (n_feat, n_bins) float64, rows sum to 1
    n_bins: int

    def __post_init__(self):
        for label, hist in list(self.class_hists.items()) + [("pooled", self.pooled)]:
            if (hist < 0).any():
                raise ValueError(f"histogram for {label!r} has negative entries")
            sums = hist.sum(axis=1)
            if not np.allclose(sums, 1.0, rtol=0.0, atol=1e-9):
                raise ValueError(f"histogram for {label!r} does not sum to 1")


class FlattenExtractor:
    """Identity features: raw pixels flattened row-major."""

    extractor_id = "flatten"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return images.reshape(images.shape[0], -1)


class PoolExtractor:
    """Channelwise average-pooled pixels on a k x k grid, flattened."""

    def __init__(self, grid: int):
        if grid < 1:
            raise ValueError(f"pool grid must be positive, got {grid}")
        self.grid = grid
        self.extractor_id = f"avgpool{grid}"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        import torch

        batch = torch.from_numpy(images.transpose(0, 3, 1, 2).copy())
        pooled = torch.nn.functional.adaptive_avg_pool2d(batch, self.grid)
        return pooled.reshape(pooled.shape[0], -1).numpy()


class RandomConvExtractor:
    """Fixed-seed random convolutional features; a cheap stand-in for a
    pretrained backbone when no weights are available."""

    def __init__(self, seed: int = 108):
        import torch
        import torch.nn as nn

        self.extractor_id = f"randcnn{seed}"
        generator = torch.Generator().manual_seed(seed)
        layers = []
        channels = [3, 32, 64]
        for c_in, c_out in zip(channels, channels[1:]):
            conv = nn.Conv2d(c_in, c_out, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * 0.2)
                conv.bias.zero_()
            layers += [conv, nn.ReLU(), nn.AvgPool2d(2)]
        self._net = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(4)).eval()

    def __call__(self, images: np.ndarray) -> np.ndarray:
        import torch

        with torch.no_grad():
            batch = torch.from_numpy(images.transpose(0, 3, 1, 2).copy())
            out = self._net(batch)
        return out.reshape(out.shape[0], -1).numpy()


class PretrainedExtractor:
    """torchvision backbone features (network access required to fetch weights)."""

    def __init__(self, model_name: str, resize_to: int = 224):
        import torch
        from torchvision import models as tv_models

        weights_enum = tv_models.get_model_weights(model_name)
        self.weights = weights_enum.DEFAULT
        model = tv_models.get_model(model_name, weights=self.weights)
        if hasattr(model, "heads"):
            model.heads = torch.nn.Identity()
        elif hasattr(model, "fc"):
            model.fc = torch.nn.Identity()
        elif hasattr(model, "classifier"):
            model.classifier = torch.nn.Identity()
        self._net = model.eval()
        self.resize_to = resize_to
        self.extractor_id = f"tv:{model_name}"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        import torch

        with torch.no_grad():
            batch = torch.from_numpy(images.transpose(0, 3, 1, 2).copy())
            batch = torch.nn.functional.interpolate(
                batch, size=(self.resize_to, self.resize_to),
                mode="bilinear", align_corners=False,
            )
            mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
            std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
            out = self._net((batch - mean) / std)
        return out.reshape(out.shape[0], -1).numpy()


def make_extractor(extractor_id: str):
    """Build a feature extractor from its identifier string."""
    if extractor_id == "flatten":
        return FlattenExtractor()
    if extractor_id.startswith("avgpool"):
        return PoolExtractor(int(extractor_id[len("avgpool"):]))
    if extractor_id.startswith("randcnn"):
        suffix = extractor_id[len("randcnn"):]
        return RandomConvExtractor(int(suffix) if suffix else 108)
    if extractor_id.startswith("tv:"):
        return PretrainedExtractor(extractor_id[3:])
    raise ValueError(f"unknown extractor id {extractor_id!r}")


def extract_features(dataset: ImageDataset, extractor, batch_size: int = 512) -> FeatureMatrix:
    """Run the extractor over every image, preserving dataset order.

    Deterministic for a fixed extractor: extractors run in inference mode with
    no stochastic components.
    """
    rows = []
    for start in range(0, dataset.n, batch_size):
        batch = np.asarray(dataset.images[start:start + batch_size])
        try:
            rows.append(np.asarray(extractor(batch), dtype=np.float64))
        except Exception as exc:
            raise RuntimeError(
                f"feature extraction failed on images [{start}, "
                f"{min(start + batch_size, dataset.n)}): {exc}"
            ) from exc
    values = np.concatenate(rows, axis=0)
    return FeatureMatrix(values, dataset.labels.copy(), dataset.n_classes,
                         getattr(extractor, "extractor_id", "custom"))


def _bin_column(column: np.ndarray, lo: float, hi: float, n_bins: int) -> np.ndarray:
    """Assign each value to its equal-width bin index (see module docstring)."""
    if hi == lo:
        return np.zeros(column.shape[0], dtype=np.int64)
    scaled = (column - lo) / (hi - lo)
    idx = np.floor(scaled * n_bins).astype(np.int64)
    return np.minimum(idx, n_bins - 1)


def class_histograms(features: FeatureMatrix, classes, n_bins: int) -> HistogramSet:
    """Per-feature normalized histograms for the given classes.

    Bin edges span the pooled min-max of the requested classes per feature, so
    every class histogram and the pooled mixture share the same bins. The
    pooled histogram is computed from the concatenated data of all requested
    classes, not by averaging the class histograms.
    """
    if n_bins < 2:
        raise ValueError(f"n_bins must be at least 2, got {n_bins}")
    if classes is None:
        classes = tuple(range(1, features.n_classes + 1))
    classes = tuple(int(c) for c in classes)
    masks = {}
    for c in classes:
        mask = features.labels == c
        if not mask.any():
            raise ValueError(f"class {c} has no feature rows")
        masks[c] = mask
    pooled_mask = np.logical_or.reduce([masks[c] for c in classes])
    pooled_rows = features.values[pooled_mask]
    lows = pooled_rows.min(axis=0)
    highs = pooled_rows.max(axis=0)

    n_feat = features.n_features

    def histogram_for(rows: np.ndarray) -> np.ndarray:
        hist = np.empty((n_feat, n_bins), dtype=np.float64)
        for f in range(n_feat):
            idx = _bin_column(rows[:, f], float(lows[f]), float(highs[f]), n_bins)
            hist[f] = np.bincount(idx, minlength=n_bins)
        return hist / rows.shape[0]

    class_hists = {c: histogram_for(features.values[masks[c]]) for c in classes}
    return HistogramSet(classes, class_hists, histogram_for(pooled_rows), n_bins)


def _smooth(hist: np.ndarray) -> np.ndarray:
    smoothed = hist + HISTOGRAM_SMOOTHING
    return smoothed / smoothed.sum(axis=1, keepdims=True)


def jsd_pair(features: FeatureMatrix, class_i: int, class_j: int,
             n_bins: int = DEFAULT_N_BINS) -> float:
    """Aggregate Jensen-Shannon divergence between two classes over all features.

    Natural-log KL against the pooled-mixture histogram, summed over features;
    every histogram gets additive smoothing before KL so the result is always
    finite. Identical class data yields exactly zero.
    """
    if class_i == class_j:
        raise ValueError(f"class pair must be distinct, got ({class_i}, {class_j})")
    hists = class_histograms(features, (class_i, class_j), n_bins)
    p_i = _smooth(hists.class_hists[class_i])
    p_j = _smooth(hists.class_hists[class_j])
    mix = _smooth(hists.pooled)
    kl_i = (p_i * np.log(p_i / mix)).sum(axis=1)
    kl_j = (p_j * np.log(p_j / mix)).sum(axis=1)
    total = float((0.5 * kl_i + 0.5 * kl_j).sum())
    return max(total, 0.0)


@dataclass(frozen=True)
class DivergenceMatrix:
    """Symmetric nonnegative class-divergence matrix with zero diagonal.

    Entry [i-1][j-1] is the aggregate JSD between classes i and j.
    """

    values: np.ndarray
    bin_count: int
    extractor_id: str

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"divergence matrix must be square, got {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("divergence matrix must be finite")
        if (values < 0).any():
            raise ValueError("divergence matrix must be nonnegative")
        if np.abs(np.diag(values)).max() > 0:
            raise ValueError("divergence matrix diagonal must be zero")
        if np.abs(values - values.T).max() > 1e-9:
            raise ValueError("divergence matrix must be symmetric within 1e-9")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]


def divergence_matrix(features: FeatureMatrix, n_bins: int = DEFAULT_N_BINS) -> DivergenceMatrix:
    """Compute the full pairwise divergence matrix (upper triangle, mirrored)."""
    n = features.n_classes
    for c in range(1, n + 1):
        if not (features.labels == c).any():
            raise ValueError(f"class {c} has no feature rows")
    values = np.zeros((n, n), dtype=np.float64)
    for i in range(1, n + 1):
        for j in range(i + 1, n + 1):
            d = jsd_pair(features, i, j, n_bins)
            values[i - 1, j - 1] = d
            values[j - 1, i - 1] = d
    return DivergenceMatrix(values, n_bins, features.extractor_id)


def closest_class(matrix: DivergenceMatrix, class_a: int) -> int:
    """The class with minimum divergence from class_a; ties go to the lowest index."""
    n = matrix.n_classes
    if n < 2:
        raise ValueError("closest_class needs at least 2 classes")
    if not 1 <= class_a <= n:
        raise ValueError(f"class {class_a} outside [1, {n}]")
    row = matrix.values[class_a - 1].copy()
    row[class_a - 1] = np.inf
    return int(np.argmin(row)) + 1


def save_divergence_matrix(matrix: DivergenceMatrix, path) -> None:
    """Write the matrix as UTF-8 text, 17 significant digits (lossless float64)."""
    lines = [
        f"n_classes {matrix.n_classes}",
        f"bin_count {matrix.bin_count}",
        f"extractor_id {matrix.extractor_id}",
    ]
    for row in matrix.values:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_divergence_matrix(path) -> DivergenceMatrix:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no divergence matrix at {os.fspath(path)!r}")
    with open(path, "r", encoding="utf-8") as handle:
        lines = [line.rstrip("\n") for line in handle]
    try:
        n_classes = int(lines[0].split(" ", 1)[1])
        bin_count = int(lines[1].split(" ", 1)[1])
        extractor_id = lines[2].split(" ", 1)[1]
        rows = [np.array(line.split(), dtype=np.float64) for line in lines[3:3 + n_classes]]
        values = np.stack(rows)
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed divergence matrix file: {exc}") from None
    if values.shape != (n_classes, n_classes):
        raise FormatError(
            f"divergence matrix file declares {n_classes} classes "
            f"but contains shape {values.shape}"
        )
    return DivergenceMatrix(values, bin_count, extractor_id)
