"""Classifier architectures, the shared training loop, and checkpoint I/O.

Models consume images in [0, 1] directly (no mean/std normalization), so the
attack code can work in raw pixel units. Training is plain momentum-SGD with
cosine decay and no augmentation, fixed so clean-vs-poisoned comparisons stay
apples to apples.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .datasets import ImageDataset
from .utils import ConfigError, NonFiniteLossError, atomic_write_text

logger = logging.getLogger(__name__)


def to_nchw(images: np.ndarray) -> torch.Tensor:
    """(n, H, W, C) float32 numpy in [0,1] -> (n, C, H, W) torch tensor."""
    if images.ndim == 3:
        images = images[None]
    return torch.from_numpy(images.transpose(0, 3, 1, 2).copy())


@dataclass
class TrainingConfig:
    """Hyperparameters for the shared training loop."""

    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cosine_schedule: bool = True
    device: str = "auto"  # "auto" picks cuda when available

    def resolve_device(self) -> torch.device:
        if self.device == "auto":
            return torch.device("cuda" if torch.cuda.is_available() else "cpu")
        return torch.device(self.device)


class ClassifierHandle:
    """A trained classifier plus the metadata needed to use it safely.

    predict() always returns labels in [1, n_classes]. Inference methods are
    read-only and safe for concurrent use; training mutates parameters and is
    single-writer.
    """

    def __init__(self, module: nn.Module, architecture_id: str, n_classes: int,
                 input_shape, device=None):
        self.module = module
        self.architecture_id = architecture_id
        self.n_classes = n_classes
        self.input_shape = tuple(input_shape)
        self.device = torch.device(device) if device is not None else torch.device("cpu")
        self.module.to(self.device)

    def logits(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        single = images.ndim == 3
        batch = to_nchw(np.asarray(images, dtype=np.float32))
        outputs = []
        self.module.eval()
        with torch.no_grad():
            for start in range(0, batch.shape[0], batch_size):
                chunk = batch[start:start + batch_size].to(self.device)
                outputs.append(self.module(chunk).cpu().numpy())
        out = np.concatenate(outputs, axis=0)
        return out[0] if single else out

    def predict(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Top-1 labels, 1-indexed."""
        out = self.logits(images, batch_size=batch_size)
        return np.argmax(out, axis=-1) + 1

    def accuracy(self, dataset: ImageDataset, batch_size: int = 512) -> float:
        predicted = self.predict(dataset.images, batch_size=batch_size)
        return float((predicted == dataset.labels).mean())


class SimpleCNN(nn.Module):
    """Compact 3-block convnet; the default surrogate at desk scale."""

    def __init__(self, n_classes: int, in_channels: int = 3):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1),
            nn.BatchNorm2d(128),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.classifier = nn.Linear(128 * 16, n_classes)

    def forward(self, x):
        x = self.features(x)
        return self.classifier(x.flatten(1))


class SmallVGG(nn.Module):
    """Two VGG-style double-conv blocks; a structurally different compact target."""

    def __init__(self, n_classes: int, in_channels: int = 3):
        super().__init__()
        def block(c_in, c_out, pool_first):
            layers = [nn.MaxPool2d(2)] if pool_first else []
            return layers + [
                nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(),
                nn.Conv2d(c_out, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(),
                nn.MaxPool2d(2),
            ]
        self.features = nn.Sequential(
            *block(in_channels, 48, pool_first=True),
            *block(48, 96, pool_first=False),
            nn.AdaptiveAvgPool2d(2),
        )
        self.classifier = nn.Sequential(
            nn.Linear(96 * 4, 192), nn.ReLU(), nn.Linear(192, n_classes),
        )

    def forward(self, x):
        x = self.features(x)
        return self.classifier(x.flatten(1))


class TinyMLP(nn.Module):
    """Flatten + one hidden layer; for fast toy-scale tests."""

    def __init__(self, n_classes: int, input_shape):
        super().__init__()
        n_in = int(np.prod(input_shape))
        self.net = nn.Sequential(nn.Flatten(), nn.Linear(n_in, 128), nn.ReLU(),
                                 nn.Linear(128, n_classes))

    def forward(self, x):
        return self.net(x)


def build_model(architecture_id: str, n_classes: int, input_shape) -> nn.Module:
    """Instantiate an architecture by id.

    Ids: "simple_cnn", "small_vgg", "mlp", or "tv:<torchvision model>" with an
    optional ":pretrained" suffix (weights fetched over the network). An
    unknown id raises ConfigError.
    """
    h, w, c = input_shape
    if architecture_id == "simple_cnn":
        return SimpleCNN(n_classes, in_channels=c)
    if architecture_id == "small_vgg":
        return SmallVGG(n_classes, in_channels=c)
    if architecture_id == "mlp":
        return TinyMLP(n_classes, input_shape)
    if architecture_id.startswith("tv:"):
        return _build_torchvision(architecture_id, n_classes)
    raise ConfigError(f"unknown architecture id {architecture_id!r}")


def _build_torchvision(architecture_id: str, n_classes: int) -> nn.Module:
    from torchvision import models as tv_models

    parts = architecture_id.split(":")
    name = parts[1]
    pretrained = "pretrained" in parts[2:]
    weights = tv_models.get_model_weights(name).DEFAULT if pretrained else None
    model = tv_models.get_model(name, weights=weights)
    _replace_head(model, n_classes)
    return model


def _replace_head(model: nn.Module, n_classes: int) -> None:
    if hasattr(model, "fc") and isinstance(model.fc, nn.Linear):
        model.fc = nn.Linear(model.fc.in_features, n_classes)
    elif hasattr(model, "heads"):
        head = model.heads.head if hasattr(model.heads, "head") else model.heads
        model.heads = nn.Linear(head.in_features, n_classes)
    elif hasattr(model, "classifier"):
        last = model.classifier[-1] if isinstance(model.classifier, nn.Sequential) \
            else model.classifier
        new = nn.Linear(last.in_features, n_classes)
        if isinstance(model.classifier, nn.Sequential):
            model.classifier[-1] = new
        else:
            model.classifier = new
    else:
        raise ConfigError("could not locate the classification head to replace")


def _head_parameters(model: nn.Module):
    linears = [m for m in model.modules() if isinstance(m, nn.Linear)]
    if not linears:
        raise ConfigError("finetune mode requires a linear classification head")
    return list(linears[-1].parameters())


def train_classifier(
    train: ImageDataset,
    test: ImageDataset,
    architecture_id: str,
    epochs: int,
    seed: int,
    config: TrainingConfig | None = None,
    finetune: bool = False,
):
    """Train a classifier and record its test top-1 accuracy after every epoch.

    Deterministic given the seed up to backend-documented nondeterminism: the
    seed fixes initialization and the per-epoch shuffle order.

    Returns:
        (ClassifierHandle, list of per-epoch test accuracies)

    Raises:
        ConfigError: epochs < 1 or train/test shape or class-count mismatch.
        NonFiniteLossError: the loss became NaN/inf (carries the epoch index).
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if train.image_shape != test.image_shape:
        raise ConfigError(
            f"train/test image shapes differ: {train.image_shape} vs {test.image_shape}"
        )
    if train.n_classes != test.n_classes:
        raise ConfigError(
            f"train/test class counts differ: {train.n_classes} vs {test.n_classes}"
        )
    config = config or TrainingConfig()
    device = config.resolve_device()
    torch.manual_seed(seed)
    model = build_model(architecture_id, train.n_classes, train.image_shape).to(device)

    x_train = to_nchw(np.asarray(train.images))
    y_train = torch.from_numpy(np.asarray(train.labels) - 1)
    parameters = _head_parameters(model) if finetune else list(model.parameters())
    if finetune:
        trainable = {id(p) for p in parameters}
        for p in model.parameters():
            p.requires_grad_(id(p) in trainable)
    optimizer = torch.optim.SGD(
        parameters, lr=config.learning_rate, momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    scheduler = (
        torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=epochs)
        if config.cosine_schedule else None
    )
    loss_fn = nn.CrossEntropyLoss()
    shuffle_rng = torch.Generator().manual_seed(seed)
    handle = ClassifierHandle(model, architecture_id, train.n_classes,
                              train.image_shape, device)

    curve = []
    n = x_train.shape[0]
    for epoch in range(epochs):
        model.train()
        order = torch.randperm(n, generator=shuffle_rng)
        for start in range(0, n, config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            inputs = x_train[batch_idx].to(device)
            targets = y_train[batch_idx].to(device)
            optimizer.zero_grad()
            loss = loss_fn(model(inputs), targets)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(epoch)
            loss.backward()
            optimizer.step()
        if scheduler is not None:
            scheduler.step()
        accuracy = handle.accuracy(test)
        curve.append(accuracy)
        logger.debug("%s epoch %d/%d test acc %.4f", architecture_id, epoch + 1,
                     epochs, accuracy)
    return handle, curve


def train_surrogate(
    train: ImageDataset,
    test: ImageDataset,
    architecture_id: str = "simple_cnn",
    epochs: int = 10,
    seed: int = 0,
    config: TrainingConfig | None = None,
):
    """Train the attacker-side surrogate; returns (handle, clean test accuracy)."""
    handle, curve = train_classifier(train, test, architecture_id, epochs, seed, config)
    return handle, curve[-1]


def save_checkpoint(handle: ClassifierHandle, path, **metadata) -> None:
    """Save model weights plus a JSON metadata sidecar (<path>.json)."""
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(handle.module.state_dict(), path)
    sidecar = {
        "architecture_id": handle.architecture_id,
        "n_classes": handle.n_classes,
        "input_shape": list(handle.input_shape),
        **metadata,
    }
    atomic_write_text(path + ".json", json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, device: str = "cpu") -> ClassifierHandle:
    path = os.fspath(path)
    with open(path + ".json", "r", encoding="utf-8") as handle:
        sidecar = json.load(handle)
    model = build_model(sidecar["architecture_id"], sidecar["n_classes"],
                        tuple(sidecar["input_shape"]))
    model.load_state_dict(torch.load(path, map_location=device, weights_only=True))
    return ClassifierHandle(model, sidecar["architecture_id"], sidecar["n_classes"],
                            tuple(sidecar["input_shape"]), device)
