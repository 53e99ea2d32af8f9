"""Poison recipes: serializable edit lists that reproduce a poisoned dataset.

A recipe stores perturbation tensors plus the index edits that apply them (or
swap pairs), never full poisoned image copies, so attacks stay reproducible
and diffable.

Recipe file format (format_version 1). A recipe file is an uncompressed ZIP
archive with a fixed member order and zeroed timestamps, so identical recipes
produce byte-identical files:

    header.json          UTF-8 JSON (sorted keys, compact separators) with
                         format_version, attack_name, dataset_id, poison_rate,
                         epsilon (exact rational text such as "8/255"), seed,
                         the ordered edit list, and the tensor name list.
    tensors/<name>.npy   one NumPy v1 .npy per perturbation tensor, float32,
                         written in sorted name order.

Edits reference tensors by name: {"kind": "perturb", "index": i,
"tensor": name} or {"kind": "swap", "index_a": a, "index_b": b}. Round-trip
bit-exactness (including tensors) is the contract.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .datasets import PIXEL_DTYPE
from .utils import (
    FormatError,
    RecipeVersionError,
    atomic_write_bytes,
    format_epsilon,
    parse_epsilon,
)

RECIPE_FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class PerturbEdit:
    """Add a named perturbation tensor to one training image."""

    index: int
    tensor: str
    kind = "perturb"


@dataclass(frozen=True)
class SwapEdit:
    """Exchange two training images, leaving both labels in place."""

    index_a: int
    index_b: int
    kind = "swap"


Edit = Union[PerturbEdit, SwapEdit]


@dataclass(frozen=True)
class PoisonRecipe:
    """An ordered, self-validating edit list bound to one training dataset.

    Invariants enforced at construction: poison_rate in [0, 1]; perturb-edit
    indices distinct; swap-edit index pairs globally disjoint; every
    referenced tensor present, finite, and inside the recipe's L-inf budget
    (compared in the tensor's own dtype, so a float32 tensor filled with the
    float32 rounding of the budget is accepted).
    """

    dataset_id: str
    poison_rate: float
    epsilon: str
    seed: int
    attack_name: str
    edits: tuple = ()
    perturbations: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= float(self.poison_rate) <= 1.0:
            raise ValueError(f"poison_rate must lie in [0, 1], got {self.poison_rate}")
        object.__setattr__(self, "epsilon", format_epsilon(self.epsilon))
        eps = self.epsilon_value
        if eps <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}")
        object.__setattr__(self, "edits", tuple(self.edits))
        perturb_indices = set()
        swap_indices = set()
        for edit in self.edits:
            if isinstance(edit, PerturbEdit):
                if edit.index in perturb_indices:
                    raise ValueError(f"index {edit.index} perturbed twice")
                perturb_indices.add(edit.index)
                if edit.tensor not in self.perturbations:
                    raise ValueError(f"edit references unknown tensor {edit.tensor!r}")
            elif isinstance(edit, SwapEdit):
                if edit.index_a == edit.index_b:
                    raise ValueError(f"swap edit pairs index {edit.index_a} with itself")
                for idx in (edit.index_a, edit.index_b):
                    if idx in swap_indices:
                        raise ValueError(f"index {idx} appears in two swap edits")
                    swap_indices.add(idx)
            else:
                raise ValueError(f"unknown edit type {type(edit).__name__}")
        frozen = {}
        for name, delta in self.perturbations.items():
            delta = np.ascontiguousarray(delta, dtype=PIXEL_DTYPE)
            if not np.isfinite(delta).all():
                raise ValueError(f"perturbation {name!r} contains non-finite values")
            budget = np.asarray(eps, dtype=delta.dtype)
            worst = float(np.abs(delta).max()) if delta.size else 0.0
            if worst > float(budget):
                raise ValueError(
                    f"perturbation {name!r} exceeds the epsilon budget: "
                    f"linf={worst!r} > {self.epsilon}"
                )
            delta.flags.writeable = False
            frozen[name] = delta
        object.__setattr__(self, "perturbations", frozen)

    @property
    def epsilon_value(self) -> float:
        return parse_epsilon(self.epsilon)

    @property
    def n_perturb_edits(self) -> int:
        return sum(1 for e in self.edits if e.kind == "perturb")

    @property
    def n_swap_edits(self) -> int:
        return sum(1 for e in self.edits if e.kind == "swap")

    def edited_indices(self) -> set:
        """All training indices touched by any edit."""
        touched = set()
        for edit in self.edits:
            if edit.kind == "perturb":
                touched.add(edit.index)
            else:
                touched.update((edit.index_a, edit.index_b))
        return touched


def _edit_to_json(edit: Edit) -> dict:
    if edit.kind == "perturb":
        return {"kind": "perturb", "index": int(edit.index), "tensor": edit.tensor}
    return {"kind": "swap", "index_a": int(edit.index_a), "index_b": int(edit.index_b)}


def _edit_from_json(entry: dict) -> Edit:
    kind = entry.get("kind")
    try:
        if kind == "perturb":
            return PerturbEdit(index=int(entry["index"]), tensor=str(entry["tensor"]))
        if kind == "swap":
            return SwapEdit(index_a=int(entry["index_a"]), index_b=int(entry["index_b"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed edit entry {entry!r}: {exc}") from None
    raise FormatError(f"unknown edit kind {kind!r}")


def recipe_bytes(recipe: PoisonRecipe) -> bytes:
    """Serialize a recipe to its canonical byte form (deterministic)."""
    tensor_names = sorted(recipe.perturbations)
    header = {
        "format_version": RECIPE_FORMAT_VERSION,
        "attack_name": recipe.attack_name,
        "dataset_id": recipe.dataset_id,
        "poison_rate": float(recipe.poison_rate),
        "epsilon": recipe.epsilon,
        "seed": int(recipe.seed),
        "edits": [_edit_to_json(e) for e in recipe.edits],
        "tensors": tensor_names,
    }
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_STORED) as archive:
        _write_member(archive, "header.json", json.dumps(
            header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        for name in tensor_names:
            blob = io.BytesIO()
            np.save(blob, np.asarray(recipe.perturbations[name]), allow_pickle=False)
            _write_member(archive, f"tensors/{name}.npy", blob.getvalue())
    return buffer.getvalue()


def _write_member(archive: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    info.create_system = 0
    archive.writestr(info, data)


def write_recipe(recipe: PoisonRecipe, destination) -> None:
    """Write a recipe file atomically; identical recipes yield identical bytes."""
    atomic_write_bytes(destination, recipe_bytes(recipe))


def read_recipe(source) -> PoisonRecipe:
    """Read and validate a recipe file written by `write_recipe`."""
    try:
        archive = zipfile.ZipFile(source, "r")
    except (zipfile.BadZipFile, OSError) as exc:
        raise FormatError(f"not a recipe archive: {exc}") from None
    with archive:
        names = set(archive.namelist())
        if "header.json" not in names:
            raise FormatError("recipe archive has no header.json")
        try:
            header = json.loads(archive.read("header.json").decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"corrupt recipe header: {exc}") from None
        version = header.get("format_version")
        if version != RECIPE_FORMAT_VERSION:
            raise RecipeVersionError(
                f"unsupported recipe format_version {version!r}, "
                f"expected {RECIPE_FORMAT_VERSION}"
            )
        for required in ("attack_name", "dataset_id", "poison_rate", "epsilon", "seed",
                         "edits", "tensors"):
            if required not in header:
                raise FormatError(f"recipe header missing field {required!r}")
        perturbations = {}
        for name in header["tensors"]:
            member = f"tensors/{name}.npy"
            if member not in names:
                raise FormatError(f"recipe archive missing tensor member {member!r}")
            with archive.open(member) as handle:
                perturbations[name] = np.load(io.BytesIO(handle.read()), allow_pickle=False)
        edits = tuple(_edit_from_json(e) for e in header["edits"])
    return PoisonRecipe(
        dataset_id=str(header["dataset_id"]),
        poison_rate=float(header["poison_rate"]),
        epsilon=str(header["epsilon"]),
        seed=int(header["seed"]),
        attack_name=str(header["attack_name"]),
        edits=edits,
        perturbations=perturbations,
    )
