"""Tamper detection via canonical per-record hash manifests.

The defense assumes a guaranteed-clean canonical copy of the training data:
hash every record of the canonical copy once, then compare the hashes of any
training dataset against the manifest before training. Any perturbed or
swapped record changes its digest, so train-time tampering is detected
exactly, with no false positives.

Record serialization for in-memory datasets (fixed so digests are reproducible
across platforms and storage formats): magic "TWR1", then H, W, C as u32
little-endian, the pixel dtype tag "f32l", the row-major float32 little-endian
pixel bytes, and the label as u32 little-endian. File trees are hashed as raw
file bytes keyed by POSIX relative path.

Manifest file format: three UTF-8 header lines ("algorithm <id>",
"dataset_id <id>", "version 1") followed by one "<record key> <hex digest>"
line per record, in record order.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .datasets import ImageDataset
from .utils import FormatError, WeakHashError, atomic_write_text

MANIFEST_VERSION = 1

# Digests considered brute-forceable; refused unless explicitly overridden.
WEAK_ALGORITHMS = frozenset({"md5", "sha1"})
SUPPORTED_ALGORITHMS = frozenset({"sha256", "sha384", "sha512", "sha3_256", "sha3_512",
                                  "blake2b", "blake2s"}) | WEAK_ALGORITHMS

_RECORD_MAGIC = b"TWR1"
_DTYPE_TAG = b"f32l"


@dataclass(frozen=True)
class HashManifest:
    """Ordered (record key, hex digest) listing for one dataset."""

    dataset_id: str
    algorithm: str
    entries: tuple  # ((key, hexdigest), ...)

    def __post_init__(self):
        digest_length = hashlib.new(self.algorithm).digest_size * 2
        seen = set()
        for key, digest in self.entries:
            if key in seen:
                raise ValueError(f"duplicate record key {key!r}")
            seen.add(key)
            if len(digest) != digest_length or digest != digest.lower() \
                    or any(ch not in "0123456789abcdef" for ch in digest):
                raise ValueError(f"invalid {self.algorithm} digest for {key!r}")
        object.__setattr__(self, "entries", tuple(self.entries))

    def as_dict(self) -> dict:
        return dict(self.entries)


@dataclass(frozen=True)
class VerificationReport:
    """Outcome of checking a dataset against a manifest."""

    passed: bool
    mismatched: tuple
    missing: tuple
    unexpected: tuple

    def summary(self) -> str:
        if self.passed:
            return "all records match the manifest"
        return (f"{len(self.mismatched)} mismatched, {len(self.missing)} missing, "
                f"{len(self.unexpected)} unexpected record(s)")


def _check_algorithm(algorithm: str, insecure_ok: bool) -> None:
    if algorithm not in SUPPORTED_ALGORITHMS:
        raise ValueError(
            f"unsupported digest algorithm {algorithm!r}; "
            f"supported: {sorted(SUPPORTED_ALGORITHMS)}"
        )
    if algorithm in WEAK_ALGORITHMS and not insecure_ok:
        raise WeakHashError(
            f"{algorithm} does not resist brute-force collision attacks and cannot "
            f"guarantee tamper detection; use sha256 or stronger, or pass "
            f"insecure_ok=True to proceed anyway"
        )


def record_key(index: int) -> str:
    return f"r{index:08d}"


def _record_bytes(image: np.ndarray, label: int) -> bytes:
    h, w, c = image.shape
    header = _RECORD_MAGIC + np.array([h, w, c], dtype="<u4").tobytes() + _DTYPE_TAG
    pixels = np.ascontiguousarray(image, dtype="<f4").tobytes()
    return header + pixels + np.array([label], dtype="<u4").tobytes()


def _dataset_digests(dataset: ImageDataset, algorithm: str):
    for index in range(dataset.n):
        digest = hashlib.new(algorithm)
        digest.update(_record_bytes(dataset.images[index], int(dataset.labels[index])))
        yield record_key(index), digest.hexdigest()


def _tree_digests(root: str, algorithm: str):
    paths = []
    for directory, _, files in os.walk(root):
        for name in files:
            full = os.path.join(directory, name)
            paths.append(os.path.relpath(full, root).replace(os.sep, "/"))
    for rel in sorted(paths):
        digest = hashlib.new(algorithm)
        with open(os.path.join(root, *rel.split("/")), "rb") as handle:
            for chunk in iter(lambda: handle.read(1 << 20), b""):
                digest.update(chunk)
        yield rel, digest.hexdigest()


def build_manifest(source, algorithm: str = "sha256", insecure_ok: bool = False,
                   dataset_id: str | None = None) -> HashManifest:
    """Hash every record of a dataset (or every file of a directory tree).

    Weak algorithms (md5, sha1) are refused unless insecure_ok=True, since a
    brute-forceable digest cannot guarantee detection.
    """
    _check_algorithm(algorithm, insecure_ok)
    if isinstance(source, ImageDataset):
        entries = tuple(_dataset_digests(source, algorithm))
        return HashManifest(dataset_id or source.dataset_id, algorithm, entries)
    root = os.fspath(source)
    if not os.path.isdir(root):
        raise FileNotFoundError(f"no dataset or directory at {root!r}")
    entries = tuple(_tree_digests(root, algorithm))
    return HashManifest(dataset_id or os.path.basename(os.path.abspath(root)),
                        algorithm, entries)


def verify_manifest(source, manifest: HashManifest) -> VerificationReport:
    """Compare a dataset (or file tree) against a manifest; read-only.

    Returns the exact sets of mismatched, missing, and unexpected record keys.
    """
    if isinstance(source, ImageDataset):
        current = dict(_dataset_digests(source, manifest.algorithm))
    else:
        root = os.fspath(source)
        if not os.path.isdir(root):
            raise FileNotFoundError(f"no dataset or directory at {root!r}")
        current = dict(_tree_digests(root, manifest.algorithm))
    expected = manifest.as_dict()
    mismatched = tuple(key for key, digest in expected.items()
                       if key in current and current[key] != digest)
    missing = tuple(key for key in expected if key not in current)
    unexpected = tuple(sorted(key for key in current if key not in expected))
    passed = not (mismatched or missing or unexpected)
    return VerificationReport(passed, mismatched, missing, unexpected)


def write_manifest(manifest: HashManifest, path) -> None:
    """Write the manifest in its line-oriented text format (deterministic bytes)."""
    lines = [
        f"algorithm {manifest.algorithm}",
        f"dataset_id {manifest.dataset_id}",
        f"version {MANIFEST_VERSION}",
    ]
    lines.extend(f"{key} {digest}" for key, digest in manifest.entries)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path) -> HashManifest:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no manifest at {os.fspath(path)!r}")
    with open(path, "r", encoding="utf-8") as handle:
        lines = [line.rstrip("\n") for line in handle]
    try:
        algorithm = lines[0].split(" ", 1)[1]
        dataset_id = lines[1].split(" ", 1)[1]
        version = int(lines[2].split(" ", 1)[1])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed manifest header: {exc}") from None
    if version != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {version}")
    entries = []
    for number, line in enumerate(lines[3:], start=4):
        if not line:
            continue
        key, _, digest = line.rpartition(" ")
        if not key:
            raise FormatError(f"malformed manifest entry on line {number}: {line!r}")
        entries.append((key, digest))
    try:
        return HashManifest(dataset_id, algorithm, tuple(entries))
    except ValueError as exc:
        raise FormatError(f"invalid manifest content: {exc}") from None
