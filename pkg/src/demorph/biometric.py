"""Biometric comparator: embedders, cosine similarity and thresholded matching."""
from __future__ import annotations

import enum
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError

DEFAULT_TAU = 0.4
TOY_GRID = 8


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64).ravel()
        norm = np.linalg.norm(vec)
        if not abs(norm - 1.0) <= 1e-6:
            raise ValueError(f"embedding must be unit norm, got {norm}")
        object.__setattr__(self, "vector", vec)

    def __len__(self):
        return self.vector.size


class Status(enum.Enum):
    FOUND = "found"
    NOT_FOUND = "not_found"


@dataclass(frozen=True)
class MatchResult:
    status: Status
    similarity: float | None = None

    @property
    def found(self):
        return self.status is Status.FOUND


def _canonical_vector(dim):
    vec = np.zeros(dim)
    vec[0] = 1.0
    return vec


def _box_blur3(gray):
    padded = np.pad(gray, 1, mode="edge")
    h, w = gray.shape
    acc = np.zeros_like(gray)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + h, dx:dx + w]
    return acc / 9.0


def toy_features(image):
    """Unnormalised toy feature vector (linear in the image)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) image, got {img.shape}")
    h, w = img.shape[1:]
    if h % TOY_GRID or w % TOY_GRID:
        raise DimensionError(f"image side must be divisible by {TOY_GRID}, got {h}x{w}")
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    blurred = _box_blur3(gray)
    cells = blurred.reshape(TOY_GRID, h // TOY_GRID, TOY_GRID, w // TOY_GRID).mean(axis=(1, 3))
    vec = cells.ravel()
    return vec - vec.mean()


def embed_toy(image):
    """Deterministic 64-d embedding: grey, 3x3 box blur, 8x8 block mean, centre, normalise."""
    vec = toy_features(image)
    norm = np.linalg.norm(vec)
    # constant images land on a fixed vector (the threshold is far above
    # float noise from blurring/averaging a constant)
    if norm < 1e-9:
        return Embedding(_canonical_vector(vec.size))
    return Embedding(vec / norm)


def similarity(e1, e2):
    """Cosine similarity of two unit embeddings, clamped to [-1, 1]."""
    v1 = e1.vector if isinstance(e1, Embedding) else np.asarray(e1, dtype=np.float64)
    v2 = e2.vector if isinstance(e2, Embedding) else np.asarray(e2, dtype=np.float64)
    if v1.shape != v2.shape:
        raise DimensionError(f"embedding lengths differ: {v1.size} vs {v2.size}")
    # elementwise product then sum keeps the result exactly symmetric
    return float(np.clip(np.sum(v1 * v2), -1.0, 1.0))


class Comparator:
    """Maps an image to an Embedding, or ``None`` when no face is found."""

    name = "base"

    def embed(self, image):
        raise NotImplementedError

    def compare(self, i1, i2):
        e1, e2 = self.embed(i1), self.embed(i2)
        if e1 is None or e2 is None:
            return MatchResult(Status.NOT_FOUND)
        return MatchResult(Status.FOUND, similarity(e1, e2))

    def describe(self):
        return {"name": self.name}


class ToyComparator(Comparator):
    name = "toy"

    def embed(self, image):
        return embed_toy(image)


class ExternalComparator(Comparator):
    """Runs a user command as ``<command> <png path>``.

    The command prints whitespace-separated reals on stdout.  A nonzero exit
    status means no face was found.
    """

    name = "external"

    def __init__(self, command, timeout=60.0):
        if not command:
            raise ConfigError("external comparator needs a command")
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._lock = threading.Lock()

    def embed(self, image):
        from .imaging import save_png

        with self._lock, tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "probe.png"
            save_png(np.clip(image, 0.0, 1.0), path)
            proc = subprocess.run(self.command + [str(path)], capture_output=True,
                                  text=True, timeout=self.timeout)
        if proc.returncode != 0:
            return None
        values = np.array([float(tok) for tok in proc.stdout.split()])
        norm = np.linalg.norm(values)
        if values.size == 0 or norm == 0.0:
            return None
        return Embedding(values / norm)

    def describe(self):
        return {"name": self.name, "command": self.command}


def get_comparator(name="toy", **options):
    if name == "toy":
        return ToyComparator()
    if name == "external":
        return ExternalComparator(options.get("command"), options.get("timeout", 60.0))
    raise ConfigError(f"unknown comparator {name!r}")


def is_match(comparator, i1, i2, tau=DEFAULT_TAU):
    """Compare two images; a match needs both faces found and similarity > tau."""
    if not -1.0 < tau < 1.0:
        raise ConfigError(f"tau must lie in (-1, 1), got {tau}")
    result = comparator.compare(i1, i2)
    return result, bool(result.found and result.similarity > tau)
