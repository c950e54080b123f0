"""Value-plus-gradient tensor and the run's splittable random source."""
from __future__ import annotations

import hashlib

import numpy as np


class DiffTensor:
    """N-dimensional value array paired with a lazily allocated gradient."""

    __slots__ = ("data", "_grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data)
        self._grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(f"gradient shape {value.shape} != value shape {self.data.shape}")
        self._grad = value

    @property
    def has_grad(self) -> bool:
        return self._grad is not None

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"DiffTensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _path_key(part) -> int:
    # stable 32-bit key per path component, independent of PYTHONHASHSEED
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def component_rng(seed: int, *path) -> np.random.Generator:
    """Deterministic per-component generator split from one 64-bit seed.

    Each distinct ``path`` (e.g. ``("segnet", "init")``) yields an
    independent stream; the same seed and path always reproduce it.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=tuple(_path_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
