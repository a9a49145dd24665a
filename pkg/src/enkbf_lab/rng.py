"""Hierarchically addressed random streams.

A stream is identified by ``(master_seed, path)``; the path is hashed into
a Philox key through :class:`numpy.random.SeedSequence` (``spawn_key``), so
streams can be created in any order and on any worker without coordination.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PathTooDeep, ValidationError

MAX_PATH_DEPTH = 8
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    path: tuple[int, ...] = ()

    def child(self, *indices: int) -> "RngStream":
        return derive_stream(self.master_seed, self.path + tuple(indices))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))

    def normals(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)


def derive_stream(master_seed: int, path=()) -> RngStream:
    """Return the stream addressed by ``path`` under ``master_seed``.

    Raises:
        PathTooDeep: if the path has more than 8 components.
    """
    path = tuple(int(p) for p in path)
    if len(path) > MAX_PATH_DEPTH:
        raise PathTooDeep(f"stream path {path} deeper than {MAX_PATH_DEPTH}")
    if any(p < 0 for p in path):
        raise ValidationError(f"stream path components must be nonnegative: {path}")
    seed = int(master_seed)
    if not 0 <= seed <= _U64:
        raise ValidationError(f"master seed {seed} is not a 64-bit unsigned integer")
    return RngStream(seed, path)


def as_stream(stream_or_seed) -> RngStream:
    if isinstance(stream_or_seed, RngStream):
        return stream_or_seed
    return derive_stream(int(stream_or_seed))
