"""Counter-based random streams keyed by (master seed, trial id, purpose tag)."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Union

import numpy as np


def _key_part(part: Union[int, str]) -> int:
    if isinstance(part, (bool, np.bool_)):
        raise TypeError("stream key parts must be int or str")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream key parts must be non-negative")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream key part {part!r}")


@dataclass(frozen=True)
class Stream:
    """A reproducible substream.

    Two streams with the same ``seed`` and ``key`` always produce the same
    draws, regardless of which other streams were consumed before. Parallel
    trials should each use their own ``child``.
    """

    seed: int
    key: tuple[int, ...] = ()

    def child(self, *parts: Union[int, str]) -> "Stream":
        return Stream(self.seed, self.key + tuple(_key_part(p) for p in parts))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        return np.random.Generator(np.random.Philox(ss))

    @property
    def ident(self) -> str:
        return "/".join(str(k) for k in self.key) or "root"


StreamLike = Union[Stream, np.random.Generator, int]


def as_generator(stream: StreamLike) -> np.random.Generator:
    if isinstance(stream, np.random.Generator):
        return stream
    if isinstance(stream, Stream):
        return stream.generator()
    if isinstance(stream, (int, np.integer)):
        return Stream(int(stream)).generator()
    raise TypeError(f"cannot make a generator from {type(stream).__name__}")
