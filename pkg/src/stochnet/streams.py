"""Counter-based uniform streams.

Every uniform is a pure function of ``(seed, stream name, replication,
counter)``: a SplitMix64 finalizer is chained over the four keys and the top
53 bits are mapped into the open interval (0, 1).  Nothing is stateful, so any
replication can be regenerated in isolation, in any order, on any worker.
"""

from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 2.0**-53


def _mix(z: int) -> int:
    z = (z + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def name_key(name: str) -> int:
    """Stable 64-bit key of a stream name (independent of PYTHONHASHSEED)."""
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed, e.g. one per macro-replication."""
    z = _mix(seed & _MASK)
    for k in keys:
        z = _mix(z ^ (k & _MASK))
    return z


class Streams:
    """Uniform streams for one experiment seed.

    With ``audit=True`` every ``(replication, stream, counter)`` triple that is
    read gets recorded in :attr:`accessed`; tests use this to check CRN pairing
    and the one-replication-per-IPA-run property.
    """

    def __init__(self, seed: int, audit: bool = False):
        self.seed = int(seed)
        self._seed_key = _mix(self.seed & _MASK)
        self._names: dict[str, int] = {}
        self.audit = audit
        self.accessed: set[tuple[int, str, int]] = set()

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed})"

    def __reduce__(self):
        return (Streams, (self.seed, False))

    def _name(self, name: str) -> int:
        key = self._names.get(name)
        if key is None:
            key = _mix(self._seed_key ^ name_key(name))
            self._names[name] = key
        return key

    def uniform(self, replication: int, name: str, counter: int = 0) -> float:
        if self.audit:
            self.accessed.add((int(replication), name, int(counter)))
        z = _mix(self._name(name) ^ (replication & _MASK))
        z = _mix(z ^ (counter & _MASK))
        return ((z >> 11) + 0.5) * _INV53

    def uniforms(self, replications, name: str, counter=0) -> np.ndarray:
        """Vectorized :meth:`uniform`; ``replications`` and ``counter`` broadcast."""
        reps = np.asarray(replications, dtype=np.int64).astype(np.uint64)
        ctr = np.asarray(counter, dtype=np.int64).astype(np.uint64)
        reps, ctr = np.broadcast_arrays(reps, ctr)
        if self.audit:
            self.accessed.update(
                (int(r), name, int(c)) for r, c in zip(reps.ravel(), ctr.ravel())
            )
        z = _mix_array(np.uint64(self._name(name)) ^ reps)
        z = _mix_array(z ^ ctr)
        return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53

    def sequence(self, replication: int, name: str, length: int) -> np.ndarray:
        """The first ``length`` uniforms of one stream."""
        return self.uniforms(np.full(length, replication), name, np.arange(length))

    def replications_read(self) -> set[int]:
        return {r for r, _, _ in self.accessed}


def stream(seed: int, replication: int, name: str, length: int) -> np.ndarray:
    return Streams(seed).sequence(replication, name, length)


def chunks(reps: np.ndarray, workers: int) -> Iterable[np.ndarray]:
    """Split replication indices into contiguous, order-preserving chunks."""
    workers = max(1, int(workers))
    return [c for c in np.array_split(np.asarray(reps), workers) if len(c)]
