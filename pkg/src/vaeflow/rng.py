"""Seeded, counter-based random stream (Philox) with serializable state."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


class RngStream:
    """Thin wrapper over a Philox generator.

    Identical seeds and call sequences give identical draws for a fixed
    float precision. :meth:`get_state` packs the full generator state into
    a uint64 vector so it can live in a checkpoint.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bitgen = np.random.Philox(self.seed)
        self._gen = np.random.Generator(self._bitgen)

    def normal(self, shape, dtype=None) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=dtype or ad.get_dtype())

    def uniform(self, shape, dtype=None) -> np.ndarray:
        # [0, 1)
        return self._gen.random(shape, dtype=dtype or ad.get_dtype())

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def spawn(self) -> RngStream:
        """Child stream seeded from this one (consumes one draw)."""
        return RngStream(int(self._gen.integers(0, 2**63 - 1)))

    def get_state(self) -> np.ndarray:
        st = self._bitgen.state
        inner = st["state"]
        return np.concatenate([
            np.asarray(inner["counter"], dtype=np.uint64),
            np.asarray(inner["key"], dtype=np.uint64),
            np.asarray(st["buffer"], dtype=np.uint64),
            np.array([st["buffer_pos"], st["has_uint32"], st["uinteger"], self.seed], dtype=np.uint64),
        ])

    def set_state(self, packed: np.ndarray) -> None:
        packed = np.asarray(packed, dtype=np.uint64)
        if packed.shape != (14,):
            raise ValueError(f"rng state must have 14 words, got {packed.shape}")
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {"counter": packed[0:4].copy(), "key": packed[4:6].copy()},
            "buffer": packed[6:10].copy(),
            "buffer_pos": int(packed[10]),
            "has_uint32": int(packed[11]),
            "uinteger": int(packed[12]),
        }
        self.seed = int(packed[13])

    @classmethod
    def from_state(cls, packed: np.ndarray) -> RngStream:
        rng = cls(int(np.asarray(packed, dtype=np.uint64)[13]))
        rng.set_state(packed)
        return rng
