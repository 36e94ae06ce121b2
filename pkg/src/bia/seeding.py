"""Named random substreams derived from a single integer seed."""

from __future__ import annotations

import zlib
from contextlib import contextmanager

import numpy as np
import torch


def _seed_sequence(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))


def derive_seed(seed: int, name: str) -> int:
    """A 63-bit integer seed that depends only on ``(seed, name)``."""
    state = _seed_sequence(seed, name).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


class Streams:
    """Lazily created, independent random streams keyed by name.

    Every stochastic component asks for its own stream (``"init"``,
    ``"batches"``, ``"rn"``, ``"baselines"``, ...), so consuming randomness in
    one place never shifts the draws seen by another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._numpy: dict[str, np.random.Generator] = {}
        self._torch: dict[str, torch.Generator] = {}

    def numpy(self, name: str) -> np.random.Generator:
        if name not in self._numpy:
            self._numpy[name] = np.random.default_rng(_seed_sequence(self.seed, name))
        return self._numpy[name]

    def torch(self, name: str) -> torch.Generator:
        if name not in self._torch:
            g = torch.Generator()
            g.manual_seed(derive_seed(self.seed, "torch:" + name))
            self._torch[name] = g
        return self._torch[name]

    def child(self, name: str) -> "Streams":
        return Streams(derive_seed(self.seed, "child:" + name))


def seed_everything(seed: int) -> Streams:
    """Seed torch's global generator and return the named substreams for ``seed``."""
    torch.manual_seed(derive_seed(seed, "global"))
    return Streams(seed)


@contextmanager
def torch_seeded(seed: int):
    """Run a block (typically module construction) under a fixed torch seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
