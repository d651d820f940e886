"""Named random sub-streams derived from one root seed.

Every consumer of randomness asks for a stream by name, so switching an
ablation on or off never shifts the draws seen by unrelated components.
"""
import zlib

import numpy as np
import torch


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_for(root: int, name: str) -> int:
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, _key(name)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def numpy_stream(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(seed_for(root, name))


def torch_stream(root: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed_for(root, name))
    return g
