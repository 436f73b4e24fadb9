"""Child-seed derivation so parallel and serial runs draw identical streams."""
import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def child_seed(master: int, *keys) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def child_rng(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master), spawn_key=tuple(_key(k) for k in keys)))
