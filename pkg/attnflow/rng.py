import zlib
from typing import Union

import numpy as np


def _key_part(part: Union[int, str]) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    assert part >= 0, f"Stream keys must be nonnegative, got {part}"
    return int(part)


def make_rng(seed: int, *key: Union[int, str]) -> np.random.Generator:
    """
    A Philox generator owned by one stream of an experiment. The stream is fully determined by the seed and the
    key (e.g. the experiment name and a run index), whatever order streams are created or consumed in.
    """
    seed_seq = np.random.SeedSequence(seed, spawn_key=tuple(_key_part(part) for part in key))
    return np.random.Generator(np.random.Philox(seed_seq))


def random_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.standard_normal((rows, cols))


def random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def random_spd(rng: np.random.Generator, d: int, floor: float = 0.05) -> np.ndarray:
    """
    A Wishart draw B B^T / d shifted by floor * I, so that its condition number stays moderate.
    """
    B = rng.standard_normal((d, d))
    S = B @ B.T / d + floor * np.eye(d)
    return (S + S.T) / 2


def random_skew(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    B = rng.standard_normal((d, d)) * scale
    return (B - B.T) / 2
