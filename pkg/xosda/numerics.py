"""
Small numerical kernels shared by every other module, plus the seeded random-number contract.

Every random draw in `xosda` comes from `make_rng(seed, stream)`; each phase of the
pipeline owns one `RngStream`, so switching a feature off never shifts another
phase's draws.
"""
import enum

import numpy as np
from scipy.special import softmax
from scipy.stats import entropy

from .errors import DegenerateVector, InvalidClassCount


class RngStream(enum.IntEnum):
    CLUSTERING = 1
    COMPLEMENTARY_LABELS = 2
    NEGATIVE_KEYS = 3
    SELECTION = 4
    DATA = 5
    AUGMENT = 6
    SHUFFLE = 7
    INIT = 8
    BANK = 9


def make_rng(seed: int, stream: RngStream) -> np.random.Generator:
    """
    PCG64 generator for `(seed, stream)`; the same pair and call sequence give
    bit-identical draws on every platform.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


def _norm(a: np.ndarray) -> float:
    norm = float(np.linalg.norm(a))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateVector(f"Vector has norm ({norm}); a non-zero finite vector is required.")
    return norm


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cos = float(a @ b) / (_norm(a) * _norm(b))
    return float(np.clip(1.0 - cos, 0.0, 2.0))


def cosine_distance_matrix(a, b) -> np.ndarray:
    """ Pairwise cosine distances between the rows of `a` (n, D) and the rows of `b` (m, D). """
    return np.clip(1.0 - l2_normalize(a) @ l2_normalize(b).T, 0.0, 2.0)


def l2_normalize(a) -> np.ndarray:
    """
    Unit-length copy of `a`; a 2-D array is normalized row by row.

    Raises `DegenerateVector` if any vector has zero norm.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return a / _norm(a)
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if a.size and (np.any(norms == 0.0) or not np.all(np.isfinite(norms))):
        raise DegenerateVector("At least one row has zero norm; cannot L2-normalize.")
    return a / norms


def softmax_temp(v, tau: float = 1.0) -> np.ndarray:
    """ Softmax of `v / tau` along the last axis. """
    return softmax(np.asarray(v, dtype=float) / tau, axis=-1)


def normalized_entropy(p, n_classes: int) -> float:
    """ Entropy of `p` in bits, divided by `log2(n_classes)`; `0 * log 0` counts as 0. """
    if n_classes < 2:
        raise InvalidClassCount(f"Normalized entropy needs at least 2 classes, got ({n_classes}).")
    value = entropy(np.asarray(p, dtype=float), base=2) / np.log2(n_classes)
    return float(np.clip(value, 0.0, 1.0))


def stable_argmax(p) -> int:
    # np.argmax returns the first maximum, ie: ties go to the lowest index.
    return int(np.argmax(p))
