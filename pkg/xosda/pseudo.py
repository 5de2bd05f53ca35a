"""
Pseudo-labels: neighbour soft-voting, the two uncertainty estimates and uncertainty-gated
sample selection.
"""
import dataclasses
import logging
import operator
from typing import List, Tuple

import numpy as np

from .bank import MemoryBank
from .config import Combiner, RunSettings, WeightFn
from .errors import InvalidClassCount, InvalidUncertainty
from .numerics import cosine_distance, normalized_entropy, stable_argmax

log = logging.getLogger(__name__)

LINEAR_WEIGHT_FLOOR = 1e-6


@dataclasses.dataclass
class PseudoLabelRecord:
    sample_id: int
    p_bar: np.ndarray
    y_bar: int
    u_nc: float
    u_cs: float
    w_nc: float
    w_cs: float
    selected: bool


def refine(bank: MemoryBank, z_wa, n: int) -> Tuple[np.ndarray, int]:
    """ Mean of the `n` nearest bank predictions and its argmax (ties to the lowest class). """
    _, probs = bank.neighbors(z_wa, n)
    p_bar = probs.mean(axis=0)
    return p_bar, stable_argmax(p_bar)


def refine_many(bank: MemoryBank, z_wa, n: int) -> Tuple[np.ndarray, np.ndarray]:
    _, probs = bank.neighbors_many(z_wa, n)
    p_bar = probs.mean(axis=1)
    return p_bar, p_bar.argmax(axis=1)


def uncertainty_nc(p_bar, n_classes: int) -> float:
    """ Neighbour-consensus uncertainty: normalized entropy of the refined prediction. """
    return normalized_entropy(p_bar, n_classes)


def uncertainty_cs(z, weight: np.ndarray, p_bar) -> float:
    """
    Class-separation uncertainty from the cosine distances `d_i`, `d_j` of `z` to the
    prototypes of the two most probable classes: `min(d_i, d_j) / (d_i + d_j)`.

    0 means `z` sits on one prototype, 0.5 means it is equally far from both.
    """
    p_bar = np.asarray(p_bar)
    if len(p_bar) < 2:
        raise InvalidClassCount(f"Class-separation uncertainty needs >= 2 classes, got ({len(p_bar)}).")
    i, j = np.argsort(-p_bar, kind="stable")[:2]
    d_i = cosine_distance(z, weight[:, i])
    d_j = cosine_distance(z, weight[:, j])
    total = d_i + d_j
    if total == 0.0:
        return 0.5
    return min(d_i, d_j) / total


def to_weight(u: float, fn: WeightFn) -> float:
    if not 0.0 <= u <= 1.0:
        raise InvalidUncertainty(f"Uncertainty ({u}) must be within [0, 1].")
    if fn is WeightFn.LINEAR:
        return max(1.0 - u, LINEAR_WEIGHT_FLOOR)
    return float(np.exp(-u))


_COMBINERS = {
    Combiner.AND: operator.and_,
    Combiner.OR: operator.or_,
}


def combine(b_nc: bool, b_cs: bool, op: Combiner) -> bool:
    return bool(_COMBINERS[op](bool(b_nc), bool(b_cs)))


def select(w_nc: float, w_cs: float, op: Combiner, rng: np.random.Generator) -> bool:
    """ Bernoulli(w_nc) combined with Bernoulli(w_cs); always consumes two draws. """
    b_nc = rng.random() < w_nc
    b_cs = rng.random() < w_cs
    return combine(b_nc, b_cs, op)


def label_batch(
        sample_ids,
        p_bar: np.ndarray,
        z: np.ndarray,
        weight: np.ndarray,
        rng: np.random.Generator,
        settings: RunSettings = None,
) -> List[PseudoLabelRecord]:
    """
    Uncertainties, weights and selection for a batch of refined predictions.

    `z` are the live-model features the refinement used; `weight` is the classifier's
    prototype matrix. Selection draws are taken in ascending sample-id order.
    A disabled uncertainty gives a weight of 1.
    """
    settings = settings or RunSettings.grab()
    n_classes = p_bar.shape[1]
    records = []
    for pos in np.argsort(sample_ids, kind="stable"):
        u_nc = uncertainty_nc(p_bar[pos], n_classes)
        u_cs = uncertainty_cs(z[pos], weight, p_bar[pos])
        w_nc = to_weight(u_nc, settings.weight_nc) if settings.use_nc_uncertainty else 1.0
        w_cs = to_weight(u_cs, settings.weight_cs) if settings.use_cs_uncertainty else 1.0
        records.append(PseudoLabelRecord(
            sample_id=int(sample_ids[pos]),
            p_bar=p_bar[pos],
            y_bar=stable_argmax(p_bar[pos]),
            u_nc=u_nc,
            u_cs=u_cs,
            w_nc=w_nc,
            w_cs=w_cs,
            selected=select(w_nc, w_cs, settings.combiner, rng),
        ))
    return records
