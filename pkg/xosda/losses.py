"""
Adaptation losses with hand-derived gradients.

- Negative-learning classification: push down the probability of one random
  complementary label ("this sample is not class y~") for every selected sample.
- NL-InfoNCE: push the query away from one random admissible negative key, relative to
  all admissible negatives (or the standard InfoNCE, for comparison).
- Diversity: negative entropy of the batch-mean prediction, against class collapse.

Gradients are with respect to logits (classification, diversity) or to the features
`z` the query came from (contrastive); `total_loss_and_grads` backpropagates them
through the whole model.
"""
import dataclasses
import logging
from typing import List, Tuple

import numpy as np
from scipy.special import logsumexp, xlogy

from .bank import KeyQueue, TemporalQueue
from .config import ContrastiveLoss, ExclusionMode, RunSettings
from .errors import EmptyBatch, InvalidClassCount, NonFiniteGradient, SampleSkipped
from .model import Model, MomentumModel
from .numerics import l2_normalize, softmax_temp

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7


@dataclasses.dataclass
class LossBreakdown:
    l_cls: float
    l_ctr: float
    l_div: float
    total: float
    n_selected: int
    n_excluded_pairs: int
    n_skipped: int = 0


@dataclasses.dataclass
class AdaptationBatch:
    """ One batch of target samples, already augmented and pseudo-labelled. """
    ids: np.ndarray
    query_inputs: np.ndarray
    """ First strong augmentation, through the live model. """
    key_inputs: np.ndarray
    """ Second strong augmentation, through the momentum model. """
    y_bar: np.ndarray
    selected: np.ndarray


def _negative_of(p_target: np.ndarray, probs: np.ndarray, target: np.ndarray):
    """
    `-log(1 - p_t)` and its gradient w.r.t. the softmax inputs, where `p_t` is the
    probability at index `target` of each row of `probs`. Gradient is 0 where clamped.
    """
    rows = np.arange(len(probs))
    remainder = 1.0 - p_target
    clamped = remainder < PROB_FLOOR
    loss = -np.log(np.maximum(remainder, PROB_FLOOR))
    onehot = np.zeros_like(probs)
    onehot[rows, target] = 1.0
    scale = np.where(clamped, 0.0, p_target / np.where(clamped, 1.0, remainder))
    grad = scale[:, None] * (onehot - probs)
    return loss, grad


def complementary_labels(y_bar, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """ One label drawn uniformly from every class except `y_bar`, per entry of `y_bar`. """
    y_bar = np.asarray(y_bar, dtype=int)
    draws = rng.integers(n_classes - 1, size=len(y_bar))
    return np.where(draws < y_bar, draws, draws + 1)


def nl_classification_loss(p_sa, y_bar: int, rng: np.random.Generator) -> Tuple[float, np.ndarray, int]:
    """
    `-log(1 - p_sa[y~])` for a random complementary label `y~ != y_bar`.

    Returns `(loss, dloss/dlogits, y~)`.
    """
    losses, grads, y_tilde = nl_classification_batch(np.asarray(p_sa)[None, :], [y_bar], rng)
    return float(losses[0]), grads[0], int(y_tilde[0])


def nl_classification_batch(p_sa: np.ndarray, y_bar, rng: np.random.Generator):
    n_classes = p_sa.shape[1]
    if n_classes < 2:
        raise InvalidClassCount(f"Negative learning needs >= 2 classes, got ({n_classes}).")
    y_tilde = complementary_labels(y_bar, n_classes, rng)
    loss, grad = _negative_of(p_sa[np.arange(len(p_sa)), y_tilde], p_sa, y_tilde)
    return loss, grad, y_tilde


def exclusion_set(
        queue_ids,
        query_id: int,
        temporal_queue: TemporalQueue,
        mode: ExclusionMode = ExclusionMode.INTERSECTION,
) -> np.ndarray:
    """ Indices of the queue entries that are admissible negatives for `query_id`. """
    queue_ids = np.asarray(queue_ids, dtype=int)
    shared = temporal_queue.shared_history_many(query_id, queue_ids, mode)
    return np.flatnonzero(~shared & (queue_ids != query_id))


def nl_infonce_loss(
        q,
        keys: np.ndarray,
        negatives,
        rng: np.random.Generator,
        *,
        tau: float,
        positive_key=None,
        include_positive_in_denominator: bool = False,
) -> Tuple[float, np.ndarray]:
    """
    `-log(1 - r)` with `r` the softmax weight, over the admissible negatives `keys[negatives]`,
    of one negative drawn uniformly from them. Similarities are `q.k / tau` with `q` and every
    key L2-normalized.

    Returns `(loss, dloss/dq)` for the un-normalized `q`. Raises `SampleSkipped` with fewer
    than 2 admissible negatives.
    """
    negatives = np.asarray(negatives, dtype=int)
    if len(negatives) <= 1:
        raise SampleSkipped(f"Only ({len(negatives)}) admissible negatives.")
    pick = int(rng.integers(len(negatives)))

    candidates = l2_normalize(keys[negatives])
    if include_positive_in_denominator:
        candidates = np.concatenate([candidates, l2_normalize(positive_key)[None, :]])

    q = np.asarray(q, dtype=float)
    q_norm = float(np.linalg.norm(q))
    q_hat = l2_normalize(q)
    probs = softmax_temp(candidates @ q_hat, tau)
    loss, dscores = _negative_of(probs[pick:pick + 1], probs[None, :], np.array([pick]))
    return float(loss[0]), _through_normalization(q_hat, q_norm, dscores[0] @ candidates / tau)


def infonce_loss(
        q,
        keys: np.ndarray,
        negatives,
        *,
        tau: float,
        positive_key,
) -> Tuple[float, np.ndarray]:
    """ Standard InfoNCE over the positive key and the admissible negatives. """
    negatives = np.asarray(negatives, dtype=int)
    if len(negatives) <= 1:
        raise SampleSkipped(f"Only ({len(negatives)}) admissible negatives.")
    candidates = np.concatenate([l2_normalize(positive_key)[None, :], l2_normalize(keys[negatives])])

    q = np.asarray(q, dtype=float)
    q_norm = float(np.linalg.norm(q))
    q_hat = l2_normalize(q)
    scores = candidates @ q_hat / tau
    loss = float(logsumexp(scores) - scores[0])
    dscores = softmax_temp(scores)
    dscores[0] -= 1.0
    return loss, _through_normalization(q_hat, q_norm, dscores @ candidates / tau)


def _through_normalization(q_hat: np.ndarray, q_norm: float, dq_hat: np.ndarray) -> np.ndarray:
    return (dq_hat - q_hat * (q_hat @ dq_hat)) / q_norm


def diversity_loss(p_batch) -> Tuple[float, np.ndarray]:
    """
    `sum_c pbar_c log pbar_c` of the batch-mean prediction `pbar`, and its gradient
    w.r.t. every sample's logits.
    """
    p_batch = np.atleast_2d(np.asarray(p_batch, dtype=float))
    if not p_batch.size:
        raise EmptyBatch("Diversity loss needs at least one prediction.")
    batch_size = len(p_batch)
    mean = p_batch.mean(axis=0)
    loss = float(xlogy(mean, mean).sum())
    log_mean = np.log(np.maximum(mean, np.finfo(float).tiny))
    centred = log_mean[None, :] - (p_batch * log_mean[None, :]).sum(axis=1, keepdims=True)
    return loss, p_batch * centred / batch_size


def cross_entropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """ Mean cross-entropy of a batch and its gradient w.r.t. the logits. """
    labels = np.asarray(labels, dtype=int)
    rows = np.arange(len(labels))
    loss = float(np.mean(logsumexp(logits, axis=1) - logits[rows, labels]))
    grad = softmax_temp(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / len(labels)


def _check_finite(term: str, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteGradient("Non-finite upstream gradient", term=term)


def total_loss_and_grads(
        model: Model,
        momentum_model: MomentumModel,
        batch: AdaptationBatch,
        key_queue: KeyQueue,
        temporal_queue: TemporalQueue,
        *,
        cls_rng: np.random.Generator,
        ctr_rng: np.random.Generator,
        settings: RunSettings = None,
) -> Tuple[LossBreakdown, List[np.ndarray], np.ndarray]:
    """
    `gamma_cls * L_cls + gamma_ctr * L_ctr + gamma_div * L_div` for one batch, and its
    gradient for every parameter of `model` (same order as `Model.parameters()`).

    `L_cls` is averaged over the selected samples only; `L_ctr` and `L_div` over the whole
    batch, a skipped contrastive sample counting as 0. Per-sample random draws happen in
    the batch's order, which callers keep ascending by sample id.

    Also returns the batch's unit-length momentum keys, for the key queue.
    """
    settings = settings or RunSettings.grab()
    batch_size = len(batch.ids)
    query = model.forward(batch.query_inputs)
    keys = l2_normalize(momentum_model.forward(batch.key_inputs).z)

    # Classification, selected samples only.
    dlogits_cls = np.zeros_like(query.logits)
    l_cls = 0.0
    selected = np.flatnonzero(batch.selected)
    if len(selected):
        losses, grads, _ = nl_classification_batch(query.p[selected], batch.y_bar[selected], cls_rng)
        l_cls = float(losses.mean())
        dlogits_cls[selected] = grads / len(selected)
    else:
        log.warning("No sample of the batch was selected; classification term is 0.")

    # Contrastive, every sample against the admissible queued keys.
    dz_ctr = np.zeros_like(query.z)
    l_ctr = 0.0
    n_excluded = 0
    n_skipped = 0
    for b, sample_id in enumerate(batch.ids):
        negatives = exclusion_set(key_queue.ids, sample_id, temporal_queue, settings.exclusion)
        n_excluded += len(key_queue) - len(negatives)
        try:
            if settings.contrastive_loss is ContrastiveLoss.INFONCE:
                loss, dq = infonce_loss(
                    query.z[b], key_queue.keys, negatives,
                    tau=settings.contrastive_temperature, positive_key=keys[b],
                )
            else:
                loss, dq = nl_infonce_loss(
                    query.z[b], key_queue.keys, negatives, ctr_rng,
                    tau=settings.contrastive_temperature,
                    positive_key=keys[b],
                    include_positive_in_denominator=settings.include_positive_in_denominator,
                )
        except SampleSkipped:
            n_skipped += 1
            continue
        l_ctr += loss / batch_size
        dz_ctr[b] = dq / batch_size

    l_div, dlogits_div = diversity_loss(query.p)

    _check_finite("classification", dlogits_cls)
    _check_finite("contrastive", dz_ctr)
    _check_finite("diversity", dlogits_div)

    g_cls, g_ctr, g_div = settings.gamma_cls, settings.gamma_ctr, settings.gamma_div
    breakdown = LossBreakdown(
        l_cls=l_cls,
        l_ctr=l_ctr,
        l_div=l_div,
        total=g_cls * l_cls + g_ctr * l_ctr + g_div * l_div,
        n_selected=len(selected),
        n_excluded_pairs=n_excluded,
        n_skipped=n_skipped,
    )
    grads = model.backward(query, g_cls * dlogits_cls + g_div * dlogits_div, g_ctr * dz_ctr)
    return breakdown, grads, keys
