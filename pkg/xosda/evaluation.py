"""
Open-set metrics (OS*, UNK, HOS) and novel-class discovery (cluster accuracy).

Percentages are in [0, 100]; `cluster_acc` is a fraction in [0, 1].
"""
import dataclasses
import logging
from typing import Dict, List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import DiscoveryMatching
from .errors import InvalidClassCount, ShapeError
from .numerics import cosine_distance_matrix

log = logging.getLogger(__name__)


@dataclasses.dataclass
class OpenSetMetrics:
    os_star: float
    unk: float
    hos: float
    per_class_acc: List[Optional[float]]
    """ One entry per shared class; `None` for a class with no target sample. """


@dataclasses.dataclass
class DiscoveryMetrics:
    cluster_acc: float
    matching: Dict[int, int]
    """ Predicted private class -> ground-truth private class (both counted from 0). """
    mode: DiscoveryMatching = DiscoveryMatching.CONTINGENCY
    class_count_matches: bool = True
    """ False when the number of predicted and true private classes differ. """
    alternative: Optional['DiscoveryMetrics'] = None
    """ The other matching mode's result, kept only when it disagrees with this one. """


def harmonic_mean(a: float, b: float) -> float:
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def open_set_metrics(pred, truth, n_shared: int) -> OpenSetMetrics:
    """
    Any class >= `n_shared` is "unknown", in predictions and in truth alike.

    OS* is the mean per-class accuracy over the shared classes present in `truth`; UNK is the
    share of unknown samples predicted as any unknown class; HOS is their harmonic mean.
    """
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if pred.shape != truth.shape:
        raise ShapeError(f"Got ({len(pred)}) predictions for ({len(truth)}) labels.")

    per_class: List[Optional[float]] = []
    for c in range(n_shared):
        members = truth == c
        if not members.any():
            log.warning("Shared class (%s) has no target sample; left out of OS*.", c)
            per_class.append(None)
            continue
        per_class.append(100.0 * float(np.mean(pred[members] == c)))
    present = [acc for acc in per_class if acc is not None]
    os_star = float(np.mean(present)) if present else 0.0

    unknown = truth >= n_shared
    if unknown.any():
        unk = 100.0 * float(np.mean(pred[unknown] >= n_shared))
    else:
        log.warning("Target has no unknown-class sample; UNK is reported as 0.")
        unk = 0.0

    return OpenSetMetrics(os_star=os_star, unk=unk, hos=harmonic_mean(os_star, unk), per_class_acc=per_class)


def hungarian(cost) -> np.ndarray:
    """
    Permutation `perm` (row `i` -> column `perm[i]`) minimizing the total cost.
    Among co-optimal assignments the lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError(f"Hungarian matching needs a square cost matrix, got shape ({cost.shape}).")
    n = len(cost)
    if not n:
        return np.zeros(0, dtype=int)

    rows, cols = linear_sum_assignment(cost)
    best = cost[rows, cols].sum()
    tolerance = 1e-9 * max(1.0, abs(best))

    # Fix rows in order, each to the smallest column that still allows an optimal completion.
    perm = np.empty(n, dtype=int)
    free_cols = list(range(n))
    prefix = 0.0
    for i in range(n):
        rest_rows = list(range(i + 1, n))
        for col in free_cols:
            rest_cols = [c for c in free_cols if c != col]
            rest = 0.0
            if rest_rows:
                sub = cost[np.ix_(rest_rows, rest_cols)]
                r, c = linear_sum_assignment(sub)
                rest = sub[r, c].sum()
            if prefix + cost[i, col] + rest <= best + tolerance:
                perm[i] = col
                prefix += cost[i, col]
                free_cols.remove(col)
                break
    return perm


def _square(matrix: np.ndarray, fill: float = 0.0) -> np.ndarray:
    n = max(matrix.shape)
    padded = np.full((n, n), fill)
    padded[:matrix.shape[0], :matrix.shape[1]] = matrix
    return padded


def cluster_accuracy(pred_private, truth_private, n_private: int, n_predicted: int = None) -> DiscoveryMetrics:
    """
    Best accuracy over one-to-one relabelings of the predicted private classes.

    Labels count from 0 within the private classes; a prediction outside
    `[0, n_predicted)` (ie: a shared class) is never correct. With more predicted than true
    classes the contingency matrix is padded with zeros, so unmatched predicted classes
    score nothing.
    """
    if n_private < 1:
        raise InvalidClassCount(f"Cluster accuracy needs >= 1 private class, got ({n_private}).")
    n_predicted = n_private if n_predicted is None else n_predicted
    pred = np.asarray(pred_private, dtype=int)
    truth = np.asarray(truth_private, dtype=int)
    if pred.shape != truth.shape:
        raise ShapeError(f"Got ({len(pred)}) predictions for ({len(truth)}) labels.")

    counts = np.zeros((max(n_predicted, 1), n_private))
    in_range = (pred >= 0) & (pred < n_predicted)
    np.add.at(counts, (pred[in_range], truth[in_range]), 1)
    perm = hungarian(-_square(counts))
    matching = {r: int(perm[r]) for r in range(n_predicted) if perm[r] < n_private}
    hits = sum(counts[r, c] for r, c in matching.items())
    if not len(truth):
        log.warning("No private-class sample to score; cluster accuracy is 0.")
    return DiscoveryMetrics(
        cluster_acc=float(hits / len(truth)) if len(truth) else 0.0,
        matching=matching,
        mode=DiscoveryMatching.CONTINGENCY,
        class_count_matches=n_predicted == n_private,
    )


def _class_means(features: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    means = np.zeros((n_classes, features.shape[1]))
    for c in range(n_classes):
        members = labels == c
        if members.any():
            means[c] = features[members].mean(axis=0)
    return means


def prototype_cluster_accuracy(
        features, pred_private, truth_private, n_private: int, n_predicted: int = None
) -> DiscoveryMetrics:
    """
    Matches predicted and true private classes through their mean-feature prototypes
    (cosine distance, `hungarian`), then scores the remapped predictions.

    A class without samples has no prototype and is equally far from everything.
    """
    if n_private < 1:
        raise InvalidClassCount(f"Cluster accuracy needs >= 1 private class, got ({n_private}).")
    n_predicted = n_private if n_predicted is None else n_predicted
    features = np.asarray(features, dtype=float)
    pred = np.asarray(pred_private, dtype=int)
    truth = np.asarray(truth_private, dtype=int)

    pred_means = _class_means(features, pred, n_predicted)
    true_means = _class_means(features, truth, n_private)
    cost = np.full((n_predicted, n_private), 2.0)
    pred_ok = np.linalg.norm(pred_means, axis=1) > 0
    true_ok = np.linalg.norm(true_means, axis=1) > 0
    if pred_ok.any() and true_ok.any():
        cost[np.ix_(pred_ok, true_ok)] = cosine_distance_matrix(pred_means[pred_ok], true_means[true_ok])
    perm = hungarian(_square(cost, fill=2.0))
    matching = {r: int(perm[r]) for r in range(n_predicted) if perm[r] < n_private}

    in_range = (pred >= 0) & (pred < n_predicted)
    mapped = np.full(len(pred), -1)
    mapped[in_range] = [matching.get(int(p), -1) for p in pred[in_range]]
    return DiscoveryMetrics(
        cluster_acc=float(np.mean(mapped == truth)) if len(truth) else 0.0,
        matching=matching,
        mode=DiscoveryMatching.PROTOTYPE,
        class_count_matches=n_predicted == n_private,
    )


def discovery_metrics(
        pred,
        truth,
        n_shared: int,
        n_predicted_private: int,
        *,
        n_true_private: int = None,
        mode: DiscoveryMatching = DiscoveryMatching.CONTINGENCY,
        features=None,
) -> Optional[DiscoveryMetrics]:
    """
    Discovery metrics over the samples whose true class is private; `None` when the target
    has no private class or no private class was predicted.

    `mode` picks the reported matching. Given `features`, both matchings are computed and
    the other one is attached as `alternative` when its accuracy or matching differs.
    """
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    private = truth >= n_shared
    if n_true_private is None:
        n_true_private = int(truth.max()) + 1 - n_shared if len(truth) else 0
    if not private.any() or n_true_private < 1 or n_predicted_private < 1:
        return None
    if n_predicted_private != n_true_private:
        log.warning(
            "Scoring discovery with (%s) predicted vs (%s) true private classes.",
            n_predicted_private, n_true_private,
        )
    args = (pred[private] - n_shared, truth[private] - n_shared, n_true_private, n_predicted_private)
    if features is None:
        if mode is DiscoveryMatching.PROTOTYPE:
            raise ShapeError("Prototype matching needs the sample features.")
        return cluster_accuracy(*args)

    contingency = cluster_accuracy(*args)
    prototype = prototype_cluster_accuracy(np.asarray(features)[private], *args)
    primary, other = (
        (prototype, contingency) if mode is DiscoveryMatching.PROTOTYPE else (contingency, prototype)
    )
    if other.cluster_acc != primary.cluster_acc or other.matching != primary.matching:
        log.info(
            "Discovery matchings disagree: %s %.4f vs %s %.4f.",
            primary.mode.value, primary.cluster_acc, other.mode.value, other.cluster_acc,
        )
        primary.alternative = other
    return primary


def metrics_to_dict(open_set: OpenSetMetrics, discovery: DiscoveryMetrics = None) -> dict:
    """
    Flat, JSON-ready metrics: `os_star, unk, hos, cluster_acc, per_class_acc`, plus
    `cluster_acc_<mode>` when the other discovery matching disagrees.
    """
    result = {
        "os_star": open_set.os_star,
        "unk": open_set.unk,
        "hos": open_set.hos,
        "cluster_acc": None if discovery is None else discovery.cluster_acc,
        "per_class_acc": list(open_set.per_class_acc),
    }
    if discovery is not None:
        result["discovery_mode"] = discovery.mode.value
        result["discovery_class_count_matches"] = discovery.class_count_matches
        if discovery.alternative is not None:
            result[f"cluster_acc_{discovery.alternative.mode.value}"] = discovery.alternative.cluster_acc
    return result


METRICS_CSV_FIELDS = ["os_star", "unk", "hos", "cluster_acc"]


def metrics_csv_row(open_set: OpenSetMetrics, discovery: DiscoveryMetrics = None) -> List[str]:
    values = metrics_to_dict(open_set, discovery)
    return ["" if values[k] is None else repr(float(values[k])) for k in METRICS_CSV_FIELDS]
