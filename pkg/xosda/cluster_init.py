"""
Clustering-based initialisation of the target model.

Target features from the frozen source extractor are clustered into `n_shared + n_private`
groups; centroids that best match the source prototypes (classifier columns) stand in for
the shared classes and the leftover centroids become the private-class prototypes.
"""
import dataclasses
import logging
from typing import List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import MatchingMode, RunSettings
from .errors import ClusteringError, InsufficientSamples, InvalidClassCount
from .model import Classifier, set_private_prototypes
from .numerics import cosine_distance_matrix, l2_normalize, softmax_temp

log = logging.getLogger(__name__)

_INERTIA_RTOL = 1e-9


@dataclasses.dataclass
class ClusterResult:
    centroids: np.ndarray
    """ (K, D) """
    assignment: np.ndarray
    inertia: float
    n_iter: int = 0


@dataclasses.dataclass
class CentroidMatching:
    shared_map: np.ndarray
    """ `shared_map[i]` is the centroid standing in for shared class `i`. """
    private_centroids: List[int]
    """ Unmatched centroids in ascending index order; they become the private classes. """

    @property
    def class_order(self) -> List[int]:
        """ Centroid index for every class index, shared classes first. """
        return [int(c) for c in self.shared_map] + list(self.private_centroids)


@dataclasses.dataclass
class InitResult:
    classifier: Classifier
    features: np.ndarray
    """ Source-extractor target features, the bank's initial `z'`. """
    probs: np.ndarray
    """ Initial bank predictions, one row per target sample. """
    labels: np.ndarray
    """ Initial hard pseudo-labels, `argmax(probs)`. """
    private_prototypes: np.ndarray
    """ (n_private, D); what was written into the private classifier columns. """
    cluster: Optional[ClusterResult] = None
    matching: Optional[CentroidMatching] = None


def _squared_distances(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """ k-means++ seeding; returns the indices of the `k` chosen points. """
    n = len(features)
    chosen = [int(rng.integers(n))]
    closest = ((features - features[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # Every remaining point coincides with a chosen one.
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, ((features - features[idx]) ** 2).sum(axis=1))
    return np.array(chosen)


def _update_centroids(features, labels, distances, centroids):
    new_centroids = centroids.copy()
    empty = []
    for j in range(len(centroids)):
        members = labels == j
        if members.any():
            new_centroids[j] = features[members].mean(axis=0)
        else:
            empty.append(j)
    if empty:
        # Farthest points from their own centroid, each used once.
        own = distances[np.arange(len(features)), labels]
        farthest = np.argsort(-own, kind="stable")
        for j, idx in zip(empty, farthest):
            log.debug("Reseeding empty cluster (%s) at point (%s).", j, idx)
            new_centroids[j] = features[idx]
    return new_centroids


def kmeans(
        features,
        k: int,
        rng: np.random.Generator,
        max_iter: int = 300,
        tol: float = 1e-6,
) -> ClusterResult:
    """
    Lloyd's algorithm from k-means++ seeds.

    Stops once the assignment no longer changes, the total centroid shift drops below `tol`
    or after `max_iter` iterations. Raises `ClusteringError` if the inertia ever grows.
    """
    features = np.asarray(features, dtype=float)
    n = len(features)
    if k < 1:
        raise InvalidClassCount(f"kmeans needs K >= 1, got ({k}).")
    if n < k:
        raise InsufficientSamples(f"kmeans needs at least K ({k}) points, got ({n}).")

    centroids = features[kmeans_plusplus(features, k, rng)].copy()
    distances = _squared_distances(features, centroids)
    labels = distances.argmin(axis=1)
    inertia = float(distances[np.arange(n), labels].sum())

    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new_centroids = _update_centroids(features, labels, distances, centroids)
        shift = float(np.linalg.norm(new_centroids - centroids))
        centroids = new_centroids

        distances = _squared_distances(features, centroids)
        new_labels = distances.argmin(axis=1)
        new_inertia = float(distances[np.arange(n), new_labels].sum())
        if new_inertia > inertia + _INERTIA_RTOL * max(inertia, 1.0):
            raise ClusteringError(
                f"kmeans inertia increased from ({inertia}) to ({new_inertia}) "
                f"at iteration ({n_iter})."
            )

        converged = np.array_equal(new_labels, labels) or shift < tol
        labels, inertia = new_labels, new_inertia
        if converged:
            break

    log.debug("kmeans: K=%s, %s iterations, inertia %.6g", k, n_iter, inertia)
    return ClusterResult(centroids=centroids, assignment=labels, inertia=inertia, n_iter=n_iter)


def assign_by_similarity(similarity: np.ndarray, mode: MatchingMode = MatchingMode.OPTIMAL) -> np.ndarray:
    """
    One distinct column for every row of `similarity` (rows <= columns).

    `OPTIMAL` maximizes the total similarity; `GREEDY` lets each row in turn take its most
    similar column that is still free.
    """
    n_rows, n_cols = similarity.shape
    if n_rows > n_cols:
        raise InvalidClassCount(f"Cannot assign ({n_rows}) rows to ({n_cols}) columns.")
    if mode is MatchingMode.OPTIMAL:
        rows, cols = linear_sum_assignment(similarity, maximize=True)
        result = np.empty(n_rows, dtype=int)
        result[rows] = cols
        return result

    taken = np.zeros(n_cols, dtype=bool)
    result = np.empty(n_rows, dtype=int)
    for i in range(n_rows):
        col = int(np.argmax(np.where(taken, -np.inf, similarity[i])))
        result[i] = col
        taken[col] = True
    return result


def match_centroids(
        shared_weight: np.ndarray,
        centroids: np.ndarray,
        mode: MatchingMode = MatchingMode.OPTIMAL,
) -> CentroidMatching:
    """ Match each source prototype (column of `shared_weight`) to a distinct centroid by cosine similarity. """
    similarity = l2_normalize(shared_weight.T) @ l2_normalize(centroids).T
    shared_map = assign_by_similarity(similarity, mode)
    private = sorted(set(range(len(centroids))) - set(int(c) for c in shared_map))
    return CentroidMatching(shared_map=shared_map, private_centroids=private)


def bank_init_probs(z, centroids, tau2: float) -> np.ndarray:
    """
    Score `1 - d_k / max_j d_j` per class (cosine distances to the class-ordered centroids),
    then softmax with temperature `tau2`. Works on one feature or a batch of rows.

    When every distance is 0 the result is uniform.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    distances = cosine_distance_matrix(np.atleast_2d(z), np.asarray(centroids, dtype=float))
    largest = distances.max(axis=1, keepdims=True)
    safe = np.where(largest > 0, largest, 1.0)
    scores = np.where(largest > 0, 1.0 - distances / safe, 1.0)
    probs = softmax_temp(scores, tau2)
    return probs[0] if single else probs


def initialize_target(
        classifier: Classifier,
        target_features,
        rng: np.random.Generator,
        settings: RunSettings = None,
) -> InitResult:
    """
    Clusters `target_features` (source-extractor features of every target sample) and
    derives the private prototypes, the bank seed predictions and the initial pseudo-labels.

    `classifier` is the source classifier already extended with its private columns
    (or not extended at all for a closed-set run).

    Private prototypes are the leftover centroids themselves. With
    `settings.scale_private_prototypes` they are rescaled to unit length times the mean norm
    of the source prototypes.

    The initial pseudo-label is the argmax of the bank-init probabilities, ie: the nearest
    class-ordered centroid by cosine distance. k-means assigns by Euclidean distance, so
    for a few boundary samples this differs from the class of the cluster they fell in.

    With `settings.cluster_init` off, the private columns keep their random values and the
    bank is seeded with the extended classifier's own predictions.
    """
    settings = settings or RunSettings.grab()
    features = np.asarray(target_features, dtype=float)
    n_shared, n_private = classifier.n_shared, classifier.n_private

    if not settings.cluster_init:
        probs = softmax_temp(features @ classifier.weight)
        return InitResult(
            classifier=classifier,
            features=features,
            probs=probs,
            labels=probs.argmax(axis=1),
            private_prototypes=classifier.private_weight.T.copy(),
        )

    unit_features = l2_normalize(features)
    cluster = kmeans(
        unit_features,
        n_shared + n_private,
        rng,
        max_iter=settings.kmeans_max_iter,
        tol=settings.kmeans_tol,
    )
    matching = match_centroids(classifier.shared_weight, cluster.centroids, settings.matching)
    ordered = cluster.centroids[matching.class_order]

    prototypes = np.zeros((0, features.shape[1]))
    if n_private:
        prototypes = cluster.centroids[matching.private_centroids].copy()
        if settings.scale_private_prototypes:
            scale = float(np.linalg.norm(classifier.shared_weight, axis=0).mean())
            prototypes = l2_normalize(prototypes) * scale
        classifier = set_private_prototypes(classifier, prototypes)

    probs = bank_init_probs(features, ordered, settings.tau2)
    labels = probs.argmax(axis=1)
    log.info(
        "Cluster init: K=%s, inertia %.4g, %s private prototypes.",
        len(ordered), cluster.inertia, n_private,
    )
    return InitResult(
        classifier=classifier,
        features=features,
        probs=probs,
        labels=labels,
        private_prototypes=prototypes,
        cluster=cluster,
        matching=matching,
    )
