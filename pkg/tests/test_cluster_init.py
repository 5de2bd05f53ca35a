import itertools

import numpy as np
import pytest

from xosda.cluster_init import (
    assign_by_similarity,
    bank_init_probs,
    initialize_target,
    kmeans,
    kmeans_plusplus,
    match_centroids,
)
from xosda.config import MatchingMode, RunSettings
from xosda.errors import InsufficientSamples, InvalidClassCount
from xosda.model import Classifier, extend_classifier
from xosda.numerics import RngStream, cosine_distance_matrix, l2_normalize, make_rng


def _lloyd_oracle(features, centroids, max_iter=300):
    """ Plain Lloyd iterations from given seeds, written independently of `kmeans`. """
    labels = None
    for _ in range(max_iter):
        new_labels = np.array([
            min(range(len(centroids)), key=lambda k: float(np.sum((x - centroids[k]) ** 2)))
            for x in features
        ])
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = np.array([
            features[labels == k].mean(axis=0) if np.any(labels == k) else centroids[k]
            for k in range(len(centroids))
        ])
    return labels


def test_kmeans_separable_pairs():
    features = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0]])
    result = kmeans(features, 2, make_rng(0, RngStream.CLUSTERING))
    assert result.inertia == pytest.approx(0.0)
    assert sorted(map(tuple, result.centroids)) == [(0.0, 0.0), (5.0, 5.0)]
    assert result.assignment[0] == result.assignment[1] != result.assignment[2] == result.assignment[3]


def test_kmeans_k_equals_n():
    features = np.random.default_rng(0).normal(size=(6, 3))
    result = kmeans(features, 6, make_rng(0, RngStream.CLUSTERING))
    assert result.inertia == pytest.approx(0.0)
    assert len(set(result.assignment)) == 6


def test_kmeans_matches_lloyd_oracle():
    rng = np.random.default_rng(11)
    blobs = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
    features = np.concatenate([b + 0.6 * rng.normal(size=(4, 2)) for b in blobs])

    result = kmeans(features, 3, make_rng(3, RngStream.CLUSTERING), tol=0.0)
    seeds = features[kmeans_plusplus(features, 3, make_rng(3, RngStream.CLUSTERING))]
    assert np.array_equal(result.assignment, _lloyd_oracle(features, seeds))


def test_kmeans_centroids_are_cluster_means():
    features = np.random.default_rng(2).normal(size=(60, 4))
    result = kmeans(features, 5, make_rng(0, RngStream.CLUSTERING), tol=0.0)
    for k in range(5):
        members = features[result.assignment == k]
        assert len(members)
        assert result.centroids[k] == pytest.approx(members.mean(axis=0), abs=1e-6)


def test_kmeans_errors():
    with pytest.raises(InsufficientSamples):
        kmeans(np.zeros((2, 2)), 3, make_rng(0, RngStream.CLUSTERING))
    with pytest.raises(InvalidClassCount):
        kmeans(np.zeros((2, 2)), 0, make_rng(0, RngStream.CLUSTERING))


def test_kmeans_plusplus_identical_points():
    chosen = kmeans_plusplus(np.ones((4, 2)), 3, make_rng(0, RngStream.CLUSTERING))
    assert len(set(chosen)) == 3


def test_match_centroids_perfect_match():
    shared = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    centroids = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    matching = match_centroids(shared, centroids)
    assert list(matching.shared_map) == [2, 0]
    assert matching.private_centroids == [1]
    assert matching.class_order == [2, 0, 1]


def test_match_centroids_closed_set():
    shared = np.eye(3)
    matching = match_centroids(shared, np.eye(3)[::-1])
    assert matching.private_centroids == []
    assert sorted(matching.shared_map) == [0, 1, 2]


def test_assign_by_similarity_resolves_conflicts_globally():
    similarity = np.array([[0.8, 0.9], [0.9, 0.1]])
    assert list(assign_by_similarity(similarity, MatchingMode.OPTIMAL)) == [1, 0]
    # First-come: class 0 takes its favourite, class 1 gets the rest.
    assert list(assign_by_similarity(similarity, MatchingMode.GREEDY)) == [1, 0]

    conflict = np.array([[0.9, 0.8], [0.95, 0.1]])
    assert list(assign_by_similarity(conflict, MatchingMode.GREEDY)) == [0, 1]
    assert list(assign_by_similarity(conflict, MatchingMode.OPTIMAL)) == [1, 0]


def test_match_centroids_equals_exhaustive_injection_search():
    rng = np.random.default_rng(4)
    for _ in range(40):
        n_shared = int(rng.integers(1, 6))
        k = int(rng.integers(n_shared, 8))
        shared = rng.normal(size=(3, n_shared))
        centroids = rng.normal(size=(k, 3))
        similarity = l2_normalize(shared.T) @ l2_normalize(centroids).T

        best = max(
            sum(similarity[i, c] for i, c in enumerate(cols))
            for cols in itertools.permutations(range(k), n_shared)
        )
        matching = match_centroids(shared, centroids)
        total = sum(similarity[i, c] for i, c in enumerate(matching.shared_map))
        assert total == pytest.approx(best, abs=1e-9)
        assert sorted(list(matching.shared_map) + matching.private_centroids) == list(range(k))


def test_bank_init_probs_hand_computed():
    # Unit vectors at the angles giving cosine distances (0.1, 0.5, 1.0) from z = e_0.
    angles = np.arccos([0.9, 0.5, 0.0])
    centroids = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    probs = bank_init_probs([1.0, 0.0], centroids, 0.25)
    expected = np.exp([3.6, 2.0, 0.0]) / np.exp([3.6, 2.0, 0.0]).sum()
    assert probs == pytest.approx(expected, abs=1e-9)
    assert probs == pytest.approx([0.8135, 0.1642, 0.0222], abs=1e-4)


def test_bank_init_probs_edge_cases():
    centroids = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert np.argmax(bank_init_probs([1.0, 0.0], centroids, 0.25)) == 0

    # Every centroid at the same distance, and every centroid equal to z.
    assert bank_init_probs([0.0, 1.0], [[1.0, 0.0], [-1.0, 0.0]], 0.25) == pytest.approx([0.5, 0.5])
    assert bank_init_probs([1.0, 0.0], [[2.0, 0.0], [3.0, 0.0]], 0.25) == pytest.approx([0.5, 0.5])


def test_bank_init_probs_argmax_is_nearest_centroid():
    rng = np.random.default_rng(8)
    features = rng.normal(size=(200, 4))
    centroids = rng.normal(size=(5, 4))
    probs = bank_init_probs(features, centroids, 0.25)
    assert np.array_equal(probs.argmax(axis=1), cosine_distance_matrix(features, centroids).argmin(axis=1))
    assert probs.sum(axis=1) == pytest.approx(np.ones(200))


def _clustered_target(rng, n_classes=5, dim=6, per_class=20):
    centers = 3.0 * l2_normalize(rng.normal(size=(n_classes, dim)))
    labels = np.repeat(np.arange(n_classes), per_class)
    return centers, centers[labels] + 0.02 * rng.normal(size=(len(labels), dim)), labels


def test_initialize_target():
    rng = np.random.default_rng(0)
    centers, features, _ = _clustered_target(rng)
    classifier = extend_classifier(Classifier(weight=centers[:3].T.copy(), n_shared=3), 2, make_rng(0, 8))
    settings = RunSettings(tau2=0.25)

    init = initialize_target(classifier, features, make_rng(0, RngStream.CLUSTERING), settings)
    assert np.array_equal(init.classifier.shared_weight, classifier.shared_weight)
    assert init.classifier.n_private == 2
    assert np.array_equal(init.labels, init.probs.argmax(axis=1))
    ordered = init.cluster.centroids[init.matching.class_order]
    assert np.array_equal(init.labels, cosine_distance_matrix(features, ordered).argmin(axis=1))
    assert init.private_prototypes.shape == (2, 6)
    leftover = init.cluster.centroids[init.matching.private_centroids]
    assert np.array_equal(init.classifier.private_weight.T, leftover)
    assert np.array_equal(init.private_prototypes, leftover)
    assert sorted(init.matching.class_order) == list(range(5))
    # Shared-class centres are recovered by the matching.
    assert np.array_equal(init.labels[:60], np.repeat(np.arange(3), 20))

    again = initialize_target(classifier, features, make_rng(0, RngStream.CLUSTERING), settings)
    assert np.array_equal(again.labels, init.labels)
    assert np.array_equal(again.matching.shared_map, init.matching.shared_map)


def test_initialize_target_closed_set_and_disabled():
    rng = np.random.default_rng(1)
    centers, features, _ = _clustered_target(rng, n_classes=3)
    classifier = Classifier(weight=centers.T.copy(), n_shared=3)

    closed = initialize_target(classifier, features, make_rng(0, RngStream.CLUSTERING), RunSettings())
    assert closed.classifier.n_private == 0
    assert closed.private_prototypes.shape == (0, 6)

    plain = initialize_target(
        classifier, features, make_rng(0, RngStream.CLUSTERING), RunSettings(cluster_init=False)
    )
    assert plain.cluster is None
    assert np.array_equal(plain.labels, (features @ classifier.weight).argmax(axis=1))


def test_initialize_target_beats_source_predictions_on_shifted_target():
    rng = np.random.default_rng(3)
    centers, features, truth = _clustered_target(rng)
    classifier = extend_classifier(Classifier(weight=centers[:3].T.copy(), n_shared=3), 2, make_rng(0, 8))

    init = initialize_target(classifier, features, make_rng(0, RngStream.CLUSTERING), RunSettings())
    raw = (features @ classifier.weight).argmax(axis=1)

    def open_set_accuracy(labels):
        return np.mean(np.where(truth < 3, labels == truth, labels >= 3))

    assert open_set_accuracy(init.labels) > open_set_accuracy(raw)


def test_initialize_target_scaled_private_prototypes():
    rng = np.random.default_rng(0)
    centers, features, _ = _clustered_target(rng)
    classifier = extend_classifier(Classifier(weight=centers[:3].T.copy(), n_shared=3), 2, make_rng(0, 8))
    settings = RunSettings(tau2=0.25, scale_private_prototypes=True)

    init = initialize_target(classifier, features, make_rng(0, RngStream.CLUSTERING), settings)
    source_norm = np.linalg.norm(classifier.shared_weight, axis=0).mean()
    assert np.linalg.norm(init.classifier.private_weight, axis=0) == pytest.approx(np.full(2, source_norm))
    leftover = l2_normalize(init.cluster.centroids[init.matching.private_centroids])
    assert l2_normalize(init.classifier.private_weight.T) == pytest.approx(leftover)
    # Labels come from the bank-init probabilities, which never see the prototypes.
    plain = initialize_target(classifier, features, make_rng(0, RngStream.CLUSTERING), RunSettings(tau2=0.25))
    assert np.array_equal(init.labels, plain.labels)
