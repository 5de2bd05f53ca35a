import itertools
import logging

import numpy as np
import pytest

from xosda.config import DiscoveryMatching
from xosda.errors import InvalidClassCount, ShapeError
from xosda.evaluation import (
    METRICS_CSV_FIELDS,
    cluster_accuracy,
    discovery_metrics,
    harmonic_mean,
    hungarian,
    metrics_csv_row,
    metrics_to_dict,
    open_set_metrics,
    prototype_cluster_accuracy,
)


@pytest.mark.parametrize(
    argnames="os_star,unk,hos",
    argvalues=[(85.7, 93.0, 89.2), (98.6, 94.6, 96.6), (0.0, 0.0, 0.0), (100.0, 0.0, 0.0)],
)
def test_harmonic_mean(os_star, unk, hos):
    assert harmonic_mean(os_star, unk) == pytest.approx(hos, abs=0.05)


def test_open_set_metrics_perfect_predictor():
    truth = np.array([0, 1, 2, 3, 4, 1])
    metrics = open_set_metrics(truth, truth, n_shared=2)
    assert (metrics.os_star, metrics.unk, metrics.hos) == (100.0, 100.0, 100.0)
    assert metrics.per_class_acc == [100.0, 100.0]


def test_open_set_metrics_counts_any_private_class_as_unknown():
    truth = np.array([0, 0, 1, 1, 2, 3])
    pred = np.array([0, 3, 1, 1, 3, 2])
    metrics = open_set_metrics(pred, truth, n_shared=2)
    assert metrics.per_class_acc == [50.0, 100.0]
    assert metrics.os_star == pytest.approx(75.0)
    assert metrics.unk == pytest.approx(100.0)
    assert metrics.hos == pytest.approx(2 * 75.0 * 100.0 / 175.0)

    remapped = np.where(pred >= 2, 5 - pred, pred)
    assert open_set_metrics(remapped, truth, n_shared=2) == metrics


def test_open_set_metrics_absent_class_and_no_unknown(caplog):
    metrics = open_set_metrics([0, 1, 2], [0, 0, 2], n_shared=2)
    assert metrics.per_class_acc == [50.0, None]
    assert metrics.os_star == pytest.approx(50.0)

    with caplog.at_level(logging.WARNING):
        closed = open_set_metrics([0, 1], [0, 1], n_shared=2)
    assert closed.unk == 0.0
    assert "no unknown-class sample" in caplog.text

    with pytest.raises(ShapeError):
        open_set_metrics([0, 1], [0], n_shared=2)


def test_hos_bounds():
    rng = np.random.default_rng(0)
    for _ in range(200):
        truth = rng.integers(6, size=50)
        pred = rng.integers(6, size=50)
        m = open_set_metrics(pred, truth, n_shared=3)
        assert m.hos <= 2 * min(m.os_star, m.unk) + 1e-9
        assert m.hos <= max(m.os_star, m.unk) + 1e-9
        assert 0.0 <= m.hos <= 100.0


def test_hungarian_matches_exhaustive_search():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 8))
        # Small integer costs make ties common; the first optimum in lexicographic order wins.
        cost = rng.integers(0, 4, size=(n, n)).astype(float)
        perms = np.array(list(itertools.permutations(range(n))))
        totals = cost[np.arange(n), perms].sum(axis=1)
        assert list(hungarian(cost)) == list(perms[np.argmin(totals)])


def test_hungarian_shapes():
    assert len(hungarian(np.zeros((0, 0)))) == 0
    assert list(hungarian(np.zeros((3, 3)))) == [0, 1, 2]
    with pytest.raises(ShapeError, match='square'):
        hungarian(np.zeros((2, 3)))


def _exhaustive_cluster_accuracy(pred, truth, n):
    return max(
        np.mean(np.array(perm)[pred] == truth)
        for perm in itertools.permutations(range(n))
    )


def test_cluster_accuracy_matches_exhaustive_search():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        truth = rng.integers(n, size=30)
        pred = np.where(rng.random(30) < 0.6, truth, rng.integers(n, size=30))
        result = cluster_accuracy(pred, truth, n)
        assert result.cluster_acc == pytest.approx(_exhaustive_cluster_accuracy(pred, truth, n))
        assert sorted(result.matching.values()) == sorted(set(result.matching.values()))


def test_cluster_accuracy_is_relabel_invariant():
    rng = np.random.default_rng(3)
    truth = rng.integers(4, size=40)
    pred = rng.integers(4, size=40)
    base = cluster_accuracy(pred, truth, 4).cluster_acc
    for _ in range(10):
        p, t = rng.permutation(4), rng.permutation(4)
        assert cluster_accuracy(p[pred], t[truth], 4).cluster_acc == pytest.approx(base)

    assert cluster_accuracy(rng.permutation(4)[truth], truth, 4).cluster_acc == 1.0


def test_cluster_accuracy_with_more_predicted_classes():
    result = cluster_accuracy([0, 1, 2, 2], [0, 1, 1, 1], n_private=2, n_predicted=3)
    assert result.cluster_acc == pytest.approx(0.75)
    assert result.matching == {0: 0, 2: 1}
    assert not result.class_count_matches


def test_cluster_accuracy_errors():
    with pytest.raises(InvalidClassCount):
        cluster_accuracy([0], [0], 0)
    with pytest.raises(ShapeError):
        cluster_accuracy([0, 1], [0], 2)


def test_prototype_cluster_accuracy():
    rng = np.random.default_rng(4)
    truth = np.repeat([0, 1, 2], 10)
    centres = np.eye(3)
    features = centres[truth] + 0.05 * rng.normal(size=(30, 3))
    pred = np.array([2, 0, 1])[truth]

    result = prototype_cluster_accuracy(features, pred, truth, 3)
    assert result.cluster_acc == 1.0
    assert result.matching == {2: 0, 0: 1, 1: 2}
    assert result.mode is DiscoveryMatching.PROTOTYPE


def test_discovery_metrics():
    truth = np.array([0, 1, 2, 3, 2, 3])
    pred = np.array([0, 1, 3, 2, 3, 2])
    result = discovery_metrics(pred, truth, n_shared=2, n_predicted_private=2)
    assert result.cluster_acc == 1.0
    assert result.matching == {0: 1, 1: 0}

    # A private sample predicted as a shared class is never correct.
    pred[2] = 0
    assert discovery_metrics(pred, truth, n_shared=2, n_predicted_private=2).cluster_acc == pytest.approx(0.75)

    assert discovery_metrics([0, 1], [0, 1], n_shared=2, n_predicted_private=2) is None
    assert discovery_metrics(pred, truth, n_shared=2, n_predicted_private=0) is None


def test_discovery_metrics_prototype_mode():
    truth = np.array([0, 2, 2, 3, 3])
    features = np.array([[1.0, 1.0], [1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    pred = np.array([0, 3, 3, 2, 2])
    result = discovery_metrics(
        pred, truth, n_shared=2, n_predicted_private=2, mode=DiscoveryMatching.PROTOTYPE, features=features
    )
    assert result.cluster_acc == 1.0
    assert result.mode is DiscoveryMatching.PROTOTYPE


def _disagreeing_matchings():
    # Both true private classes are mostly predicted as the shared class 0, so their mean
    # features point away from the few samples predicted as private.
    truth = np.array([1] * 7 + [2] * 6)
    pred = np.array([0] * 5 + [1] * 2 + [0] * 5 + [2])
    features = np.array([[1.0, 0.0]] * 5 + [[0.0, 1.0]] * 2 + [[0.0, 1.0]] * 5 + [[1.0, 0.0]])
    return pred, truth, features


def test_discovery_metrics_reports_both_matchings_when_they_differ():
    pred, truth, features = _disagreeing_matchings()
    open_set = open_set_metrics(pred, truth, n_shared=1)

    result = discovery_metrics(pred, truth, n_shared=1, n_predicted_private=2, features=features)
    assert result.mode is DiscoveryMatching.CONTINGENCY
    assert result.cluster_acc == pytest.approx(3 / 13)
    assert result.matching == {0: 0, 1: 1}
    assert result.alternative.mode is DiscoveryMatching.PROTOTYPE
    assert result.alternative.cluster_acc == 0.0
    assert result.alternative.matching == {0: 1, 1: 0}
    values = metrics_to_dict(open_set, result)
    assert values["cluster_acc"] == pytest.approx(3 / 13)
    assert values["cluster_acc_prototype"] == 0.0

    prototype = discovery_metrics(
        pred, truth, n_shared=1, n_predicted_private=2, mode=DiscoveryMatching.PROTOTYPE, features=features
    )
    assert prototype.cluster_acc == 0.0
    assert prototype.alternative.cluster_acc == pytest.approx(3 / 13)
    assert metrics_to_dict(open_set, prototype)["cluster_acc_contingency"] == pytest.approx(3 / 13)


def test_discovery_metrics_agreeing_matchings_report_one():
    truth = np.array([0, 2, 2, 3, 3])
    features = np.array([[1.0, 1.0], [1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    pred = np.array([0, 3, 3, 2, 2])
    result = discovery_metrics(pred, truth, n_shared=2, n_predicted_private=2, features=features)
    assert result.cluster_acc == 1.0
    assert result.alternative is None
    assert "cluster_acc_prototype" not in metrics_to_dict(open_set_metrics(pred, truth, 2), result)

    with pytest.raises(ShapeError, match='features'):
        discovery_metrics(pred, truth, n_shared=2, n_predicted_private=2, mode=DiscoveryMatching.PROTOTYPE)


def test_metrics_serialization():
    open_set = open_set_metrics([0, 1, 2], [0, 1, 2], n_shared=2)
    discovery = cluster_accuracy([0], [0], 1)

    values = metrics_to_dict(open_set, discovery)
    assert values["os_star"] == 100.0
    assert values["cluster_acc"] == 1.0
    assert values["per_class_acc"] == [100.0, 100.0]
    assert values["discovery_mode"] == "contingency"

    assert metrics_to_dict(open_set)["cluster_acc"] is None
    assert len(METRICS_CSV_FIELDS) == 4
    assert metrics_csv_row(open_set) == ["100.0", "100.0", "100.0", ""]
    assert metrics_csv_row(open_set, discovery)[-1] == "1.0"
