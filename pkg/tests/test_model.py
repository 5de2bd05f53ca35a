import struct

import numpy as np
import pytest

from xosda.errors import CheckpointError, DegenerateVector, InvalidClassCount, NonFiniteGradient, ShapeError
from xosda.losses import cross_entropy
from xosda.model import (
    Activation,
    Classifier,
    FeatureExtractor,
    Layer,
    Model,
    MomentumModel,
    build_model,
    checkpoint_bytes,
    ema_update,
    extend_classifier,
    load_checkpoint,
    save_checkpoint,
    set_private_prototypes,
    sgd_step,
)
from xosda.numerics import RngStream, make_rng


def _identity_model() -> Model:
    layer = Layer(weight=np.eye(2), bias=np.zeros(2), activation=Activation.IDENTITY)
    return Model(extractor=FeatureExtractor([layer]), classifier=Classifier(weight=np.eye(2), n_shared=2))


def _small_model(seed=0, n_shared=3) -> Model:
    return build_model(5, (6,), 4, n_shared, make_rng(seed, RngStream.INIT))


def test_forward_identity_network():
    result = _identity_model().forward([1.0, 0.0])
    assert result.logits == pytest.approx([1.0, 0.0])
    assert result.p == pytest.approx([0.7311, 0.2689], abs=1e-4)

    zero = _identity_model().forward([0.0, 0.0])
    assert zero.p == pytest.approx([0.5, 0.5])


def test_forward_batch_and_shape_error():
    model = _small_model()
    result = model.forward(np.ones((7, 5)))
    assert result.z.shape == (7, 4)
    assert result.p.shape == (7, 3)
    assert result.p.sum(axis=1) == pytest.approx(np.ones(7))

    with pytest.raises(ShapeError, match='dimension'):
        model.forward(np.ones(4))


def test_forward_is_deterministic():
    model = _small_model()
    x = np.random.default_rng(0).normal(size=(3, 5))
    assert np.array_equal(model.forward(x).p, model.forward(x).p)


def test_build_model_respects_init_bounds():
    model = build_model(16, (8,), 4, 3, make_rng(0, RngStream.INIT))
    assert model.shapes() == [(8, 16), (8,), (4, 8), (4,), (4, 3)]
    assert np.all(np.abs(model.extractor.layers[0].weight) <= 1 / np.sqrt(16))
    assert np.all(np.abs(model.classifier.weight) <= 1 / np.sqrt(4))


def test_extend_classifier():
    classifier = _small_model(n_shared=3).classifier
    extended = extend_classifier(classifier, 2, make_rng(0, RngStream.INIT))
    assert extended.n_classes == 5
    assert extended.n_private == 2
    assert np.array_equal(extended.shared_weight, classifier.weight)
    assert np.all(np.abs(extended.private_weight) <= 1 / np.sqrt(4))

    office31 = extend_classifier(build_model(5, (), 8, 10, make_rng(0, RngStream.INIT)).classifier, 11, make_rng(1, 1))
    assert office31.n_classes == 21

    with pytest.raises(InvalidClassCount):
        extend_classifier(classifier, 0, make_rng(0, RngStream.INIT))
    with pytest.raises(ShapeError, match='already extended'):
        extend_classifier(extended, 1, make_rng(0, RngStream.INIT))


def test_set_private_prototypes():
    classifier = extend_classifier(_small_model().classifier, 2, make_rng(0, RngStream.INIT))
    shared_before = classifier.shared_weight.copy()

    same = set_private_prototypes(classifier, classifier.private_weight.T)
    assert np.array_equal(same.weight, classifier.weight)

    protos = np.arange(8, dtype=float).reshape(2, 4) + 1
    updated = set_private_prototypes(classifier, protos)
    assert np.array_equal(updated.private_weight, protos.T)
    assert np.array_equal(updated.shared_weight, shared_before)

    with pytest.raises(ShapeError):
        set_private_prototypes(classifier, protos[:1])
    with pytest.raises(DegenerateVector):
        set_private_prototypes(classifier, [[0, 0, 0, 0], [1, 0, 0, 0]])


@pytest.mark.parametrize(
    argnames="momentum,expected",
    argvalues=[(1.0, 0.0), (0.0, 1.0), (0.9, 0.1)],
)
def test_ema_update(momentum, expected):
    live = _small_model()
    shadow = live.copy()
    for p in shadow.parameters():
        p[...] = 0.0
    for p in live.parameters():
        p[...] = 1.0
    ema_update(MomentumModel(shadow=shadow, momentum=momentum), live)
    for p in shadow.parameters():
        assert p == pytest.approx(np.full(p.shape, expected))


def test_ema_update_contracts_toward_live():
    live = _small_model(seed=1)
    shadow = _small_model(seed=2)
    before = [p.copy() for p in shadow.parameters()]
    ema_update(MomentumModel(shadow=shadow, momentum=0.7), live)
    for old, new, theta in zip(before, shadow.parameters(), live.parameters()):
        assert np.all(np.abs(new - theta) <= 0.7 * np.abs(old - theta) + 1e-12)


def test_ema_update_shape_mismatch():
    with pytest.raises(ShapeError):
        ema_update(MomentumModel.from_model(_small_model(n_shared=3), 0.9), _small_model(n_shared=4))


@pytest.mark.parametrize(
    argnames="theta,grad,lr,wd,expected",
    argvalues=[
        (1.0, 1.0, 0.0, 0.0, 1.0),
        (1.0, 1.0, 0.1, 0.0, 0.9),
        (1.0, 0.0, 1.0, 0.1, 0.9),
    ],
)
def test_sgd_step(theta, grad, lr, wd, expected):
    model = _small_model()
    for p in model.parameters():
        p[...] = theta
    sgd_step(model, [np.full(p.shape, grad) for p in model.parameters()], lr, wd)
    for p in model.parameters():
        assert p == pytest.approx(np.full(p.shape, expected))


def test_sgd_step_rejects_non_finite_gradient():
    model = _small_model()
    before = [p.copy() for p in model.parameters()]
    grads = [np.zeros(p.shape) for p in model.parameters()]
    grads[-1][0, 0] = np.nan
    with pytest.raises(NonFiniteGradient, match='contrastive') as error_info:
        sgd_step(model, grads, 0.1, 0.0, term="contrastive")
    assert error_info.value.term == "contrastive"
    for old, new in zip(before, model.parameters()):
        assert np.array_equal(old, new)


def test_cross_entropy_gradient_through_network(finite_difference, relative_error):
    rng = np.random.default_rng(5)
    for trial in range(10):
        model = _small_model(seed=trial)
        x = rng.normal(size=(6, 5))
        y = rng.integers(3, size=6)
        result = model.forward(x)
        _, dlogits = cross_entropy(result.logits, y)
        grads = model.backward(result, dlogits)

        def loss():
            return cross_entropy(model.forward(x).logits, y)[0]

        for param, grad in zip(model.parameters(), grads):
            assert relative_error(grad, finite_difference(loss, param)) <= 1e-4


def test_checkpoint_round_trip(tmp_path):
    model = _small_model()
    model.classifier = extend_classifier(model.classifier, 2, make_rng(0, RngStream.INIT))
    path = save_checkpoint(model, tmp_path / "model.ckpt")

    loaded = load_checkpoint(path, input_dim=5, hidden_widths=(6,), feature_dim=4)
    assert loaded.classifier.n_shared == 3
    assert loaded.classifier.n_private == 2
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert np.array_equal(a, b)
    assert checkpoint_bytes(loaded) == path.read_bytes()


def test_checkpoint_header_validation(tmp_path):
    path = save_checkpoint(_small_model(), tmp_path / "model.ckpt")

    with pytest.raises(CheckpointError, match='feature_dim'):
        load_checkpoint(path, feature_dim=8)
    with pytest.raises(CheckpointError, match='hidden_widths'):
        load_checkpoint(path, hidden_widths=(6, 6))

    truncated = tmp_path / "truncated.ckpt"
    truncated.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match='values'):
        load_checkpoint(truncated)

    wrong_magic = tmp_path / "wrong.ckpt"
    wrong_magic.write_bytes(struct.pack("<4sHHI", b"NOPE", 1, 1, 5))
    with pytest.raises(CheckpointError, match='not an xosda checkpoint'):
        load_checkpoint(wrong_magic)
