"""
The trainable network: a small dense feature extractor followed by a bias-free linear
classifier whose columns double as class prototypes.

Everything here works on batches (rows are samples) and backpropagates by hand; gradients
are returned as a list of arrays in the same order as `Model.parameters()`.
"""
import copy
import dataclasses
import enum
import logging
import struct
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import (
    CheckpointError,
    DegenerateVector,
    InvalidClassCount,
    NonFiniteGradient,
    ShapeError,
)
from .numerics import softmax_temp

log = logging.getLogger(__name__)


class Activation(enum.IntEnum):
    IDENTITY = 0
    TANH = 1

    def apply(self, h: np.ndarray) -> np.ndarray:
        return np.tanh(h) if self is Activation.TANH else h

    def derivative_from_output(self, a: np.ndarray) -> np.ndarray:
        return 1.0 - a * a if self is Activation.TANH else np.ones_like(a)


@dataclasses.dataclass
class Layer:
    weight: np.ndarray
    """ (out, in) """
    bias: np.ndarray
    activation: Activation = Activation.TANH

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclasses.dataclass
class FeatureExtractor:
    layers: List[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray):
        """ Returns `(z, outputs)`; `outputs[i]` is the input of layer `i`, the last one is `z`. """
        outputs = [x]
        for layer in self.layers:
            outputs.append(layer.activation.apply(outputs[-1] @ layer.weight.T + layer.bias))
        return outputs[-1], outputs

    def backward(self, outputs: List[np.ndarray], dz: np.ndarray) -> List[np.ndarray]:
        grads = []
        upstream = dz
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            dh = upstream * layer.activation.derivative_from_output(outputs[i + 1])
            grads.append(dh.sum(axis=0))
            grads.append(dh.T @ outputs[i])
            upstream = dh @ layer.weight
        grads.reverse()
        return grads


@dataclasses.dataclass
class Classifier:
    weight: np.ndarray
    """ (D, C); the first `n_shared` columns are the source classes. """
    n_shared: int

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    @property
    def n_private(self) -> int:
        return self.n_classes - self.n_shared

    @property
    def shared_weight(self) -> np.ndarray:
        return self.weight[:, :self.n_shared]

    @property
    def private_weight(self) -> np.ndarray:
        return self.weight[:, self.n_shared:]


@dataclasses.dataclass
class ForwardResult:
    z: np.ndarray
    logits: np.ndarray
    p: np.ndarray
    outputs: List[np.ndarray] = dataclasses.field(repr=False, default_factory=list)
    """ Per-layer activations kept for `Model.backward`; always 2-D. """


@dataclasses.dataclass
class Model:
    extractor: FeatureExtractor
    classifier: Classifier

    def parameters(self) -> List[np.ndarray]:
        """ Every trainable array, in declaration order: `W, b` per layer, then the classifier. """
        params = []
        for layer in self.extractor.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        params.append(self.classifier.weight)
        return params

    def forward(self, x) -> ForwardResult:
        """
        `z = phi(x)`, `logits = W_T^T z`, `p = softmax(logits)`.

        Accepts one sample or a batch; one-dimensional input gives one-dimensional results.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        batch = np.atleast_2d(x)
        if batch.shape[-1] != self.extractor.input_dim:
            raise ShapeError(
                f"Input has dimension ({batch.shape[-1]}), "
                f"model expects ({self.extractor.input_dim})."
            )
        z, outputs = self.extractor.forward(batch)
        logits = z @ self.classifier.weight
        p = softmax_temp(logits)
        if single:
            return ForwardResult(z=z[0], logits=logits[0], p=p[0], outputs=outputs)
        return ForwardResult(z=z, logits=logits, p=p, outputs=outputs)

    def backward(
            self, result: ForwardResult, dlogits: np.ndarray, dz: np.ndarray = None
    ) -> List[np.ndarray]:
        """
        Gradients for every parameter, given the loss gradient w.r.t. the logits and
        (optionally) an extra gradient arriving directly at the features `z`.
        """
        z = result.outputs[-1]
        dlogits = np.atleast_2d(dlogits)
        d_classifier = z.T @ dlogits
        d_features = dlogits @ self.classifier.weight.T
        if dz is not None:
            d_features = d_features + np.atleast_2d(dz)
        grads = self.extractor.backward(result.outputs, d_features)
        grads.append(d_classifier)
        return grads

    def copy(self) -> 'Model':
        return copy.deepcopy(self)

    def shapes(self):
        return [p.shape for p in self.parameters()]


@dataclasses.dataclass
class MomentumModel:
    """ Slowly moving EMA copy of the live model; never trained directly. """
    shadow: Model
    momentum: float

    @classmethod
    def from_model(cls, live: Model, momentum: float) -> 'MomentumModel':
        return cls(shadow=live.copy(), momentum=momentum)

    def forward(self, x) -> ForwardResult:
        return self.shadow.forward(x)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def build_model(
        input_dim: int,
        hidden_widths: Sequence[int],
        feature_dim: int,
        n_shared: int,
        rng: np.random.Generator,
) -> Model:
    """
    Dense tanh network `input_dim -> hidden_widths... -> feature_dim` plus a classifier with
    `n_shared` columns. Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    if n_shared < 1:
        raise InvalidClassCount(f"Need at least one source class, got ({n_shared}).")
    layers = []
    fan_in = input_dim
    for width in (*hidden_widths, feature_dim):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(Layer(
            weight=_uniform(rng, bound, (width, fan_in)),
            bias=_uniform(rng, bound, (width,)),
            activation=Activation.TANH,
        ))
        fan_in = width
    classifier = Classifier(
        weight=_uniform(rng, 1.0 / np.sqrt(feature_dim), (feature_dim, n_shared)),
        n_shared=n_shared,
    )
    return Model(extractor=FeatureExtractor(layers), classifier=classifier)


def extend_classifier(classifier: Classifier, n_private: int, rng: np.random.Generator) -> Classifier:
    """ Appends `n_private` columns drawn from U(-1/sqrt(D), 1/sqrt(D)); `W_S` is copied as-is. """
    if n_private < 1:
        raise InvalidClassCount(f"Number of private classes must be >= 1, got ({n_private}).")
    if classifier.n_private:
        raise ShapeError(
            f"Classifier is already extended ({classifier.n_private} private columns)."
        )
    dim = classifier.weight.shape[0]
    new_columns = _uniform(rng, 1.0 / np.sqrt(dim), (dim, n_private))
    return Classifier(
        weight=np.concatenate([classifier.weight, new_columns], axis=1),
        n_shared=classifier.n_shared,
    )


def set_private_prototypes(classifier: Classifier, prototypes) -> Classifier:
    prototypes = np.asarray(prototypes, dtype=float).reshape(-1, classifier.weight.shape[0])
    if len(prototypes) != classifier.n_private:
        raise ShapeError(
            f"Got ({len(prototypes)}) prototypes for ({classifier.n_private}) private columns."
        )
    if np.any(np.linalg.norm(prototypes, axis=1) == 0.0):
        raise DegenerateVector("Private prototypes must be non-zero vectors.")
    weight = classifier.weight.copy()
    weight[:, classifier.n_shared:] = prototypes.T
    return Classifier(weight=weight, n_shared=classifier.n_shared)


def _check_same_shapes(a: Model, b: Model):
    if a.shapes() != b.shapes():
        raise ShapeError(f"Parameter shapes differ: ({a.shapes()}) vs ({b.shapes()}).")


def ema_update(momentum_model: MomentumModel, live: Model) -> MomentumModel:
    """ In place: every shadow parameter moves to `m * shadow + (1 - m) * live`. """
    _check_same_shapes(momentum_model.shadow, live)
    m = momentum_model.momentum
    for shadow, theta in zip(momentum_model.shadow.parameters(), live.parameters()):
        shadow *= m
        shadow += (1.0 - m) * theta
    return momentum_model


def sgd_step(
        model: Model,
        grads: List[np.ndarray],
        lr: float,
        weight_decay: float,
        *,
        term: Optional[str] = None,
) -> Model:
    """
    In place: `theta <- theta - lr * (g + weight_decay * theta)`.

    Nothing is updated if any gradient is non-finite; `NonFiniteGradient` names `term`.
    """
    params = model.parameters()
    if len(grads) != len(params):
        raise ShapeError(f"Got ({len(grads)}) gradients for ({len(params)}) parameters.")
    for i, (param, grad) in enumerate(zip(params, grads)):
        if param.shape != grad.shape:
            raise ShapeError(
                f"Gradient {i} has shape ({grad.shape}), parameter has ({param.shape})."
            )
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(f"Non-finite gradient for parameter {i}", term=term or "total")
    for param, grad in zip(params, grads):
        param -= lr * (grad + weight_decay * param)
    return model


# Checkpoint file, little-endian:
#   magic "XOSD", u16 version, u16 layer count, u32 input dim,
#   per layer: u32 output dim, u8 activation code,
#   u32 n_shared, u32 n_private,
#   then every parameter of `Model.parameters()` as row-major float64.
CHECKPOINT_MAGIC = b"XOSD"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHHI")
_LAYER = struct.Struct("<IB")
_CLASSES = struct.Struct("<II")


def checkpoint_bytes(model: Model) -> bytes:
    layers = model.extractor.layers
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(layers), model.extractor.input_dim)]
    for layer in layers:
        parts.append(_LAYER.pack(layer.out_dim, int(layer.activation)))
    parts.append(_CLASSES.pack(model.classifier.n_shared, model.classifier.n_private))
    for param in model.parameters():
        parts.append(np.ascontiguousarray(param, dtype='<f8').tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    log.debug("Wrote checkpoint (%s)", path)
    return path


def _read(data: bytes, offset: int, fmt: struct.Struct, path):
    if offset + fmt.size > len(data):
        raise CheckpointError(f"Checkpoint ({path}) is truncated.")
    return fmt.unpack_from(data, offset), offset + fmt.size


def load_checkpoint(
        path,
        *,
        input_dim: int = None,
        hidden_widths: Sequence[int] = None,
        feature_dim: int = None,
) -> Model:
    """
    Reads a model written by `save_checkpoint`.

    The optional arguments are validated against the stored architecture; any mismatch,
    a wrong magic/version or a truncated file raises `CheckpointError`.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Unable to read checkpoint ({path}): {e}") from e

    (magic, version, n_layers, stored_input), offset = _read(data, 0, _HEADER, path)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"File ({path}) is not an xosda checkpoint.")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Checkpoint ({path}) has unsupported version ({version}).")

    widths, activations = [], []
    for _ in range(n_layers):
        (width, code), offset = _read(data, offset, _LAYER, path)
        try:
            activations.append(Activation(code))
        except ValueError:
            raise CheckpointError(f"Checkpoint ({path}) has unknown activation code ({code}).")
        widths.append(width)
    (n_shared, n_private), offset = _read(data, offset, _CLASSES, path)

    if n_layers < 1:
        raise CheckpointError(f"Checkpoint ({path}) has no layers.")
    expected = {
        "input_dim": (input_dim, stored_input),
        "hidden_widths": (None if hidden_widths is None else tuple(hidden_widths), tuple(widths[:-1])),
        "feature_dim": (feature_dim, widths[-1]),
    }
    for name, (wanted, stored) in expected.items():
        if wanted is not None and wanted != stored:
            raise CheckpointError(
                f"Checkpoint ({path}) has {name} ({stored}) but config has ({wanted})."
            )

    shapes = []
    fan_in = stored_input
    for width in widths:
        shapes.extend([(width, fan_in), (width,)])
        fan_in = width
    shapes.append((fan_in, n_shared + n_private))

    n_values = sum(int(np.prod(s)) for s in shapes)
    if len(data) - offset != n_values * 8:
        raise CheckpointError(
            f"Checkpoint ({path}) holds ({(len(data) - offset) // 8}) values, "
            f"architecture needs ({n_values})."
        )
    values = np.frombuffer(data, dtype='<f8', offset=offset).astype(float)
    arrays = []
    start = 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(values[start:start + size].reshape(shape).copy())
        start += size

    layers = [
        Layer(weight=arrays[2 * i], bias=arrays[2 * i + 1], activation=activations[i])
        for i in range(n_layers)
    ]
    return Model(
        extractor=FeatureExtractor(layers),
        classifier=Classifier(weight=arrays[-1], n_shared=n_shared),
    )
