"""
Datasets: the synthetic domain-shift benchmark, the feature CSV format, feature-space
augmentations and source-model pretraining.

Feature CSV: ASCII, one header line `label,f0,f1,...,f{d-1}`, then one row per sample with
an integer label (-1 for an unlabelled sample) followed by `d` decimal values; rows end with
`\\n`, no quoting.
"""
import csv
import dataclasses
import enum
import logging
from pathlib import Path
from typing import Tuple

import numpy as np

from .config import SynthSettings
from .errors import DataError, InvalidConfig, NonFiniteLoss, ParseError, ShapeError
from .losses import cross_entropy
from .model import Model, sgd_step
from .numerics import RngStream, make_rng

log = logging.getLogger(__name__)

UNLABELLED = -1


class SplitRole(enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclasses.dataclass(frozen=True)
class TargetView:
    """ What adaptation is allowed to see of a target split: the inputs, nothing else. """
    inputs: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.inputs)


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    inputs: np.ndarray
    labels: np.ndarray
    """ Class per sample; `UNLABELLED` (-1) where withheld. """
    role: SplitRole
    n_shared: int
    n_private: int = 0

    @property
    def n_samples(self) -> int:
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def has_labels(self) -> bool:
        return bool(self.n_samples) and bool(np.all(self.labels != UNLABELLED))

    def unlabelled(self) -> TargetView:
        return TargetView(inputs=self.inputs)


def _rotation(dim: int, angle_deg: float, rng: np.random.Generator) -> np.ndarray:
    """ Rotation by `angle_deg` inside a random 2-plane of R^dim. """
    basis, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    u, v = basis[:, 0], basis[:, 1]
    theta = np.deg2rad(angle_deg)
    return (
        np.eye(dim)
        + (np.cos(theta) - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + np.sin(theta) * (np.outer(v, u) - np.outer(u, v))
    )


def _check_synth(settings: SynthSettings):
    if settings.jitter_low > settings.jitter_high:
        raise InvalidConfig(
            f"jitter_low ({settings.jitter_low}) must not exceed jitter_high ({settings.jitter_high})."
        )


def generate_synthetic(settings: SynthSettings = None) -> Tuple[DatasetSplit, DatasetSplit]:
    """
    Gaussian class clouds around centres on a sphere of radius `center_scale`.

    The source holds the shared classes only. The target holds every class, each class
    centre scaled by a jitter from U(jitter_low, jitter_high), and every target point is then
    rotated in a random 2-plane and translated by `translation * center_scale`.
    Both splits are shuffled; the target keeps its ground truth for evaluation.
    """
    settings = settings or SynthSettings.grab()
    settings.settings__validate()
    _check_synth(settings)
    rng = make_rng(settings.seed, RngStream.DATA)

    n_shared, n_private = settings.n_shared, settings.n_private
    n_classes = n_shared + n_private
    dim, per_class, spread = settings.input_dim, settings.samples_per_class, settings.within_std

    directions = rng.normal(size=(n_classes, dim))
    centers = settings.center_scale * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
    if np.any(gaps[~np.eye(n_classes, dtype=bool)] < 1e-9):
        raise InvalidConfig("Synthetic class centres are not pairwise distinct.")

    rotation = _rotation(dim, settings.rotation_deg, rng)
    offset = rng.normal(size=dim)
    offset *= settings.translation * settings.center_scale / np.linalg.norm(offset)
    jitter = rng.uniform(settings.jitter_low, settings.jitter_high, size=n_classes)

    source_labels = np.repeat(np.arange(n_shared), per_class)
    source_inputs = centers[source_labels] + spread * rng.normal(size=(len(source_labels), dim))

    target_labels = np.repeat(np.arange(n_classes), per_class)
    target_inputs = (jitter[target_labels, None] * centers[target_labels]
                     + spread * rng.normal(size=(len(target_labels), dim)))
    target_inputs = target_inputs @ rotation.T + offset

    source_order = rng.permutation(len(source_labels))
    target_order = rng.permutation(len(target_labels))
    source = DatasetSplit(
        inputs=source_inputs[source_order],
        labels=source_labels[source_order],
        role=SplitRole.SOURCE,
        n_shared=n_shared,
    )
    target = DatasetSplit(
        inputs=target_inputs[target_order],
        labels=target_labels[target_order],
        role=SplitRole.TARGET,
        n_shared=n_shared,
        n_private=n_private,
    )
    log.info(
        "Generated synthetic splits: %s source / %s target samples, %s shared + %s private classes.",
        source.n_samples, target.n_samples, n_shared, n_private,
    )
    return source, target


def input_scale(inputs: np.ndarray) -> float:
    """ Standard deviation of every input value; augmentation noise is relative to it. """
    scale = float(np.std(inputs)) if np.size(inputs) else 0.0
    return scale if scale > 0 else 1.0


def weak_aug(x, rng: np.random.Generator, sigma: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x + rng.normal(0.0, sigma, size=x.shape)


def strong_aug(x, rng: np.random.Generator, sigma: float, mask_prob: float) -> np.ndarray:
    """ Gaussian noise, then every coordinate zeroed with probability `mask_prob`. """
    noisy = weak_aug(x, rng, sigma)
    keep = rng.random(noisy.shape) >= mask_prob
    return noisy * keep


def pretrain_source(
        model: Model,
        source: DatasetSplit,
        epochs: int,
        lr: float,
        rng: np.random.Generator,
        *,
        batch_size: int = 64,
        weight_decay: float = 0.0,
) -> Model:
    """
    Minibatch SGD on the mean cross-entropy of the labelled source split.

    Trains and returns a copy; the classifier must have exactly one column per source class.
    """
    labels = np.asarray(source.labels, dtype=int)
    if source.n_samples and (labels.min() < 0 or labels.max() >= source.n_shared):
        raise DataError(
            f"Source labels must lie in [0, {source.n_shared}); "
            f"got range [{labels.min()}, {labels.max()}]."
        )
    if model.classifier.n_classes != source.n_shared:
        raise DataError(
            f"Source model has ({model.classifier.n_classes}) classes, "
            f"source data has ({source.n_shared})."
        )
    model = model.copy()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(source.n_samples)
        epoch_loss = 0.0
        for start in range(0, source.n_samples, batch_size):
            idx = order[start:start + batch_size]
            result = model.forward(source.inputs[idx])
            loss, dlogits = cross_entropy(result.logits, labels[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(
                    f"Cross-entropy became ({loss}) at source epoch ({epoch}), batch start ({start})."
                )
            sgd_step(model, model.backward(result, dlogits), lr, weight_decay, term="cross_entropy")
            epoch_loss += loss * len(idx)
        if epoch == epochs or epoch % 50 == 0:
            log.info("Source epoch %s/%s: cross-entropy %.4f", epoch, epochs, epoch_loss / source.n_samples)
    return model


def accuracy(model: Model, split: DatasetSplit) -> float:
    if not split.n_samples:
        return 0.0
    return float(np.mean(model.forward(split.inputs).p.argmax(axis=1) == split.labels))


def write_features(split: DatasetSplit, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="ascii") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["label"] + [f"f{i}" for i in range(split.inputs.shape[1])])
        for label, row in zip(split.labels, split.inputs):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])
    return path


def load_features(
        path,
        *,
        role: SplitRole = None,
        n_shared: int = None,
        input_dim: int = None,
) -> DatasetSplit:
    """
    Reads a feature CSV.

    Without `role`, a file with any unlabelled row is a target split, otherwise a source split.
    `n_shared` defaults to one more than the largest label of a source split; a target split
    needs it. A row with the wrong number of columns or a bad value raises `ParseError` naming
    the line; a file whose dimension differs from `input_dim` raises `ShapeError`.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="ascii") as f:
            rows = list(csv.reader(f))
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"Unable to read features ({path}): {e}") from e

    if not rows:
        raise ParseError("Missing header", path=path, line=1)
    header = rows[0]
    dim = len(header) - 1
    if header[0] != "label" or header[1:] != [f"f{i}" for i in range(dim)]:
        raise ParseError("Header must be `label,f0,f1,...`", path=path, line=1)
    if input_dim is not None and dim != input_dim:
        raise ShapeError(f"Features in ({path}) have dimension ({dim}), expected ({input_dim}).")

    labels = np.empty(len(rows) - 1, dtype=int)
    inputs = np.empty((len(rows) - 1, dim))
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != dim + 1:
            raise ParseError(f"Expected ({dim + 1}) columns, got ({len(row)})", path=path, line=line)
        try:
            labels[i] = int(row[0])
            inputs[i] = [float(v) for v in row[1:]]
        except ValueError as e:
            raise ParseError(str(e), path=path, line=line) from e
        if labels[i] < UNLABELLED:
            raise ParseError(f"Invalid label ({labels[i]})", path=path, line=line)
        if not np.all(np.isfinite(inputs[i])):
            raise ParseError("Non-finite feature value", path=path, line=line)

    if role is None:
        role = SplitRole.TARGET if np.any(labels == UNLABELLED) else SplitRole.SOURCE
    known = labels[labels != UNLABELLED]
    n_classes = int(known.max()) + 1 if len(known) else 0
    if n_shared is None:
        if role is SplitRole.TARGET:
            raise DataError(f"Loading target features ({path}) needs the number of shared classes.")
        n_shared = n_classes
    if role is SplitRole.SOURCE and n_classes > n_shared:
        raise DataError(f"Source features ({path}) have labels >= n_shared ({n_shared}).")

    return DatasetSplit(
        inputs=inputs,
        labels=labels,
        role=role,
        n_shared=n_shared,
        n_private=max(n_classes - n_shared, 0) if role is SplitRole.TARGET else 0,
    )
