"""
Sample stores used during adaptation.

- `MemoryBank`: momentum-model features and predictions for a random subset of the target,
  the source of neighbours for pseudo-label refinement.
- `TemporalQueue`: each sample's most recent refined pseudo-labels; two samples whose
  histories overlap are never used as a negative pair.
- `KeyQueue`: recent momentum-model keys, the candidate negatives of the contrastive loss.
"""
import dataclasses
import logging
from typing import Iterable, Tuple

import numpy as np

from .config import ExclusionMode
from .errors import InsufficientSamples, InvalidLabel, ShapeError
from .model import MomentumModel
from .numerics import cosine_distance_matrix

log = logging.getLogger(__name__)


@dataclasses.dataclass
class MemoryBank:
    ids: np.ndarray
    features: np.ndarray
    """ (M, D) momentum-model features `z'` """
    probs: np.ndarray
    """ (M, C) momentum-model predictions `p'` """

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=int)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ShapeError("Memory bank sample ids must be distinct.")
        if not (len(self.ids) == len(self.features) == len(self.probs)):
            raise ShapeError(
                f"Memory bank got ({len(self.ids)}) ids, ({len(self.features)}) features "
                f"and ({len(self.probs)}) predictions."
            )
        # Rows are kept sorted by sample id; storage order never leaks into results.
        order = np.argsort(self.ids, kind="stable")
        self.ids = self.ids[order]
        self.features = np.array(self.features, dtype=float)[order]
        self.probs = np.array(self.probs, dtype=float)[order]

    @classmethod
    def create(cls, ids, features, probs, size: int, rng: np.random.Generator) -> 'MemoryBank':
        """ Bank of `size` entries drawn uniformly without replacement from the given samples. """
        ids = np.asarray(ids, dtype=int)
        if size > len(ids):
            raise InsufficientSamples(
                f"Memory bank size ({size}) is larger than the ({len(ids)}) available samples."
            )
        chosen = rng.choice(len(ids), size=size, replace=False)
        return cls(
            ids=ids[chosen],
            features=np.asarray(features)[chosen],
            probs=np.asarray(probs)[chosen],
        )

    @property
    def size(self) -> int:
        return len(self.ids)

    def __contains__(self, sample_id) -> bool:
        return bool(np.isin(sample_id, self.ids))

    def rows_for(self, sample_ids) -> Tuple[np.ndarray, np.ndarray]:
        """ `(mask, rows)`: which of `sample_ids` are members, and their bank rows. """
        sample_ids = np.asarray(sample_ids, dtype=int)
        if not self.size:
            return np.zeros(len(sample_ids), dtype=bool), np.zeros(0, dtype=int)
        pos = np.minimum(np.searchsorted(self.ids, sample_ids), self.size - 1)
        mask = self.ids[pos] == sample_ids
        return mask, pos[mask]

    def refresh(self, momentum_model: MomentumModel, sample_ids, weak_inputs) -> 'MemoryBank':
        """
        Overwrite the entries of the member samples with the momentum model's view of their
        (weakly augmented) inputs. Non-members are ignored; membership never changes.
        """
        mask, rows = self.rows_for(sample_ids)
        if not len(rows):
            return self
        result = momentum_model.forward(np.asarray(weak_inputs, dtype=float)[mask])
        self.features[rows] = result.z
        self.probs[rows] = result.p
        return self

    def neighbors_many(self, z, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        For every row of `z`, the `n` entries with the smallest cosine distance;
        ties go to the smaller sample id.

        Returns `(ids, probs)` of shapes (B, n) and (B, n, C).
        """
        if n > self.size:
            raise InsufficientSamples(f"Asked for ({n}) neighbours from a bank of ({self.size}).")
        distances = cosine_distance_matrix(np.atleast_2d(z), self.features)
        # Rows are sorted by id, so a stable sort breaks distance ties by id.
        nearest = np.argsort(distances, axis=1, kind="stable")[:, :n]
        return self.ids[nearest], self.probs[nearest]

    def neighbors(self, z, n: int) -> Tuple[np.ndarray, np.ndarray]:
        ids, probs = self.neighbors_many(np.asarray(z)[None, :], n)
        return ids[0], probs[0]


class TemporalQueue:
    """
    The last `depth` refined pseudo-labels of every target sample, with the epoch each
    label was recorded in. Empty slots hold -1; the newest label is the last column.
    """

    def __init__(self, n_samples: int, depth: int, n_classes: int):
        self.depth = depth
        self.n_classes = n_classes
        self.epoch = 0
        self.labels = np.full((n_samples, depth), -1, dtype=int)
        self.epochs = np.full((n_samples, depth), -1, dtype=int)

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    def _check_labels(self, labels: np.ndarray):
        bad = (labels < 0) | (labels >= self.n_classes)
        if np.any(bad):
            raise InvalidLabel(
                f"Pseudo-label ({labels[bad][0]}) outside [0, {self.n_classes})."
            )

    def push(self, sample_id: int, label: int) -> 'TemporalQueue':
        return self.push_many([sample_id], [label])

    def push_many(self, sample_ids, labels) -> 'TemporalQueue':
        sample_ids = np.asarray(sample_ids, dtype=int)
        labels = np.asarray(labels, dtype=int)
        self._check_labels(labels)
        if len(np.unique(sample_ids)) != len(sample_ids):
            # Fancy-index assignment would shift a repeated id only once.
            for sample_id, label in zip(sample_ids, labels):
                self.push_many([sample_id], [label])
            return self
        self.labels[sample_ids, :-1] = self.labels[sample_ids, 1:]
        self.labels[sample_ids, -1] = labels
        self.epochs[sample_ids, :-1] = self.epochs[sample_ids, 1:]
        self.epochs[sample_ids, -1] = self.epoch
        return self

    def advance_epoch(self):
        self.epoch += 1

    def history(self, sample_id: int) -> Tuple[int, ...]:
        if not 0 <= sample_id < self.n_samples:
            return ()
        return tuple(int(v) for v in self.labels[sample_id] if v >= 0)

    def shared_history_many(
            self, sample_id: int, other_ids, mode: ExclusionMode = ExclusionMode.INTERSECTION
    ) -> np.ndarray:
        """ `shared_history(sample_id, other)` for every id in `other_ids`. """
        other_ids = np.asarray(other_ids, dtype=int)
        result = np.zeros(len(other_ids), dtype=bool)
        if not 0 <= sample_id < self.n_samples:
            return result
        known = (other_ids >= 0) & (other_ids < self.n_samples)
        mine = self.labels[sample_id]
        theirs = self.labels[other_ids[known]]
        # (others, their slot, my slot)
        same = (theirs[:, :, None] == mine[None, None, :]) & (mine >= 0)[None, None, :]
        if mode is ExclusionMode.SAME_EPOCH:
            same &= self.epochs[other_ids[known]][:, :, None] == self.epochs[sample_id][None, None, :]
        result[known] = same.any(axis=(1, 2))
        return result

    def shared_history(
            self, id_a: int, id_b: int, mode: ExclusionMode = ExclusionMode.INTERSECTION
    ) -> bool:
        """
        True when the two samples had a common pseudo-label within the window.

        `INTERSECTION`: the label sets intersect. `SAME_EPOCH`: they had the same label in
        the same epoch. Unknown ids have an empty history.
        """
        return bool(self.shared_history_many(id_a, [id_b], mode)[0])


class KeyQueue:
    """ FIFO of the most recent `capacity` unit-length momentum keys and their sample ids. """

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.keys = np.zeros((0, dim))
        self.ids = np.zeros(0, dtype=int)

    def __len__(self):
        return len(self.ids)

    def enqueue(self, keys, sample_ids: Iterable[int]) -> 'KeyQueue':
        keys = np.atleast_2d(np.asarray(keys, dtype=float))
        sample_ids = np.asarray(sample_ids, dtype=int)
        if len(keys) != len(sample_ids):
            raise ShapeError(f"Got ({len(keys)}) keys for ({len(sample_ids)}) sample ids.")
        self.keys = np.concatenate([self.keys, keys])[-self.capacity:]
        self.ids = np.concatenate([self.ids, sample_ids])[-self.capacity:]
        return self
