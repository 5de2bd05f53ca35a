"""
End-to-end adaptation of a source model to an unlabelled target.

Per batch, in order: augment (one weak, two strong views), refine pseudo-labels from the
bank neighbours of the live model's weak-view features, estimate uncertainties and select
samples, compute the losses, take an SGD step (cosine-decayed learning rate), update the
momentum model, refresh the bank members of the batch, enqueue the batch's momentum keys
and record the refined labels in the temporal queue.
"""
import dataclasses
import logging
import math
import time
from typing import List, Optional

import numpy as np

from .bank import KeyQueue, MemoryBank, TemporalQueue
from .cluster_init import initialize_target
from .config import RunSettings
from .data import DatasetSplit, TargetView, input_scale, pretrain_source, strong_aug, weak_aug
from .errors import NumericalError
from .evaluation import (
    DiscoveryMetrics,
    OpenSetMetrics,
    discovery_metrics,
    metrics_to_dict,
    open_set_metrics,
)
from .losses import AdaptationBatch, LossBreakdown, total_loss_and_grads
from .model import Model, MomentumModel, build_model, ema_update, extend_classifier, sgd_step
from .numerics import RngStream, l2_normalize, make_rng
from .pseudo import label_batch, refine_many

log = logging.getLogger(__name__)


@dataclasses.dataclass
class EpochTrace:
    epoch: int
    l_cls: float
    l_ctr: float
    l_div: float
    total: float
    selection_rate: float
    mean_u_nc: float
    mean_u_cs: float
    n_excluded_pairs: int
    n_skipped: int
    pseudo_label_accuracy: Optional[float] = None
    # Mean u_nc of the selected and of the rejected samples; `None` for an empty group.
    mean_u_nc_selected: Optional[float] = None
    mean_u_nc_rejected: Optional[float] = None


@dataclasses.dataclass
class RunReport:
    config: dict
    trace: List[EpochTrace]
    n_shared: int
    n_private: int
    source_accuracy: Optional[float] = None
    """ Open-set accuracy of the raw extended source model's predictions. """
    initial_accuracy: Optional[float] = None
    """ Open-set accuracy of the clustering-initialised pseudo-labels. """
    source_only: Optional[OpenSetMetrics] = None
    metrics: Optional[OpenSetMetrics] = None
    discovery: Optional[DiscoveryMetrics] = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "n_shared": self.n_shared,
            "n_private": self.n_private,
            "source_accuracy": self.source_accuracy,
            "initial_accuracy": self.initial_accuracy,
            "source_only": None if self.source_only is None else metrics_to_dict(self.source_only),
            "metrics": None if self.metrics is None else metrics_to_dict(self.metrics, self.discovery),
            "trace": [dataclasses.asdict(t) for t in self.trace],
            "wall_clock": self.wall_clock,
        }


@dataclasses.dataclass
class AdaptationResult:
    model: Model
    report: RunReport


def open_set_label_accuracy(labels, truth, n_shared: int) -> float:
    """
    Share of correct pseudo-labels, where any private label on a private-class sample
    counts as correct.
    """
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    if not len(truth):
        return 0.0
    correct = np.where(truth < n_shared, labels == truth, labels >= n_shared)
    return float(np.mean(correct))


def train_source_model(source: DatasetSplit, settings: RunSettings = None) -> Model:
    """ Builds a fresh network for `source` and pretrains it with the run's seed. """
    settings = settings or RunSettings.grab()
    model = build_model(
        source.input_dim,
        settings.hidden_widths,
        settings.feature_dim,
        source.n_shared,
        make_rng(settings.seed, RngStream.INIT),
    )
    return pretrain_source(
        model,
        source,
        settings.source_epochs,
        settings.source_lr,
        make_rng(settings.seed, RngStream.SHUFFLE),
        batch_size=settings.batch_size,
    )


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def run_adaptation(
        source_model: Model,
        target: TargetView,
        truth=None,
        settings: RunSettings = None,
) -> AdaptationResult:
    """
    Adapts a copy of `source_model` to `target`.

    `truth` (ground-truth target classes) is only used for the report: the per-epoch
    pseudo-label accuracy and the final metrics. Nothing on the adaptation path reads it.
    """
    settings = settings or RunSettings.grab()
    settings.settings__validate()
    started = time.perf_counter()
    seed = settings.seed
    rng = {stream: make_rng(seed, stream) for stream in RngStream}

    inputs = np.asarray(target.inputs, dtype=float)
    n_samples = len(inputs)
    n_shared = source_model.classifier.n_shared
    n_private = settings.resolved_n_private(n_shared)
    n_classes = n_shared + n_private
    truth = None if truth is None else np.asarray(truth, dtype=int)

    live = source_model.copy()
    source_pass = live.forward(inputs)
    source_features = source_pass.z
    source_only = None if truth is None else open_set_metrics(
        source_pass.p.argmax(axis=1), truth, n_shared
    )

    if n_private:
        live.classifier = extend_classifier(live.classifier, n_private, rng[RngStream.INIT])
    source_labels = (source_features @ live.classifier.weight).argmax(axis=1)

    init = initialize_target(live.classifier, source_features, rng[RngStream.CLUSTERING], settings)
    live.classifier = init.classifier
    momentum = MomentumModel.from_model(live, settings.momentum)

    bank = MemoryBank.create(
        np.arange(n_samples), init.features, init.probs, min(settings.bank_size, n_samples), rng[RngStream.BANK]
    )
    temporal = TemporalQueue(n_samples, settings.history_depth, n_classes)
    temporal.push_many(np.arange(n_samples), init.labels)
    temporal.advance_epoch()

    scale = input_scale(inputs)
    weak_sigma = settings.weak_noise * scale
    strong_sigma = settings.strong_noise * scale
    augment = rng[RngStream.AUGMENT]

    keys = KeyQueue(settings.key_queue_size, live.extractor.output_dim)
    seed_ids = np.sort(rng[RngStream.NEGATIVE_KEYS].choice(
        n_samples, size=min(settings.key_queue_size, n_samples), replace=False
    ))
    seed_view = strong_aug(inputs[seed_ids], augment, strong_sigma, settings.mask_prob)
    keys.enqueue(l2_normalize(momentum.forward(seed_view).z), seed_ids)

    report = RunReport(
        config=settings.settings__snapshot(),
        trace=[],
        n_shared=n_shared,
        n_private=n_private,
        source_only=source_only,
    )
    if truth is not None:
        report.source_accuracy = open_set_label_accuracy(source_labels, truth, n_shared)
        report.initial_accuracy = open_set_label_accuracy(init.labels, truth, n_shared)
        log.info(
            "Pseudo-label accuracy: raw source %.4f, after cluster init %.4f.",
            report.source_accuracy, report.initial_accuracy,
        )

    train = settings.gamma_cls or settings.gamma_ctr or settings.gamma_div
    if not train:
        log.warning("Every loss weight is 0; the live model will not be updated.")

    batch_size = settings.batch_size
    total_steps = settings.adapt_epochs * math.ceil(n_samples / batch_size)
    step = 0
    for epoch in range(1, settings.adapt_epochs + 1):
        order = rng[RngStream.SHUFFLE].permutation(n_samples)
        epoch_labels = np.zeros(n_samples, dtype=int)
        breakdowns: List[LossBreakdown] = []
        u_nc, u_cs, selected = [], [], []
        for batch_no, start in enumerate(range(0, n_samples, batch_size)):
            ids = np.sort(order[start:start + batch_size])
            try:
                breakdown, records = _adapt_batch(
                    live, momentum, bank, keys, temporal, inputs, ids, rng, augment,
                    weak_sigma=weak_sigma,
                    strong_sigma=strong_sigma,
                    lr=cosine_lr(settings.lr, step, total_steps),
                    train=bool(train),
                    settings=settings,
                )
            except NumericalError as e:
                log.error("Adaptation failed at epoch (%s), batch (%s): %s", epoch, batch_no, e)
                e.add_note(f"While adapting: epoch {epoch}, batch {batch_no}.")
                raise
            step += 1
            breakdowns.append(breakdown)
            for r in records:
                epoch_labels[r.sample_id] = r.y_bar
                u_nc.append(r.u_nc)
                u_cs.append(r.u_cs)
                selected.append(r.selected)
        temporal.advance_epoch()

        trace = EpochTrace(
            epoch=epoch,
            l_cls=float(np.mean([b.l_cls for b in breakdowns])),
            l_ctr=float(np.mean([b.l_ctr for b in breakdowns])),
            l_div=float(np.mean([b.l_div for b in breakdowns])),
            total=float(np.mean([b.total for b in breakdowns])),
            selection_rate=float(np.mean(selected)),
            mean_u_nc=float(np.mean(u_nc)),
            mean_u_cs=float(np.mean(u_cs)),
            n_excluded_pairs=int(sum(b.n_excluded_pairs for b in breakdowns)),
            n_skipped=int(sum(b.n_skipped for b in breakdowns)),
        )
        u_nc, selected = np.asarray(u_nc), np.asarray(selected, dtype=bool)
        if selected.any():
            trace.mean_u_nc_selected = float(u_nc[selected].mean())
        if not selected.all():
            trace.mean_u_nc_rejected = float(u_nc[~selected].mean())
        if truth is not None:
            trace.pseudo_label_accuracy = open_set_label_accuracy(epoch_labels, truth, n_shared)
        report.trace.append(trace)
        log.info(
            "Epoch %s/%s: loss %.4f (cls %.4f, ctr %.4f, div %.4f), selected %.3f, pseudo-label acc %s",
            epoch, settings.adapt_epochs, trace.total, trace.l_cls, trace.l_ctr, trace.l_div,
            trace.selection_rate,
            "n/a" if trace.pseudo_label_accuracy is None else f"{trace.pseudo_label_accuracy:.4f}",
        )

    if truth is not None:
        final = live.forward(inputs)
        predictions = final.p.argmax(axis=1)
        report.metrics = open_set_metrics(predictions, truth, n_shared)
        report.discovery = discovery_metrics(
            predictions,
            truth,
            n_shared,
            n_private,
            mode=settings.discovery_matching,
            features=final.z,
        )
        log.info(
            "Final: OS* %.2f, UNK %.2f, HOS %.2f", report.metrics.os_star, report.metrics.unk, report.metrics.hos
        )
    report.wall_clock = time.perf_counter() - started
    return AdaptationResult(model=live, report=report)


def _adapt_batch(
        live: Model,
        momentum: MomentumModel,
        bank: MemoryBank,
        keys: KeyQueue,
        temporal: TemporalQueue,
        inputs: np.ndarray,
        ids: np.ndarray,
        rng,
        augment: np.random.Generator,
        *,
        weak_sigma: float,
        strong_sigma: float,
        lr: float,
        train: bool,
        settings: RunSettings,
):
    x = inputs[ids]
    weak = weak_aug(x, augment, weak_sigma)
    query_view = strong_aug(x, augment, strong_sigma, settings.mask_prob)
    key_view = strong_aug(x, augment, strong_sigma, settings.mask_prob)

    z_weak = live.forward(weak).z
    p_bar, _ = refine_many(bank, z_weak, settings.n_neighbours)
    records = label_batch(ids, p_bar, z_weak, live.classifier.weight, rng[RngStream.SELECTION], settings)
    y_bar = np.array([r.y_bar for r in records])

    batch = AdaptationBatch(
        ids=ids,
        query_inputs=query_view,
        key_inputs=key_view,
        y_bar=y_bar,
        selected=np.array([r.selected for r in records]),
    )
    breakdown, grads, batch_keys = total_loss_and_grads(
        live, momentum, batch, keys, temporal,
        cls_rng=rng[RngStream.COMPLEMENTARY_LABELS],
        ctr_rng=rng[RngStream.NEGATIVE_KEYS],
        settings=settings,
    )
    if train:
        sgd_step(live, grads, lr, settings.weight_decay)
        ema_update(momentum, live)
    bank.refresh(momentum, ids, weak)
    keys.enqueue(batch_keys, ids)
    temporal.push_many(ids, y_bar)
    return breakdown, records
