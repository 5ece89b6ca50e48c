"""End-to-end controllers: the prune/perturb/train/evaluate round, full
iterative pruning sweeps, the distillation sweep, the entropy-gated
early-stop controller, phase labeling, and training-cost accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import check_finite
from .datasets import Dataset, AugmentSpec, augment, normalize
from .distill import kd_loss, teacher_predict
from .entropy import model_entropy
from .layers import loss_cross_entropy
from .models import Model, copy_params, forward, load_params
from .optim import LrSchedule, SgdState, lr_at_epoch, masked_sgd_step, zero_grads
from .pruning import (
    PruneConfig,
    Snapshot,
    advance_sparsity,
    apply_prune,
    new_masks,
    perturb,
    sparsity_of,
)

BACKWARD_COST_FACTOR = 2  # backward pass costed at 2x the forward pass


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    schedule: LrSchedule
    momentum: float = 0.9
    weight_decay: float = 0.0
    l1_penalty: float = 0.0


@dataclass
class RunRecord:
    round: int
    sparsity: float
    train_acc: float
    val_acc: float
    test_acc: float
    entropy_avg: float
    flops_cumulative: int


@dataclass
class SweepResult:
    records: list[RunRecord]
    best_round: int
    best_params: dict[str, np.ndarray]
    best_bn_state: dict
    best_masks: dict[str, np.ndarray]
    gate_round: int | None = None  # early-stop controller only


@dataclass
class EarlyStopConfig:
    entropy_threshold: float  # T_E, relative to the dense entropy
    accuracy_threshold: float  # T_A, relative to the best seen accuracy
    max_rounds: int = 31  # rounds to pass 99.9% sparsity at zeta=0.2

    def __post_init__(self):
        if not 0 < self.entropy_threshold < 1:
            raise ValueError("entropy_threshold must be in (0, 1)")
        if not 0 < self.accuracy_threshold < 1:
            raise ValueError("accuracy_threshold must be in (0, 1)")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass
class PhaseLabel:
    labels: list[str]
    margin: float


@dataclass
class DataBundle:
    train: Dataset
    val: Dataset
    test: Dataset
    augment_spec: AugmentSpec = field(default_factory=AugmentSpec)


@dataclass
class SeedStreams:
    """Deterministic per-purpose random streams for one run."""

    shuffle: np.random.Generator
    augment: np.random.Generator
    reinit_base: int = 0

    def reinit_rng(self, round_index: int) -> np.random.Generator:
        return np.random.default_rng([self.reinit_base, round_index])


class CrossEntropyObjective:
    def loss(self, student_logits, labels, batch_images):
        return loss_cross_entropy(student_logits, labels)


class KdObjective:
    """Distillation objective; the teacher sees the same augmented batch."""

    def __init__(self, teacher: Model, alpha: float, tau: float):
        self.teacher = teacher
        self.alpha = alpha
        self.tau = tau

    def loss(self, student_logits, labels, batch_images):
        if self.alpha == 0:
            return loss_cross_entropy(student_logits, labels)
        t_logits = teacher_predict(self.teacher, batch_images)
        return kd_loss(student_logits, t_logits, labels, self.alpha, self.tau)


def train_model(model: Model, masks: dict, train_set: Dataset, cfg: TrainConfig,
                objective, streams: SeedStreams, aug_spec: AugmentSpec,
                snapshot_at: int | None = None) -> Snapshot | None:
    """SGD training for cfg.epochs; optionally captures a rewind snapshot
    after `snapshot_at` optimizer steps (0 = before the first step)."""
    state = SgdState(model.params, cfg.momentum, cfg.weight_decay, cfg.l1_penalty)
    snap = None
    step = 0
    if snapshot_at is not None and snapshot_at == 0:
        snap = Snapshot(params=copy_params(model), step=0)
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg.schedule, epoch)
        order = streams.shuffle.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = augment(train_set.images[idx], aug_spec, streams.augment)
            logits = forward(model, x, mode="train")
            loss = objective.loss(logits, train_set.labels[idx], x)
            check_finite(loss.data, "training loss")
            zero_grads(model.params)
            loss.backward()
            masked_sgd_step(model.params, masks, state, lr)
            step += 1
            if snapshot_at is not None and step == snapshot_at:
                snap = Snapshot(params=copy_params(model), step=step)
    return snap


def evaluate(model: Model, dataset: Dataset, aug_spec: AugmentSpec,
             batch_size: int = 512) -> float:
    """Top-1 accuracy in eval mode (normalization only, no augmentation)."""
    hits = 0
    for start in range(0, len(dataset), batch_size):
        x = normalize(dataset.images[start:start + batch_size], aug_spec)
        logits = forward(model, x, mode="eval").data
        hits += int((logits.argmax(axis=1) == dataset.labels[start:start + batch_size]).sum())
    return hits / len(dataset)


def training_flops(model: Model, epochs: int, n_samples: int, batch_size: int,
                   input_hw: tuple[int, int] | None = None) -> int:
    """Training cost estimate: per-sample forward FLOPs from layer dims,
    times (1 + backward factor), times samples, times epochs.

    Unstructured masks do not reduce the count (dense arithmetic is assumed
    per round). `batch_size` does not change the total; it is accepted to
    mirror the training call signature.
    """
    del batch_size
    per_sample = 0
    hw = input_hw
    for layer in model.layers:
        if layer.kind == "dense":
            per_sample += 2 * layer.in_features * layer.out_features
        elif layer.kind == "conv2d":
            if hw is None:
                raise ValueError("input_hw required for conv models")
            per_sample += 2 * 9 * layer.in_channels * layer.out_channels * hw[0] * hw[1]
        elif layer.kind == "maxpool2x2" and hw is not None:
            hw = (hw[0] // 2, hw[1] // 2)
        elif layer.kind == "adaptive_avg_pool" and hw is not None:
            hw = (layer.output_size, layer.output_size)
    return per_sample * (1 + BACKWARD_COST_FACTOR) * n_samples * epochs


class _SweepRunner:
    """Shared machinery: dense round plus PPTE rounds, with record keeping."""

    def __init__(self, model: Model, prune_cfg: PruneConfig, train_cfg: TrainConfig,
                 data: DataBundle, objective, streams: SeedStreams,
                 entropy_batch: int = 512):
        self.model = model
        self.masks = new_masks(model)
        self.prune_cfg = prune_cfg
        self.train_cfg = train_cfg
        self.data = data
        self.objective = objective
        self.streams = streams
        self.entropy_batch = entropy_batch
        self.records: list[RunRecord] = []
        self.snapshot: Snapshot | None = None
        self.flops_total = 0
        self.best_round = 0
        self.best_params: dict = {}
        self.best_bn: dict = {}
        self.best_masks: dict = {}
        hw = data.train.images.shape[2:]
        self.input_hw = (int(hw[0]), int(hw[1]))
        self.round_flops = training_flops(model, train_cfg.epochs, len(data.train),
                                          train_cfg.batch_size, self.input_hw)

    def _record(self, round_index: int) -> RunRecord:
        aug = self.data.augment_spec
        probe_images = normalize(self.data.train.images, aug)
        entropy = model_entropy(self.model, probe_images, batch_size=self.entropy_batch).average
        self.flops_total += self.round_flops
        rec = RunRecord(
            round=round_index,
            sparsity=sparsity_of(self.masks),
            train_acc=evaluate(self.model, self.data.train, aug),
            val_acc=evaluate(self.model, self.data.val, aug),
            test_acc=evaluate(self.model, self.data.test, aug),
            entropy_avg=entropy,
            flops_cumulative=self.flops_total,
        )
        self.records.append(rec)
        if not self.best_params or rec.val_acc > self.records[self.best_round].val_acc:
            self.best_round = round_index
            self._capture_best()
        return rec

    def _capture_best(self):
        self.best_params = copy_params(self.model)
        self.best_bn = {name: (state.running_mean.copy(), state.running_var.copy(),
                               state.batches_seen)
                        for name, state in self.model.bn_state.items()}
        self.best_masks = {name: m.copy() for name, m in self.masks.items()}

    def dense_round(self) -> RunRecord:
        snapshot_at = (self.prune_cfg.rewind_iteration
                       if self.prune_cfg.perturbation == "rewind" else None)
        self.snapshot = train_model(self.model, self.masks, self.data.train,
                                    self.train_cfg, self.objective, self.streams,
                                    self.data.augment_spec, snapshot_at=snapshot_at)
        return self._record(0)

    def prune_round(self, round_index: int) -> RunRecord:
        apply_prune(self.model, self.masks, self.prune_cfg.zeta,
                    self.prune_cfg.method, self.prune_cfg.per_layer)
        perturb(self.model, self.masks, self.prune_cfg.perturbation,
                snapshot=self.snapshot, rng=self.streams.reinit_rng(round_index))
        train_model(self.model, self.masks, self.data.train, self.train_cfg,
                    self.objective, self.streams, self.data.augment_spec)
        return self._record(round_index)

    def result(self, gate_round: int | None = None) -> SweepResult:
        return SweepResult(records=self.records, best_round=self.best_round,
                           best_params=self.best_params, best_bn_state=self.best_bn,
                           best_masks=self.best_masks, gate_round=gate_round)


def ppte(model: Model, masks: dict, zeta_round: float, train_set: Dataset,
         val_set: Dataset, train_cfg: TrainConfig, objective,
         streams: SeedStreams, prune_cfg: PruneConfig,
         snapshot: Snapshot | None = None,
         aug_spec: AugmentSpec | None = None) -> tuple[Model, dict, float]:
    """One prune -> perturb -> train -> evaluate round; returns val accuracy."""
    aug_spec = aug_spec or AugmentSpec()
    if zeta_round > 0:
        apply_prune(model, masks, zeta_round, prune_cfg.method, prune_cfg.per_layer)
    perturb(model, masks, prune_cfg.perturbation, snapshot=snapshot,
            rng=streams.reinit_rng(0))
    if train_cfg.epochs > 0:
        train_model(model, masks, train_set, train_cfg, objective, streams, aug_spec)
    return model, masks, evaluate(model, val_set, aug_spec)


def iterative_prune_sweep(model: Model, prune_cfg: PruneConfig, train_cfg: TrainConfig,
                          data: DataBundle, objective=None,
                          streams: SeedStreams | None = None) -> SweepResult:
    """Dense training, then PPTE rounds while the cumulative sparsity is
    below zeta_wall; returns all records plus the best-validation model."""
    if prune_cfg.zeta_wall <= 0:
        raise ValueError("zeta_wall must be positive")
    objective = objective or CrossEntropyObjective()
    streams = streams or SeedStreams(np.random.default_rng(0), np.random.default_rng(1))
    runner = _SweepRunner(model, prune_cfg, train_cfg, data, objective, streams)
    runner.dense_round()
    zeta_current = 0.0
    round_index = 0
    while zeta_current < prune_cfg.zeta_wall:
        round_index += 1
        runner.prune_round(round_index)
        zeta_current = advance_sparsity(zeta_current, prune_cfg.zeta)
    return runner.result()


def distill_sweep(student: Model, teacher: Model, distill_alpha: float,
                  distill_tau: float, prune_cfg: PruneConfig, train_cfg: TrainConfig,
                  data: DataBundle, streams: SeedStreams | None = None) -> SweepResult:
    """Identical loop to the vanilla sweep with the distillation objective."""
    objective = KdObjective(teacher, distill_alpha, distill_tau)
    return iterative_prune_sweep(student, prune_cfg, train_cfg, data,
                                 objective=objective, streams=streams)


@dataclass
class ControllerTrace:
    rounds_executed: int
    gate_round: int | None
    best_round: int
    best_acc: float
    hit_guard: bool
    history: list[tuple[float, float]]  # (val_acc, entropy) incl. the dense round


def run_gated_controller(dense_step, prune_step, cfg: EarlyStopConfig) -> ControllerTrace:
    """Two-phase gate over (accuracy, entropy) round outcomes.

    Phase 1 runs prune rounds while the entropy stays above
    eta0 * entropy_threshold, tracking the best accuracy. Phase 2 keeps
    pruning while the current accuracy exceeds best * accuracy_threshold.
    The guard caps total rounds so the controller always terminates.
    """
    acc, eta = dense_step()
    eta0 = eta
    best_acc = acc
    best_round = 0
    history = [(acc, eta)]
    rounds = 0
    gate_round = None
    hit_guard = False
    while True:
        if gate_round is None and not eta > eta0 * cfg.entropy_threshold:
            gate_round = rounds
        if gate_round is not None and not acc > best_acc * cfg.accuracy_threshold:
            break
        if rounds >= cfg.max_rounds:
            hit_guard = True
            break
        rounds += 1
        acc, eta = prune_step(rounds)
        history.append((acc, eta))
        if gate_round is None and acc > best_acc:
            best_acc = acc
        if acc > history[best_round][0]:
            best_round = rounds
    return ControllerTrace(rounds_executed=rounds, gate_round=gate_round,
                           best_round=best_round, best_acc=history[best_round][0],
                           hit_guard=hit_guard, history=history)


def entropy_gated_early_stop(model: Model, es_cfg: EarlyStopConfig,
                             prune_cfg: PruneConfig, train_cfg: TrainConfig,
                             data: DataBundle, objective=None,
                             streams: SeedStreams | None = None) -> SweepResult:
    """Alg.-2 style controlled sweep; returns the best-validation model seen.

    The printed algorithm returns the current weights, but on any trace whose
    accuracy has already collapsed when the gate closes that violates the
    acceptance bound val_acc >= T_A * best, so the best checkpoint is
    returned instead (records keep the full trajectory).
    """
    objective = objective or CrossEntropyObjective()
    streams = streams or SeedStreams(np.random.default_rng(0), np.random.default_rng(1))
    runner = _SweepRunner(model, prune_cfg, train_cfg, data, objective, streams)

    def dense_step():
        rec = runner.dense_round()
        return rec.val_acc, rec.entropy_avg

    def prune_step(round_index):
        rec = runner.prune_round(round_index)
        return rec.val_acc, rec.entropy_avg

    trace = run_gated_controller(dense_step, prune_step, es_cfg)
    return runner.result(gate_round=trace.gate_round)


def label_phases(records: list[RunRecord], margin: float = 0.01) -> PhaseLabel:
    """Split a sweep's rounds into light / critical / sweet / collapsed.

    With a0 the dense validation accuracy: the critical phase is the first
    contiguous run below a0 - margin that later recovers to at least
    a0 - margin; collapsed is the trailing below-threshold suffix with no
    recovery; light precedes critical and sweet spans recovery to the last
    round at or above threshold. Monotone curves yield an empty critical.
    """
    if len(records) < 3:
        raise ValueError("need at least 3 records to label phases")
    acc = [r.val_acc for r in records]
    threshold = acc[0] - margin
    below = [a < threshold for a in acc]
    n = len(acc)
    collapsed_start = n
    while collapsed_start > 0 and below[collapsed_start - 1]:
        collapsed_start -= 1
    critical = None
    i = 0
    while i < collapsed_start:
        if below[i]:
            j = i
            while j < collapsed_start and below[j]:
                j += 1
            if j < collapsed_start:  # recovered to >= threshold afterwards
                critical = (i, j)
                break
            i = j
        else:
            i += 1
    if critical is not None:
        ci, cj = critical
        labels = (["light"] * ci + ["critical"] * (cj - ci)
                  + ["sweet"] * (collapsed_start - cj)
                  + ["collapsed"] * (n - collapsed_start))
    else:
        labels = ["light"] * collapsed_start + ["collapsed"] * (n - collapsed_start)
    return PhaseLabel(labels=labels, margin=margin)


def restore_best(model: Model, result: SweepResult) -> None:
    """Load a sweep's best checkpoint back into the model (params + bn stats)."""
    load_params(model, result.best_params)
    for name, (mean, var, batches) in result.best_bn_state.items():
        state = model.bn_state[name]
        state.running_mean[...] = mean
        state.running_var[...] = var
        state.batches_seen = batches
