"""The incremental training pipeline.

Tasks arrive as disjoint blocks of a seeded class permutation; original
dataset labels are remapped so that classifier row k always means incremental
class k. The first task trains with plain cross-entropy; later tasks mix the
task's data with the exemplar memory and optimize the gradient-balanced
objective against the frozen previous model. After each task the memory is
re-quota'd by herding, the model is snapshotted, and the classifier grows for
the next task.
"""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from . import losses as LS
from . import metrics as MT
from .model import IncrementalModel
from .seeding import stream_rng

if TYPE_CHECKING:
    from .data import Dataset


@dataclass
class TaskStream:
    """Ordered class-incremental tasks over a seeded permutation of classes.

    class_order[i] is the original dataset label assigned incremental index i;
    task t owns the contiguous incremental range given by task_sizes.
    """

    class_order: list[int]
    task_sizes: list[int]
    base_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if sum(self.task_sizes) != len(self.class_order):
            raise ValueError("task sizes must cover the class order exactly")
        if len(set(self.class_order)) != len(self.class_order):
            raise ValueError("class order contains duplicates")
        if sorted(self.class_order) != list(range(len(self.class_order))):
            raise ValueError("class order must permute 0..n_classes-1")

    @property
    def n_tasks(self) -> int:
        return len(self.task_sizes)

    @property
    def n_classes(self) -> int:
        return len(self.class_order)

    def label_spaces(self) -> list[list[int]]:
        """Incremental-index label space of each task (contiguous, disjoint)."""
        spaces = []
        start = 0
        for size in self.task_sizes:
            spaces.append(list(range(start, start + size)))
            start += size
        return spaces

    def class_to_task(self) -> np.ndarray:
        out = np.empty(self.n_classes, dtype=np.int64)
        for t, space in enumerate(self.label_spaces()):
            out[space] = t
        return out

    def remap(self) -> np.ndarray:
        """original label -> incremental index."""
        out = np.empty(self.n_classes, dtype=np.int64)
        for inc, orig in enumerate(self.class_order):
            out[orig] = inc
        return out

    def n_seen(self, task_index: int) -> int:
        return sum(self.task_sizes[: task_index + 1])


# ---------------------------------------------------------------------------
# exemplar memory


def herding_select(features: np.ndarray, quota: int) -> list[int]:
    """Greedy selection keeping the running mean of picks near the class mean.

    At step j the candidate minimizing ||mean - (chosen_sum + f(x)) / j|| is
    taken; ties break toward the lowest sample index. Returns indices in
    priority order.
    """
    n = len(features)
    if n == 0:
        raise ValueError("cannot herd an empty class")
    if quota > n:
        raise ValueError(f"quota {quota} exceeds class size {n}")
    mean = features.mean(axis=0)
    chosen: list[int] = []
    chosen_sum = np.zeros_like(mean)
    remaining = np.ones(n, dtype=bool)
    for j in range(1, quota + 1):
        candidates = np.flatnonzero(remaining)
        dists = np.linalg.norm(mean - (chosen_sum + features[candidates]) / j, axis=1)
        pick = candidates[int(np.argmin(dists))]  # argmin takes first == lowest index
        chosen.append(int(pick))
        chosen_sum += features[pick]
        remaining[pick] = False
    return chosen


@dataclass
class ExemplarMemory:
    """Priority-ordered per-class exemplar indices under a shared budget.

    fixed_total mode re-quotas to floor(capacity / seen classes) after each
    task, truncating existing lists to a prefix; per_class mode keeps a flat
    quota per class and never touches old lists.
    """

    capacity: int
    mode: str = "fixed_total"  # "fixed_total" | "per_class"
    per_class_quota: int = 20
    store: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("fixed_total", "per_class"):
            raise ValueError(f"unknown memory mode {self.mode!r}")

    def total(self) -> int:
        return sum(len(v) for v in self.store.values())

    def all_indices(self) -> list[int]:
        out: list[int] = []
        for cls in sorted(self.store):
            out.extend(self.store[cls])
        return out

    def update(self, per_class_features: dict[int, tuple[np.ndarray, np.ndarray]],
               n_seen_classes: int) -> None:
        """Re-quota old lists and herd the newly finished classes.

        per_class_features maps each new class to (dataset indices, feature
        rows from the just-trained model), index-aligned.
        """
        if self.mode == "fixed_total":
            quota = self.capacity // n_seen_classes
            for cls in self.store:
                self.store[cls] = self.store[cls][:quota]
        else:
            quota = self.per_class_quota
        for cls in sorted(per_class_features):
            indices, features = per_class_features[cls]
            take = min(quota, len(indices))
            order = herding_select(features, take)
            self.store[cls] = [int(indices[i]) for i in order]


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float) -> None:
    """In-place momentum update: v <- mu v + g; p <- p - lr v."""
    velocity *= momentum
    velocity += grad
    param -= lr * velocity


class SgdOptimizer:
    def __init__(self, params: dict[str, ad.Tensor], lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.params = dict(params)
        self.velocities = {name: np.zeros_like(p.data) for name, p in params.items()}

    def rebind(self, params: dict[str, ad.Tensor]) -> None:
        """Track replaced tensors (e.g. classifier growth); reset velocity on shape change."""
        self.params = dict(params)
        for name, p in params.items():
            if name not in self.velocities or self.velocities[name].shape != p.data.shape:
                self.velocities[name] = np.zeros_like(p.data)

    def step(self) -> None:
        for name, p in self.params.items():
            grad = p.grad
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name}")
            sgd_step(p.data, grad, self.velocities[name], self.lr, self.momentum)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# trainer


@dataclass(frozen=True)
class TrainerConfig:
    alpha1: float = 1.0
    alpha2: float = 0.1
    learning_rate: float = 0.02
    momentum: float = 0.5
    epochs_per_task: int = 40
    batch_size: int = 16
    memory_capacity: int = 2000
    memory_mode: str = "fixed_total"
    per_class_quota: int = 20
    uniform_weights: bool = False  # ablation: plain cross-entropy instead of reweighting
    flip_augment: bool = False  # horizontal flip at batch assembly (image datasets)
    loss: LS.LossConfig = LS.LossConfig()

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss coefficients must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class TaskRecord:
    task_index: int
    seen_classes: int
    top1: float
    per_class_accuracy: dict[int, float]
    epoch_losses: list[float]
    abs_gradients: np.ndarray
    sample_tasks: np.ndarray


def eval_threads() -> int:
    return max(1, int(os.environ.get("HFC_THREADS", "1")))


def run_stream(
    stream: TaskStream,
    train_set: "Dataset",
    test_set: "Dataset",
    model: IncrementalModel,
    config: TrainerConfig,
    master_seed: int,
    out_dir: str | Path | None = None,
    config_echo: dict | None = None,
) -> MT.RunReport:
    """Train through every task and evaluate over all seen classes after each.

    Returns the run report; when out_dir is given also writes metrics.csv,
    summary.json and per-task checkpoints there.
    """
    start_time = time.monotonic()
    if stream.n_classes != train_set.n_classes:
        raise ValueError("stream and dataset disagree on class count")
    if model.n_classes != stream.task_sizes[0]:
        raise ValueError("model must start with exactly the first task's classes")

    remap = stream.remap()
    train_labels = remap[train_set.labels]
    test_labels = remap[test_set.labels]
    class_to_task = stream.class_to_task()
    memory = ExemplarMemory(config.memory_capacity, config.memory_mode,
                            config.per_class_quota)
    batch_rng = stream_rng(master_seed, "batching")
    expand_rng = stream_rng(master_seed, "classifier-init")
    optimizer = SgdOptimizer(model.parameters(), config.learning_rate, config.momentum)

    old_model: IncrementalModel | None = None
    records: list[TaskRecord] = []
    label_spaces = stream.label_spaces()

    for task_index, space in enumerate(label_spaces):
        try:
            record = _train_one_task(
                task_index, space, stream, train_set, train_labels, test_set,
                test_labels, class_to_task, model, old_model, memory, config,
                optimizer, batch_rng,
            )
        except Exception as exc:
            raise RuntimeError(f"task {task_index + 1} failed: {exc}") from exc
        records.append(record)

        new_class_features = _class_features(model, train_set, train_labels, space)
        memory.update(new_class_features, stream.n_seen(task_index))
        old_model = model.snapshot()
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            model.save_checkpoint(Path(out_dir) / f"task{task_index + 1}.ckpt.json",
                                  task_index + 1)
        if task_index + 1 < stream.n_tasks:
            model.expand_classifier(stream.task_sizes[task_index + 1], expand_rng)
            optimizer.rebind(model.parameters())

    report = _build_report(records)
    if out_dir is not None:
        write_metrics_csv(Path(out_dir) / "metrics.csv", records)
        write_summary_json(Path(out_dir) / "summary.json", report, records,
                           config, master_seed, time.monotonic() - start_time,
                           config_echo=config_echo)
    return report


def _train_one_task(task_index, space, stream, train_set, train_labels, test_set,
                    test_labels, class_to_task, model, old_model, memory, config,
                    optimizer, batch_rng) -> TaskRecord:
    k_new = len(space)
    k_old = stream.n_seen(task_index) - k_new
    task_pool = np.flatnonzero(np.isin(train_labels, space))
    if task_index == 0:
        pool = task_pool
    else:
        pool = np.concatenate([task_pool, np.array(memory.all_indices(), dtype=np.int64)])

    use_relation = task_index > 0 and config.alpha2 > 0
    old_prob_cache: dict[int, np.ndarray] | None = None
    if use_relation and not config.flip_augment:
        # frozen teacher, fixed pool: predictions are constant for the task
        pool_probs, _ = MT.predict_outputs(old_model, train_set.images[pool])
        old_prob_cache = {int(i): pool_probs[j] for j, i in enumerate(pool)}
    epoch_losses: list[float] = []
    for _ in range(config.epochs_per_task):
        order = batch_rng.permutation(len(pool))
        losses_this_epoch: list[float] = []
        for start in range(0, len(pool), config.batch_size):
            batch_idx = pool[order[start:start + config.batch_size]]
            images = train_set.images[batch_idx]
            labels = train_labels[batch_idx]
            if config.flip_augment:
                flips = batch_rng.random(len(images)) < 0.5
                images = images.copy()
                images[flips] = images[flips][..., ::-1]
            logits, _ = model.forward_batch(images)
            probs = ad.softmax(logits, axis=1)
            old_probs = None
            if use_relation:
                if old_prob_cache is not None:
                    old_probs = np.stack([old_prob_cache[int(i)] for i in batch_idx])
                else:
                    old_probs = np.stack([old_model.predict(img)[0] for img in images])
            batch = LS.BatchView(probs, labels, class_to_task, k_old, k_new, old_probs)
            loss = _batch_loss(batch, task_index, config)
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()
            losses_this_epoch.append(loss.item())
        epoch_losses.append(float(np.mean(losses_this_epoch)))

    seen = stream.n_seen(task_index)
    eval_mask = test_labels < seen
    eval_images = test_set.images[eval_mask]
    eval_labels = test_labels[eval_mask]
    probs = MT.predict_probs(model, eval_images, threads=eval_threads())
    top1 = MT.top1_accuracy(probs, eval_labels)
    per_class = MT.per_class_accuracy(probs, eval_labels)
    abs_gradients = np.abs(probs[np.arange(len(eval_labels)), eval_labels] - 1.0)
    return TaskRecord(
        task_index=task_index + 1,
        seen_classes=seen,
        top1=top1,
        per_class_accuracy=per_class,
        epoch_losses=epoch_losses,
        abs_gradients=abs_gradients,
        sample_tasks=class_to_task[eval_labels],
    )


def _batch_loss(batch: LS.BatchView, task_index: int, config: TrainerConfig):
    if task_index == 0:
        return LS.ce_loss(batch)
    if config.uniform_weights:
        total = ad.scale(LS.ce_loss(batch), config.alpha1)
    else:
        stats = LS.gradient_stats(batch)
        total = ad.scale(LS.gfc_loss(batch, stats, config.loss.weight_stop_gradient),
                         config.alpha1)
    if config.alpha2 > 0:
        stats = LS.gradient_stats(batch)
        targets = LS.relation_groundtruth(batch, config.loss.relation_target)
        protos, refs = LS.relation_prototypes(batch, targets)
        total = ad.add(total, ad.scale(
            LS.grd_loss(batch, stats, protos, refs, config.loss), config.alpha2))
    return total


def _class_features(model, train_set, train_labels, space) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for cls in space:
        indices = np.flatnonzero(train_labels == cls)
        _, features = MT.predict_outputs(model, train_set.images[indices])
        out[cls] = (indices, features)
    return out


def _build_report(records: list[TaskRecord]) -> MT.RunReport:
    top1s = [r.top1 for r in records]
    fh = MT.forgetting_heterogeneity([(r.abs_gradients, r.sample_tasks) for r in records])
    return MT.RunReport(
        task_top1=top1s,
        avg_incremental=MT.average_incremental(top1s),
        fh=fh,
        per_class_accuracy=[r.per_class_accuracy for r in records],
    )


# ---------------------------------------------------------------------------
# report files (LF endings, '.' decimals, repr floats for bit-stable output)


def write_metrics_csv(path: Path, records: list[TaskRecord]) -> None:
    running_top1: list[float] = []
    with open(path, "w", newline="") as fh_out:
        writer = csv.writer(fh_out, lineterminator="\n")
        writer.writerow(["task_index", "seen_classes", "top1_acc",
                         "avg_incremental_acc", "fh", "epoch_losses"])
        for i, rec in enumerate(records):
            running_top1.append(rec.top1)
            running_fh = MT.forgetting_heterogeneity(
                [(r.abs_gradients, r.sample_tasks) for r in records[: i + 1]])
            writer.writerow([
                rec.task_index,
                rec.seen_classes,
                repr(rec.top1),
                repr(MT.average_incremental(running_top1)),
                repr(running_fh),
                ";".join(repr(v) for v in rec.epoch_losses),
            ])


def write_summary_json(path: Path, report: MT.RunReport, records: list[TaskRecord],
                       config: TrainerConfig, master_seed: int,
                       wall_clock: float, config_echo: dict | None = None) -> None:
    payload = {
        "seed": master_seed,
        "config": config_echo if config_echo is not None else _trainer_config_dict(config),
        "tasks": [
            {
                "task_index": r.task_index,
                "seen_classes": r.seen_classes,
                "top1_acc": r.top1,
                "epoch_losses": r.epoch_losses,
                "per_class_accuracy": {str(k): v for k, v in r.per_class_accuracy.items()},
            }
            for r in records
        ],
        "avg_incremental_acc": report.avg_incremental,
        "fh": report.fh,
        "wall_clock_seconds": wall_clock,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _trainer_config_dict(config: TrainerConfig) -> dict:
    return {
        "alpha1": config.alpha1,
        "alpha2": config.alpha2,
        "learning_rate": config.learning_rate,
        "momentum": config.momentum,
        "epochs_per_task": config.epochs_per_task,
        "batch_size": config.batch_size,
        "memory_capacity": config.memory_capacity,
        "memory_mode": config.memory_mode,
        "per_class_quota": config.per_class_quota,
        "uniform_weights": config.uniform_weights,
        "loss": {
            "relation_target": config.loss.relation_target,
            "kl_direction": config.loss.kl_direction,
            "weight_stop_gradient": config.loss.weight_stop_gradient,
        },
    }
