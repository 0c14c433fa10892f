"""Training objectives and the gradient statistics that reweight them.

The per-sample statistic is the classifier-gradient magnitude for the true
class, ``p_true - 1``; batches aggregate it into per-task and per-class
sharpened means. Those means reweight cross-entropy (compensation loss) and
prototype distillation (relation loss). By default the weights are detached
measurements: they scale the losses but receive no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class LossConfig:
    relation_target: str = "renormalized"  # "renormalized" | "literal"
    kl_direction: str = "student_teacher"  # "student_teacher" | "teacher_student"
    weight_stop_gradient: bool = True

    def __post_init__(self):
        if self.relation_target not in ("renormalized", "literal"):
            raise ValueError(f"unknown relation_target {self.relation_target!r}")
        if self.kl_direction not in ("student_teacher", "teacher_student"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")


@dataclass
class BatchView:
    """One mini-batch seen through both models.

    probs: live-model softmax rows over all seen classes (differentiable).
    old_probs: frozen-model softmax rows over the old classes; None in the
    first task. labels are global class indices; class_to_task maps every
    class seen so far to the task that introduced it.
    """

    probs: Tensor
    labels: np.ndarray
    class_to_task: np.ndarray
    k_old: int
    k_new: int
    old_probs: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_to_task = np.asarray(self.class_to_task, dtype=np.int64)
        b, k = self.probs.shape
        if k != self.k_old + self.k_new:
            raise ValueError(f"prediction width {k} != k_old+k_new = {self.k_old + self.k_new}")
        if self.labels.shape != (b,):
            raise ValueError(f"labels shape {self.labels.shape} does not match batch size {b}")
        row_sums = self.probs.data.sum(axis=1)
        if not np.all(np.abs(row_sums - 1.0) < ROW_SUM_TOL):
            raise ValueError("prediction rows must sum to 1")
        if self.labels.min() < 0 or self.labels.max() >= k:
            raise ValueError("label outside the seen class range")
        if len(self.class_to_task) < k:
            raise ValueError("class_to_task does not cover all seen classes")
        if self.old_probs is not None:
            if self.old_probs.shape != (b, self.k_old):
                raise ValueError(
                    f"old predictions shape {self.old_probs.shape} != ({b}, {self.k_old})"
                )

    @property
    def batch_size(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.k_old + self.k_new

    def onehot(self) -> np.ndarray:
        out = np.zeros(self.probs.shape)
        out[np.arange(self.batch_size), self.labels] = 1.0
        return out

    def sample_tasks(self) -> np.ndarray:
        return self.class_to_task[self.labels]


@dataclass
class GradientStats:
    """Detached batch statistics; tasks/classes absent from the batch are absent here."""

    per_sample: np.ndarray
    sharpen_exponent: float
    task_mean: dict[int, float] = field(default_factory=dict)
    task_sharp_mean: dict[int, float] = field(default_factory=dict)
    class_sharp_mean: dict[int, float] = field(default_factory=dict)
    task_counts: dict[int, int] = field(default_factory=dict)
    class_counts: dict[int, int] = field(default_factory=dict)


def per_sample_gradient(batch: BatchView) -> np.ndarray:
    """True-class probability minus one, per sample; always in [-1, 0]."""
    return batch.probs.data[np.arange(batch.batch_size), batch.labels] - 1.0


def sharpen_exponent(k_old: int, k_new: int) -> float:
    return k_old / (k_old + k_new)


def sharpened_stat(abs_gradient, k_old: int, k_new: int):
    """log(|g|^(k_old/(k_old+k_new)) + 1); 0^0 is taken as 1 when k_old == 0."""
    return np.log(np.power(np.asarray(abs_gradient, dtype=np.float64),
                           sharpen_exponent(k_old, k_new)) + 1.0)


def gradient_stats(batch: BatchView) -> GradientStats:
    gamma = per_sample_gradient(batch)
    abs_gamma = np.abs(gamma)
    sharp = sharpened_stat(abs_gamma, batch.k_old, batch.k_new)
    tasks = batch.sample_tasks()
    stats = GradientStats(per_sample=gamma,
                          sharpen_exponent=sharpen_exponent(batch.k_old, batch.k_new))
    for task in np.unique(tasks):
        mask = tasks == task
        stats.task_counts[int(task)] = int(mask.sum())
        stats.task_mean[int(task)] = float(abs_gamma[mask].mean())
        stats.task_sharp_mean[int(task)] = float(sharp[mask].mean())
    for cls in np.unique(batch.labels):
        mask = batch.labels == cls
        stats.class_counts[int(cls)] = int(mask.sum())
        stats.class_sharp_mean[int(cls)] = float(sharp[mask].mean())
    return stats


# ---------------------------------------------------------------------------
# cross-entropy and its gradient-balanced reweighting


def per_sample_ce(batch: BatchView) -> Tensor:
    """Vector of -log p_true, one entry per sample (clamped log)."""
    picked = ad.sum_(ad.mul(batch.probs, ad.constant(batch.onehot())), axis=1)
    return ad.scale(ad.log(picked), -1.0)


def ce_loss(batch: BatchView) -> Tensor:
    return ad.mean(per_sample_ce(batch))


def _gfc_weights(batch: BatchView, stats: GradientStats) -> np.ndarray:
    sharp = sharpened_stat(np.abs(stats.per_sample), batch.k_old, batch.k_new)
    weights = np.ones(batch.batch_size)
    tasks = batch.sample_tasks()
    for i in range(batch.batch_size):
        denom = stats.task_sharp_mean[int(tasks[i])]
        if denom != 0.0:
            weights[i] = sharp[i] / denom
    return weights


def _sharpened_tensor(batch: BatchView) -> Tensor:
    """Differentiable per-sample sharpened statistic (|g| = 1 - p_true)."""
    picked = ad.sum_(ad.mul(batch.probs, ad.constant(batch.onehot())), axis=1)
    abs_gamma = ad.add_const(ad.scale(picked, -1.0), 1.0)
    powered = ad.power(abs_gamma, sharpen_exponent(batch.k_old, batch.k_new))
    return ad.log(ad.add_const(powered, 1.0))


def _group_mean_vector(values: Tensor, groups: np.ndarray) -> Tensor:
    """Per-sample vector holding the mean of `values` over each sample's group."""
    b = values.shape[0]
    averaging = np.zeros((b, b))
    for g in np.unique(groups):
        mask = groups == g
        averaging[np.ix_(mask, mask)] = 1.0 / mask.sum()
    col = ad.matmul(ad.constant(averaging), ad.reshape(values, (b, 1)))
    return ad.reshape(col, (b,))


def gfc_loss(batch: BatchView, stats: GradientStats, stop_gradient: bool = True) -> Tensor:
    """Cross-entropy with each sample scaled by its sharpened statistic over
    its task's sharpened mean; a task whose mean is zero keeps weight 1.
    """
    ce_vec = per_sample_ce(batch)
    if stop_gradient:
        weights = ad.constant(_gfc_weights(batch, stats))
        return ad.mean(ad.mul(weights, ce_vec))
    sharp = _sharpened_tensor(batch)
    denom = _group_mean_vector(sharp, batch.sample_tasks())
    zero_denoms = np.array([stats.task_sharp_mean[int(t)] == 0.0
                            for t in batch.sample_tasks()])
    if zero_denoms.any():
        # perfectly predicted tasks fall back to unit weight
        keep = ad.constant((~zero_denoms).astype(float))
        safe_denom = ad.add(denom, ad.constant(zero_denoms.astype(float)))
        weights = ad.add(ad.mul(ad.div(sharp, safe_denom), keep),
                         ad.constant(zero_denoms.astype(float)))
    else:
        weights = ad.div(sharp, denom)
    return ad.mean(ad.mul(weights, ce_vec))


# ---------------------------------------------------------------------------
# relation distillation


def relation_groundtruth(batch: BatchView, mode: str = "renormalized") -> np.ndarray:
    """One-hot rows with the old-class block replaced by the frozen model's
    probabilities; renormalized rows sum to 1, literal rows keep their raw sum.
    """
    if batch.old_probs is None:
        raise ValueError("relation targets need the previous task's frozen model")
    if mode not in ("renormalized", "literal"):
        raise ValueError(f"unknown relation target mode {mode!r}")
    rows = batch.onehot()
    rows[:, : batch.k_old] = batch.old_probs
    if mode == "renormalized":
        rows = rows / rows.sum(axis=1, keepdims=True)
    return rows


def relation_prototypes(
    batch: BatchView, targets: np.ndarray
) -> tuple[dict[int, Tensor], dict[int, np.ndarray]]:
    """Mean predicted row (differentiable) and mean target row per class present."""
    predicted: dict[int, Tensor] = {}
    reference: dict[int, np.ndarray] = {}
    for cls in np.unique(batch.labels):
        mask = batch.labels == cls
        selector = (mask.astype(float) / mask.sum()).reshape(1, -1)
        predicted[int(cls)] = ad.matmul(ad.constant(selector), batch.probs)
        reference[int(cls)] = targets[mask].mean(axis=0)
    return predicted, reference


def kl_divergence(p: Tensor, q: np.ndarray, direction: str = "student_teacher") -> Tensor:
    """KL between a differentiable row and a detached row, clamped at 1e-12."""
    q_log = np.log(np.maximum(q, ad.LOG_CLAMP))
    if direction == "student_teacher":
        # sum p (log p - log q)
        return ad.sum_(ad.mul(p, ad.add(ad.log(p), ad.constant(-q_log))))
    if direction == "teacher_student":
        # sum q (log q - log p); only log p carries gradient
        const_term = float(np.sum(q * q_log))
        return ad.add_const(ad.scale(ad.sum_(ad.mul(ad.constant(q), ad.log(p))), -1.0),
                            const_term)
    raise ValueError(f"unknown KL direction {direction!r}")


def grd_loss(
    batch: BatchView,
    stats: GradientStats,
    prototypes: dict[int, Tensor],
    references: dict[int, np.ndarray],
    cfg: LossConfig = LossConfig(),
) -> Tensor:
    """Class-prototype distillation, each class weighted by its sharpened mean
    over its task's; absent classes contribute nothing but the normalizer
    still counts every seen class.
    """
    terms: list[Tensor] = []
    for cls, proto in prototypes.items():
        task = int(batch.class_to_task[cls])
        div = kl_divergence(proto, references[cls], cfg.kl_direction)
        if cfg.weight_stop_gradient:
            denom = stats.task_sharp_mean[task]
            weight = stats.class_sharp_mean[cls] / denom if denom != 0.0 else 1.0
            terms.append(ad.scale(div, weight))
        else:
            sharp = _sharpened_tensor(batch)
            cls_mask = (batch.labels == cls).astype(float)
            task_mask = (batch.sample_tasks() == task).astype(float)
            cls_mean = ad.scale(ad.sum_(ad.mul(sharp, ad.constant(cls_mask))), 1.0 / cls_mask.sum())
            task_mean_t = ad.scale(ad.sum_(ad.mul(sharp, ad.constant(task_mask))), 1.0 / task_mask.sum())
            if stats.task_sharp_mean[task] == 0.0:
                terms.append(div)
            else:
                terms.append(ad.mul(ad.div(cls_mean, task_mean_t), div))
    if not terms:
        return ad.constant(0.0)
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / batch.n_classes)


def objective(
    batch: BatchView,
    stats: GradientStats,
    alpha1: float,
    alpha2: float,
    cfg: LossConfig = LossConfig(),
) -> Tensor:
    """alpha1 * compensation loss + alpha2 * relation distillation loss."""
    total = ad.scale(gfc_loss(batch, stats, cfg.weight_stop_gradient), alpha1)
    if alpha2 != 0.0:
        targets = relation_groundtruth(batch, cfg.relation_target)
        prototypes, references = relation_prototypes(batch, targets)
        total = ad.add(total, ad.scale(grd_loss(batch, stats, prototypes, references, cfg),
                                       alpha2))
    return total
