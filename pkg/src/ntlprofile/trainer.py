"""Mean-teacher training with consistency and contrastive losses.

Each step draws labeled and unlabeled super images at 1:3, runs the student
and an EMA teacher under independent input noise, and minimises

    CE(labeled) + w(t) * consistency(all) + w(t) * contrastive(triplets)

with Adam, after which the teacher weights move towards the student.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Callable, Sequence

import numpy as np

from .config import ConfigError, format_value, parse_key_values
from .evaluate import MetricsReport, evaluate_scores
from .netcore import CALIBRATE, EVAL, TRAIN, InferenceNet, ParamSet, cross_entropy, l2_normalize, l2_normalize_backward
from .profile import GRID, SuperImage

logger = logging.getLogger(__name__)

FULL_BOX = (0, 0, GRID - 1, GRID - 1)
UNLABELED = -1

LOSS_LOG_HEADER = ("step", "xent", "consistency", "contrastive", "wu", "lr")
VAL_LOG_HEADER = ("step", "precision_ntl", "recall_ntl", "f1_ntl", "auc")


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 32
    labeled_fraction: float = 0.25
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_alpha: float = 0.99
    consistency_weight_max: float = 1.0
    ramp_fraction: float = 0.2
    margin: float = 1.0
    triplets_per_anchor: int = 4
    validate_every: int = 200
    calibration_samples: int = 256
    seed: int = 0
    semi_supervised: bool = True
    triplet_loss: bool = True
    roi_pooling: bool = True

    def __post_init__(self):
        if self.batch_size <= 0 or self.batch_size % 4:
            raise ConfigError("batch_size must be a positive multiple of 4")
        if not 0 <= self.ema_alpha <= 1:
            raise ConfigError("ema_alpha must lie in [0, 1]")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.calibration_samples < 0:
            raise ConfigError("calibration_samples must be >= 0")

    @property
    def n_labeled(self) -> int:
        return int(round(self.batch_size * self.labeled_fraction))

    def to_text(self) -> str:
        return "".join(f"{k}={format_value(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        return cls(**{**parse_key_values(text, cls), **overrides})

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


# -- samples ------------------------------------------------------------------

@dataclass
class SampleSet:
    """Stacked super images: arrays indexed by sample position."""

    images: np.ndarray  # (N, 7, 50, 50) float32
    bboxes: np.ndarray  # (N, 7, 4) int
    labels: np.ndarray  # (N,) 0 normal, 1 NTL, -1 unlabeled
    keys: list[str]
    customer_ids: list[str]

    def __len__(self) -> int:
        return len(self.keys)

    @classmethod
    def from_images(cls, images: Sequence[SuperImage], labels: Sequence[int] | None = None) -> "SampleSet":
        if labels is None:
            labels = [UNLABELED if im.label.code == 2 else im.label.code for im in images]
        if not images:
            return cls.empty()
        return cls(
            np.stack([im.channels for im in images]).astype(np.float32),
            np.stack([im.bboxes for im in images]).astype(np.int64),
            np.asarray(labels, dtype=np.int64),
            [im.key for im in images],
            [im.customer_id for im in images],
        )

    @classmethod
    def empty(cls) -> "SampleSet":
        return cls(np.zeros((0, 7, GRID, GRID), np.float32), np.zeros((0, 7, 4), np.int64), np.zeros(0, np.int64), [], [])

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(
            self.images[idx],
            self.bboxes[idx],
            self.labels[idx],
            [self.keys[i] for i in idx],
            [self.customer_ids[i] for i in idx],
        )

    def concat(self, other: "SampleSet") -> "SampleSet":
        if not len(other):
            return self
        if not len(self):
            return other
        return SampleSet(
            np.concatenate([self.images, other.images]),
            np.concatenate([self.bboxes, other.bboxes]),
            np.concatenate([self.labels, other.labels]),
            self.keys + other.keys,
            self.customer_ids + other.customer_ids,
        )


def effective_boxes(bboxes: np.ndarray, roi_pooling: bool) -> np.ndarray:
    if roi_pooling:
        return bboxes
    return np.broadcast_to(np.asarray(FULL_BOX), bboxes.shape)


def split_by_customer(samples: SampleSet, train_fraction: float = 0.25, seed: int = 0):
    """Assign whole customers to train/validation, per class, near a sample ratio.

    Returns ``(train_idx, val_idx)`` over the labeled samples of ``samples``.
    """
    rng = np.random.default_rng(seed)
    train, val = [], []
    for cls in (0, 1):
        by_customer: dict[str, list[int]] = {}
        for i, (cid, lab) in enumerate(zip(samples.customer_ids, samples.labels)):
            if lab == cls:
                by_customer.setdefault(cid, []).append(i)
        cids = sorted(by_customer)
        rng.shuffle(cids)
        total = sum(len(v) for v in by_customer.values())
        taken = 0
        for j, cid in enumerate(cids):
            # at least one customer on each side
            if j == 0 or (taken < train_fraction * total and j < len(cids) - 1):
                train += by_customer[cid]
                taken += len(by_customer[cid])
            else:
                val += by_customer[cid]
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(val), dtype=np.int64)


def labeled_subset(labeled: SampleSet, count: int | None, seed: int) -> SampleSet:
    """Random subset of ``count`` labeled samples that keeps both classes."""
    if count is None or count >= len(labeled):
        return labeled
    if count < 2:
        raise ConfigError("labeled count must be >= 2")
    rng = np.random.default_rng([seed, 7])
    pos = np.flatnonzero(labeled.labels == 1)
    neg = np.flatnonzero(labeled.labels == 0)
    idx = np.concatenate([rng.choice(pos, 1), rng.choice(neg, 1)])
    rest = np.setdiff1d(np.arange(len(labeled)), idx)
    idx = np.concatenate([idx, rng.choice(rest, count - 2, replace=False)])
    return labeled.subset(np.sort(idx))


# -- loss pieces ----------------------------------------------------------------

def ema_update(teacher: ParamSet, student: ParamSet, alpha: float) -> ParamSet:
    """teacher <- alpha * teacher + (1 - alpha) * student, buffers included."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    teacher.check_compatible(student)
    for store_t, store_s in ((teacher.tensors, student.tensors), (teacher.buffers, student.buffers)):
        for name, value in store_s.items():
            old = store_t[name]
            store_t[name] = (alpha * old + (1.0 - alpha) * value).astype(old.dtype)
    return teacher


def consistency_loss(student_probs: np.ndarray, teacher_probs: np.ndarray):
    """Mean squared distance between probability vectors, and d/d(student)."""
    diff = student_probs - teacher_probs
    n = len(diff)
    if n == 0:
        return 0.0, np.zeros_like(diff)
    return float((diff * diff).sum(axis=1).mean()), 2.0 * diff / n


def pair_loss(hi: np.ndarray, hj: np.ndarray, same_class: bool, margin: float) -> float:
    d = float(np.linalg.norm(np.asarray(hi) - np.asarray(hj)))
    return d * d if same_class else max(0.0, margin - d) ** 2


def form_triplets(labels: np.ndarray, per_anchor: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``per_anchor`` (i, j, k) per anchor with y_i == y_j != y_k, j != i."""
    labels = np.asarray(labels)
    out = []
    idx = np.arange(len(labels))
    for i in idx:
        pos = idx[(labels == labels[i]) & (idx != i)]
        neg = idx[labels != labels[i]]
        n_pairs = len(pos) * len(neg)
        if n_pairs == 0:
            continue
        picks = rng.choice(n_pairs, size=min(per_anchor, n_pairs), replace=False)
        for p in np.sort(picks):
            out.append((i, pos[p // len(neg)], neg[p % len(neg)]))
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)


def triplet_loss(h: np.ndarray, triplets: np.ndarray, margin: float, eps: float = 1e-12):
    """Mean over triplets of l(i, j) + l(i, k) and its gradient w.r.t. ``h``."""
    grad = np.zeros_like(h)
    if len(triplets) == 0:
        return 0.0, grad
    i, j, k = triplets.T
    dij = h[i] - h[j]
    same = (dij * dij).sum(axis=1)
    dik = h[i] - h[k]
    dist = np.sqrt((dik * dik).sum(axis=1))
    hinge = np.maximum(0.0, margin - dist)
    n = len(triplets)
    loss = float((same + hinge * hinge).sum() / n)
    g_same = 2.0 * dij / n
    g_diff = (-2.0 * hinge / np.maximum(dist, eps))[:, None] * dik / n
    np.add.at(grad, i, g_same + g_diff)
    np.add.at(grad, j, -g_same)
    np.add.at(grad, k, -g_diff)
    return loss, grad


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))


def rampup_weight(step: int, config: TrainConfig) -> float:
    """Sigmoid-shaped ramp exp(-5(1-t)^2) over the first ramp_fraction of training."""
    length = config.ramp_fraction * config.iterations
    if length <= 0:
        return config.consistency_weight_max
    t = min(max(step / length, 0.0), 1.0)
    return config.consistency_weight_max * math.exp(-5.0 * (1.0 - t) ** 2)


# -- optimiser -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(params: ParamSet, grads: dict, state: AdamState, config: TrainConfig) -> None:
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        p = params.tensors[name]
        params.tensors[name] = (p - step).astype(p.dtype)


# -- training ------------------------------------------------------------------

@dataclass
class Batch:
    labeled: np.ndarray  # indices into the labeled pool
    unlabeled: np.ndarray  # indices into the unlabeled pool
    student_seed: tuple
    teacher_seed: tuple


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream])


def draw_batch(labeled: SampleSet, unlabeled: SampleSet, config: TrainConfig, step: int) -> Batch:
    rng = step_rng(config.seed, step, 0)
    n_lab = config.n_labeled
    if config.semi_supervised:
        lab = rng.integers(0, len(labeled), size=n_lab)
        unl = rng.integers(0, len(unlabeled), size=config.batch_size - n_lab) if len(unlabeled) else np.zeros(0, np.int64)
    else:
        # class-balanced labeled-only batches
        pos = np.flatnonzero(labeled.labels == 1)
        neg = np.flatnonzero(labeled.labels == 0)
        lab = np.concatenate([rng.choice(pos, n_lab // 2), rng.choice(neg, n_lab - n_lab // 2)])
        unl = np.zeros(0, np.int64)
    return Batch(lab, unl, (config.seed, step, 1), (config.seed, step, 2))


@dataclass
class StepResult:
    xent: float
    consistency: float
    contrastive: float
    wu: float
    lr: float
    n_triplets: int = 0


def train_step(
    net: InferenceNet,
    batch: Batch,
    labeled: SampleSet,
    unlabeled: SampleSet,
    student: ParamSet,
    teacher: ParamSet,
    adam: AdamState,
    config: TrainConfig,
    step: int,
) -> StepResult:
    """One optimisation step; mutates ``student``, ``teacher`` and ``adam``."""
    images, boxes = labeled.images[batch.labeled], labeled.bboxes[batch.labeled]
    if len(batch.unlabeled):
        images = np.concatenate([images, unlabeled.images[batch.unlabeled]])
        boxes = np.concatenate([boxes, unlabeled.bboxes[batch.unlabeled]])
    boxes = effective_boxes(boxes, config.roi_pooling)
    n_lab = len(batch.labeled)
    targets = labeled.labels[batch.labeled]

    out = net.forward(student, images, boxes, TRAIN, np.random.default_rng(batch.student_seed), keep_cache=True)
    logits = out.logits.astype(np.float64)
    xent, dlogits_lab = cross_entropy(logits[:n_lab], targets)
    dlogits = np.zeros_like(logits)
    dlogits[:n_lab] = dlogits_lab
    dembedding = None
    wu = cons = contrast = 0.0
    n_triplets = 0

    if config.semi_supervised:
        t_out = net.forward(
            teacher, images, boxes, TRAIN, np.random.default_rng(batch.teacher_seed), update_stats=False
        )
        wu = rampup_weight(step, config)
        probs = out.probs.astype(np.float64)
        cons, dprobs = consistency_loss(probs, t_out.probs.astype(np.float64))
        dlogits += wu * softmax_backward(probs, dprobs)
        if config.triplet_loss:
            pseudo = np.concatenate([targets, t_out.probs[n_lab:].argmax(axis=1)])
            triplets = form_triplets(pseudo, config.triplets_per_anchor, step_rng(config.seed, step, 3))
            n_triplets = len(triplets)
            h, norm = l2_normalize(out.embedding.astype(np.float64))
            contrast, dh = triplet_loss(h, triplets, config.margin)
            dembedding = wu * l2_normalize_backward(dh, h, norm)

    total = xent + wu * cons + wu * contrast
    if not math.isfinite(total):
        ids = [labeled.keys[i] for i in batch.labeled] + [unlabeled.keys[i] for i in batch.unlabeled]
        raise TrainingDivergence(f"non-finite loss at step {step}; batch: {ids}")

    grads = net.backward(student, out, dlogits, dembedding)
    adam_update(student, grads, adam, config)
    student.step = step
    # early steps average over the available history only
    alpha = min(1.0 - 1.0 / (step + 1), config.ema_alpha)
    ema_update(teacher, student, alpha)
    teacher.step = step
    return StepResult(xent, cons, contrast, wu, config.learning_rate, n_triplets)


def calibration_pool(labeled: SampleSet, unlabeled: SampleSet, config: TrainConfig) -> SampleSet:
    """Fixed, seed-determined draw of training samples for BN recalibration."""
    pool = labeled.concat(unlabeled)
    n = min(config.calibration_samples, len(pool))
    idx = np.random.default_rng([config.seed, 0, 4]).choice(len(pool), n, replace=False)
    return pool.subset(np.sort(idx))


def recalibrate_bn(net: InferenceNet, params: ParamSet, samples: SampleSet, roi_pooling: bool = True, batch_size: int = 32) -> ParamSet:
    """Copy of ``params`` whose BN running statistics are recomputed without noise or dropout.

    Statistics gathered during training include the variance that dropout
    adds, so eval-mode activations come out shrunk and the head's scores
    collapse towards one class. The BN warm-up makes the first updates a plain
    cumulative average over the batches seen here.
    """
    out = params.copy()
    if not len(samples):
        return out
    out.bn_updates = {}
    for lo in range(0, len(samples), batch_size):
        hi = min(lo + batch_size, len(samples))
        boxes = effective_boxes(samples.bboxes[lo:hi], roi_pooling)
        net.forward(out, samples.images[lo:hi], boxes, CALIBRATE)
    out.bn_updates = dict(params.bn_updates)
    return out


def predict(net: InferenceNet, params: ParamSet, samples: SampleSet, roi_pooling: bool = True, batch_size: int = 64):
    """Eval-mode NTL probabilities and raw embeddings for every sample."""
    scores = np.zeros(len(samples))
    embeddings = np.zeros((len(samples), net.cfg.embedding_dim), dtype=np.float32)
    for lo in range(0, len(samples), batch_size):
        hi = min(lo + batch_size, len(samples))
        boxes = effective_boxes(samples.bboxes[lo:hi], roi_pooling)
        out = net.forward(params, samples.images[lo:hi], boxes, EVAL)
        scores[lo:hi] = out.probs[:, 1]
        embeddings[lo:hi] = out.embedding
    return np.clip(scores, 0.0, 1.0), embeddings


@dataclass
class TrainResult:
    student: ParamSet
    teacher: ParamSet  # final teacher, BN statistics recalibrated for eval mode
    best_teacher: ParamSet  # best validation F1, or the final teacher without validation
    best_f1: float
    loss_log: list[StepResult]
    val_log: list[tuple[int, MetricsReport]]


def train_loop(
    labeled: SampleSet,
    unlabeled: SampleSet,
    validation: SampleSet | None,
    config: TrainConfig,
    net: InferenceNet | None = None,
    loss_log_file: IO[str] | None = None,
    val_log_file: IO[str] | None = None,
    progress: Callable[[int, StepResult], None] | None = None,
) -> TrainResult:
    net = net or InferenceNet()
    classes = set(labeled.labels.tolist())
    if not {0, 1} <= classes:
        raise ValueError("labeled pool must contain both normal and NTL samples")
    if UNLABELED in classes:
        raise ValueError("labeled pool contains unlabeled samples")
    student = net.init_params(config.seed)
    teacher = student.copy()
    adam = AdamState()
    loss_writer = csv.writer(loss_log_file, lineterminator="\n") if loss_log_file else None
    val_writer = csv.writer(val_log_file, lineterminator="\n") if val_log_file else None
    if loss_writer:
        loss_writer.writerow(LOSS_LOG_HEADER)
    if val_writer:
        val_writer.writerow(VAL_LOG_HEADER)

    log: list[StepResult] = []
    val_log: list[tuple[int, MetricsReport]] = []
    calib = calibration_pool(labeled, unlabeled, config)
    best, best_f1 = None, -1.0
    for step in range(1, config.iterations + 1):
        batch = draw_batch(labeled, unlabeled, config, step)
        result = train_step(net, batch, labeled, unlabeled, student, teacher, adam, config, step)
        log.append(result)
        if loss_writer:
            loss_writer.writerow(
                (step, repr(result.xent), repr(result.consistency), repr(result.contrastive), repr(result.wu), repr(result.lr))
            )
            loss_log_file.flush()
        if progress:
            progress(step, result)
        due = step % config.validate_every == 0 or step == config.iterations
        if validation is not None and len(validation) and due:
            candidate = recalibrate_bn(net, teacher, calib, config.roi_pooling)
            scores, _ = predict(net, candidate, validation, config.roi_pooling)
            report = evaluate_scores(scores, validation.labels)
            val_log.append((step, report))
            if val_writer:
                val_writer.writerow((step, report.ntl.precision, report.ntl.recall, report.ntl.f1, report.auc))
                val_log_file.flush()
            logger.info("step %d: val F1 %.3f AUC %s", step, report.ntl.f1, report.auc)
            if report.ntl.f1 > best_f1:
                best, best_f1 = candidate, report.ntl.f1
    final = recalibrate_bn(net, teacher, calib, config.roi_pooling)
    return TrainResult(student, final, best if best is not None else final, best_f1, log, val_log)
