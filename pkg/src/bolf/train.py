"""Supervised training: cross-entropy loss, SGD with momentum, and a
per-step cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .metrics import ScoredSample, accuracy, roc_auc
from .model import ModelConfig, ModelParams, forward
from .tensor import NumericError, Tape, Tensor, backward, exp, log, sum_all, take


class NonFiniteLoss(NumericError):
    """Training hit a NaN/Inf loss; carries where it happened."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr0: float = 0.01
    momentum: float = 0.9
    lr_min: float = 0.0
    seed: int = 0
    eval_every: int = 1
    weight_decay: float = 0.0  # off unless set
    clip_norm: float = 0.0  # off unless set

    def __post_init__(self):
        if not self.lr0 > self.lr_min >= 0.0:
            raise ValueError(f"need lr0 > lr_min >= 0, got lr0={self.lr0} lr_min={self.lr_min}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.weight_decay < 0.0 or self.clip_norm < 0.0:
            raise ValueError("weight_decay and clip_norm must be >= 0")


@dataclass
class EpochStats:
    """One history row; val columns are None on non-eval epochs."""

    epoch: int
    mean_loss: float
    train_acc: float
    val_acc: float | None
    val_auc: float | None
    lr: float


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], in log-sum-exp form (no overflow)."""
    n = logits.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} classes")
    # subtracting the max as a constant keeps exp bounded and leaves the
    # gradient exact: d/dx logsumexp(x - m) = softmax(x)
    shifted = logits - float(np.max(logits.data))
    return log(sum_all(exp(shifted))) - take(shifted, label)


def cosine_lr(t: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * t / T)) / 2 for 0 <= t <= T."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total_steps))


class MomentumSGD:
    """Classic momentum (no Nesterov): v <- m*v + g; p <- p - lr*v.

    Weight decay, when enabled, adds wd*p to the raw gradient; clip_norm,
    when enabled, rescales the global gradient norm first. Grads are
    cleared after each step.
    """

    def __init__(self, params: list[Tensor], momentum: float = 0.9,
                 weight_decay: float = 0.0, clip_norm: float = 0.0,
                 total_steps: int = 0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocities = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.total_steps = total_steps

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} has no gradient; run backward first")
        if self.clip_norm > 0.0:
            norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                for p in self.params:
                    p.grad *= scale
        for p, v in zip(self.params, self.velocities):
            g = p.grad
            if self.weight_decay > 0.0:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v
            p.grad = None
        self.t += 1


def fake_score(logits: Tensor) -> float:
    """Probability of the tampered class from raw logits."""
    z = logits.data - logits.data.max()
    e = np.exp(z)
    return float(e[1] / e.sum())


def score_samples(params: ModelParams, samples, config: ModelConfig) -> list[ScoredSample]:
    """Eval-mode scores for a list of image samples."""
    out = []
    for s in samples:
        logits, _ = forward(s.pixels, params, config)
        out.append(ScoredSample(fake_score(logits), s.label, s.video_id))
    return out


def evaluate(params: ModelParams, samples, config: ModelConfig,
             threshold: float = 0.5) -> tuple[float, float]:
    """(accuracy, frame-level AUC) on a held-out list of samples."""
    scored = score_samples(params, samples, config)
    return accuracy(scored, threshold), roc_auc(scored)


def _shuffled_order(samples, rng: np.random.Generator) -> np.ndarray:
    """Pair-preserving shuffle of a balanced original/tampered set.

    Every tampered sample derives from one original frame (video id plus a
    "-f" suffix, same frame index) and is bit-identical to it outside the
    tamper region. Keeping each such pair adjacent makes every even-sized
    batch exactly label-balanced AND content-matched, so the shared image
    content cancels inside the batch gradient and what remains is the
    tamper signal. Pairs are shuffled, and the within-pair order is
    random. Sets without the pair structure fall back to label-stratified
    interleaving, then to a plain permutation.
    """
    by_frame = {(s.video_id, s.frame_idx): i
                for i, s in enumerate(samples) if s.label == 0}
    pairs = []
    matched = set()
    for i, s in enumerate(samples):
        if s.label == 1 and s.video_id.endswith("-f"):
            j = by_frame.get((s.video_id[:-2], s.frame_idx))
            if j is not None:
                pairs.append((j, i))
                matched.add(j)
                matched.add(i)
    if len(matched) != len(samples):
        idx0 = np.flatnonzero([s.label == 0 for s in samples])
        idx1 = np.flatnonzero([s.label == 1 for s in samples])
        if len(idx0) != len(idx1):
            return rng.permutation(len(samples))
        rng.shuffle(idx0)
        rng.shuffle(idx1)
        pairs = list(zip(idx0, idx1))
    arr = np.array(pairs)
    rng.shuffle(arr)
    flips = rng.random(len(arr)) < 0.5
    arr[flips] = arr[flips, ::-1]
    return arr.reshape(-1)


def train(params: ModelParams, splits, train_cfg: TrainConfig,
          model_cfg: ModelConfig) -> tuple[ModelParams, list[EpochStats]]:
    """Run the full training loop; deterministic for a fixed seed.

    ``splits`` needs non-empty ``train`` and ``val`` lists of image
    samples. One generator, seeded from the config, drives shuffling and
    dropout masks in a fixed order. The schedule is stepped once per
    optimizer step with T = epochs * ceil(len(train) / batch_size).
    """
    train_set = splits.train
    val_set = splits.val
    if not train_set or not val_set:
        raise ValueError("train and val splits must both be non-empty")
    if train_cfg.epochs == 0:
        return params, []

    rng = np.random.default_rng(train_cfg.seed)
    steps_per_epoch = math.ceil(len(train_set) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    opt = MomentumSGD([t for t in params.tensors()],
                      momentum=train_cfg.momentum,
                      weight_decay=train_cfg.weight_decay,
                      clip_norm=train_cfg.clip_norm,
                      total_steps=total_steps)

    history: list[EpochStats] = []
    for epoch in range(train_cfg.epochs):
        order = _shuffled_order(train_set, rng)
        losses = []
        correct = 0
        last_lr = math.nan
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            last_lr = cosine_lr(opt.t, total_steps, train_cfg.lr0, train_cfg.lr_min)
            for idx in batch:
                sample = train_set[idx]
                with Tape() as tape:
                    logits, _ = forward(sample.pixels, params, model_cfg,
                                        train=True, rng=rng)
                    loss = cross_entropy(logits, sample.label)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLoss(
                        f"non-finite loss {value} at epoch {epoch} step {opt.t} "
                        f"(video {sample.video_id} frame {sample.frame_idx})")
                backward(loss, tape)
                losses.append(value)
                predicted = int(np.argmax(logits.data))
                correct += predicted == sample.label
            # mean-over-batch gradient keeps lr robust to batch size
            inv = 1.0 / len(batch)
            for p in opt.params:
                p.grad *= inv
            opt.step(last_lr)

        val_acc = val_auc = None
        if (epoch + 1) % train_cfg.eval_every == 0 or epoch == train_cfg.epochs - 1:
            val_acc, val_auc = evaluate(params, val_set, model_cfg)
        history.append(EpochStats(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            train_acc=correct / len(train_set),
            val_acc=val_acc,
            val_auc=val_auc,
            lr=last_lr))
    return params, history
