"""Training orchestration: joint optimization of the source cross-entropy
and the bias-rectification term over unlabeled target batches, followed by
optional progressive self-training on pseudo labels.

Five modes:
  inductive  source cross-entropy only (bias weight forced to 0)
  ours       source cross-entropy + weighted bias rectification
  ours+st    ours, then self-training with a global confidence threshold
  st         inductive main phase, then the same global-threshold self-training
  cbst       inductive main phase, then self-training with per-class
             confidence thresholds (class-balanced selection)

Pseudo labels are regenerated from the current parameters before every
self-training epoch.  The main phase follows the polynomial learning-rate
decay; self-training continues at the last main-phase rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model, numerics as nm, objectives as obj
from ._fileio import atomic_write_text
from .dataio import Dataset
from .embeddings import EmbeddingTable, SplitSpec
from .numerics import ParamSet, Tensor

__all__ = [
    "MODES",
    "TrainConfig",
    "TrainState",
    "train_step",
    "train",
    "pseudo_label",
    "cbst_thresholds",
    "self_train",
    "run",
    "write_history",
    "HISTORY_HEADER",
]

MODES = ("inductive", "ours", "ours+st", "st", "cbst")

HISTORY_HEADER = "step,epoch,lr,loss_r,loss_b,loss_total"


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.6
    base_lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 10
    main_epochs: int = 20
    self_train_epochs: int = 3
    confidence_threshold: float = 0.6
    poly_power: float = 0.9
    mode: str = "ours"
    cbst_proportion: float = 0.5
    run_seed: int = 0
    hidden_channels: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence threshold must lie in [0, 1]")
        if not 0.0 < self.cbst_proportion <= 1.0:
            raise ValueError("cbst proportion must lie in (0, 1]")
        if self.base_lr <= 0 or self.poly_power <= 0:
            raise ValueError("base_lr and poly_power must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.main_epochs < 0 or self.self_train_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")

    @property
    def uses_bias_loss(self) -> bool:
        return self.mode in ("ours", "ours+st")

    @property
    def uses_self_training(self) -> bool:
        return self.mode in ("ours+st", "st", "cbst")


@dataclass
class TrainState:
    params: ParamSet
    total_steps: int
    step: int = 0
    epoch: int = 0
    history: list[tuple] = field(default_factory=list)


def _zero_grads(params: ParamSet) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.tensors.items()}


def _accumulate_image_grad(
    acc: dict[str, np.ndarray],
    params: ParamSet,
    image: np.ndarray,
    table: EmbeddingTable,
    loss_builder,
    weight: float,
) -> float:
    """Forward + backward for one image, scaled by its batch weight.

    Per-image graphs keep the working set small; summing the scaled
    per-image gradients reproduces the batch gradient exactly.
    """
    tape = nm.Tape()
    params_t = params.bind(tape)
    feats = model.forward(params_t, Tensor(image))
    probs = model.pixel_softmax(model.relation_logits(feats, table))
    loss = loss_builder(probs)
    if weight != 0.0 and loss.pixel_count > 0:
        grads = nm.backward(nm.scale(loss.value, weight), tape)
        for name, g in grads.items():
            acc[name] += g
    return loss.item()


def train_step(
    state: TrainState,
    source_batch: Sequence[tuple[np.ndarray, np.ndarray]],
    target_batch: Sequence[np.ndarray],
    config: TrainConfig,
    table: EmbeddingTable,
    split: SplitSpec,
) -> TrainState:
    """One joint step: source cross-entropy plus (optionally) the bias term.

    The recorded L_r is the mean over all labeled pixels of the source
    batch; L_b is the mean over all pixels of the target batch.
    """
    grads = _zero_grads(state.params)
    counts = [int((m != obj.IGNORE_INDEX).sum()) for _, m in source_batch]
    total_count = sum(counts)
    lr_val = 0.0
    for (image, mask), count in zip(source_batch, counts):
        weight = count / total_count if total_count else 0.0
        value = _accumulate_image_grad(
            grads, state.params, image, table,
            lambda probs, m=mask: obj.seg_cross_entropy(probs, m),
            weight,
        )
        lr_val += weight * value
    lb_val = 0.0
    if config.uses_bias_loss:
        unseen = split.unseen_sorted
        for image in target_batch:
            weight = 1.0 / len(target_batch)
            value = _accumulate_image_grad(
                grads, state.params, image, table,
                lambda probs: obj.bias_rectification(probs, unseen),
                config.lam * weight,
            )
            lb_val += weight * value
    total_val = lr_val + config.lam * lb_val if config.uses_bias_loss else lr_val
    lr = nm.poly_lr(state.step, state.total_steps, config.base_lr, config.poly_power)
    nm.sgd_momentum_step(state.params, grads, lr, config.momentum)
    state.history.append((state.step, state.epoch, lr, lr_val, lb_val, total_val))
    state.step += 1
    return state


class _Cycler:
    """Endless pass over dataset indices, reshuffled at each exhaustion."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, count: int) -> list[int]:
        out = []
        for _ in range(count):
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


def _total_steps(config: TrainConfig, n_source: int) -> int:
    return config.main_epochs * math.ceil(n_source / config.batch_size)


def train(
    config: TrainConfig,
    source: Dataset,
    target: Dataset,
    table: EmbeddingTable,
    split: SplitSpec,
) -> tuple[ParamSet, list[tuple]]:
    """Main training phase; bit-deterministic for a fixed run_seed."""
    if len(source) == 0 or len(target) == 0:
        raise ValueError("source and target datasets must be non-empty")
    net_cfg = model.NetConfig(
        output_dim=table.dim,
        hidden_channels=config.hidden_channels,
        init_seed=config.run_seed,
    )
    params = model.init_net(net_cfg)
    state = TrainState(params=params, total_steps=_total_steps(config, len(source)))
    src_rng = np.random.default_rng([config.run_seed, 1])
    tgt_cycler = _Cycler(len(target), np.random.default_rng([config.run_seed, 2]))
    for epoch in range(config.main_epochs):
        state.epoch = epoch
        order = src_rng.permutation(len(source))
        for lo in range(0, len(source), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            source_batch = [(source.image(i), source.training_mask(i)) for i in idx]
            target_batch = [target.image(i) for i in tgt_cycler.take(len(idx))]
            train_step(state, source_batch, target_batch, config, table, split)
    return state.params, state.history


def pseudo_label(probs: np.ndarray, tau: float) -> np.ndarray:
    """Argmax over every class; pixels below the confidence bar get IGNORE."""
    probs = np.asarray(probs)
    labels = probs.argmax(axis=-1).astype(np.int64)
    confidence = probs.max(axis=-1)
    labels[confidence < tau] = obj.IGNORE_INDEX
    return labels


def cbst_thresholds(probmaps: Sequence[np.ndarray], proportion: float) -> np.ndarray:
    """Per-class confidence bars selecting the top fraction of each class.

    For each class the max-probabilities of pixels whose argmax is that
    class are pooled across images; the bar is the lower-interpolated
    (1 - proportion) quantile.  Classes never predicted get bar 1.0 so
    they select nothing.
    """
    if not 0.0 < proportion <= 1.0:
        raise ValueError("proportion must lie in (0, 1]")
    if not probmaps:
        raise ValueError("need at least one probability map")
    n_classes = np.asarray(probmaps[0]).shape[-1]
    labels = []
    confidences = []
    for pm in probmaps:
        pm = np.asarray(pm)
        labels.append(pm.argmax(axis=-1).reshape(-1))
        confidences.append(pm.max(axis=-1).reshape(-1))
    labels = np.concatenate(labels)
    confidences = np.concatenate(confidences)
    thresholds = np.ones(n_classes)
    for c in range(n_classes):
        vals = np.sort(confidences[labels == c])
        if vals.size == 0:
            continue
        idx = min(int(np.floor((1.0 - proportion) * vals.size)), vals.size - 1)
        thresholds[c] = vals[idx]
    return thresholds


def _pseudo_label_all(
    params: ParamSet,
    target: Dataset,
    table: EmbeddingTable,
    config: TrainConfig,
) -> list[np.ndarray]:
    probmaps = [model.infer_probs(params, target.image(i), table) for i in range(len(target))]
    if config.mode == "cbst":
        bars = cbst_thresholds(probmaps, config.cbst_proportion)
        out = []
        for pm in probmaps:
            labels = pm.argmax(axis=-1).astype(np.int64)
            confidence = pm.max(axis=-1)
            labels[confidence < bars[labels]] = obj.IGNORE_INDEX
            out.append(labels)
        return out
    return [pseudo_label(pm, config.confidence_threshold) for pm in probmaps]


def self_train(
    params: ParamSet,
    source: Dataset,
    target: Dataset,
    config: TrainConfig,
    table: EmbeddingTable,
    split: SplitSpec,
    history: list[tuple] | None = None,
) -> ParamSet:
    """Progressive self-training: relabel all target images, then fit one
    epoch of source cross-entropy plus pseudo-label cross-entropy.

    The bias term is dropped in this phase; the learning rate stays at the
    final main-phase value.
    """
    if config.self_train_epochs == 0:
        return params
    total = _total_steps(config, len(source))
    lr = (
        nm.poly_lr(total - 1, total, config.base_lr, config.poly_power)
        if total > 0
        else config.base_lr
    )
    rng = np.random.default_rng([config.run_seed, 3])
    tgt_cycler = _Cycler(len(target), np.random.default_rng([config.run_seed, 4]))
    step = total
    for e in range(config.self_train_epochs):
        pseudo = _pseudo_label_all(params, target, table, config)
        order = rng.permutation(len(source))
        for lo in range(0, len(source), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            tgt_idx = tgt_cycler.take(len(idx))
            grads = _zero_grads(params)
            src_counts = [int(source.training_mask(i).size) for i in idx]
            src_total = sum(src_counts)
            src_val = 0.0
            for i, count in zip(idx, src_counts):
                weight = count / src_total
                src_val += weight * _accumulate_image_grad(
                    grads, params, source.image(i), table,
                    lambda probs, m=source.training_mask(i): obj.seg_cross_entropy(probs, m),
                    weight,
                )
            tgt_counts = [int((pseudo[i] != obj.IGNORE_INDEX).sum()) for i in tgt_idx]
            tgt_total = sum(tgt_counts)
            tgt_val = 0.0
            for i, count in zip(tgt_idx, tgt_counts):
                weight = count / tgt_total if tgt_total else 0.0
                tgt_val += weight * _accumulate_image_grad(
                    grads, params, target.image(i), table,
                    lambda probs, m=pseudo[i]: obj.seg_cross_entropy(probs, m),
                    weight,
                )
            nm.sgd_momentum_step(params, grads, lr, config.momentum)
            if history is not None:
                history.append(
                    (step, config.main_epochs + e, lr, src_val, 0.0, src_val + tgt_val)
                )
            step += 1
    return params


def run(
    config: TrainConfig,
    source: Dataset,
    target: Dataset,
    table: EmbeddingTable,
    split: SplitSpec,
) -> tuple[ParamSet, list[tuple]]:
    """Full pipeline for the configured mode."""
    params, history = train(config, source, target, table, split)
    if config.uses_self_training:
        params = self_train(params, source, target, config, table, split, history)
    return params, history


def write_history(history: Sequence[tuple], path: str | Path) -> None:
    lines = [HISTORY_HEADER]
    for step, epoch, lr, loss_r, loss_b, loss_total in history:
        lines.append(f"{step},{epoch},{lr:.10g},{loss_r:.10g},{loss_b:.10g},{loss_total:.10g}")
    atomic_write_text(Path(path), "\n".join(lines) + "\n")
