"""Pretraining, fine-tuning and evaluation loops with a deterministic Adam."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mrsmask import autonet
from mrsmask.autonet import ModelParams, init_params
from mrsmask.cube import Patch
from mrsmask.errors import DataError, TrainingDivergence, TrainingError
from mrsmask.masking import STRATEGIES, draw_plan, masked_count

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "RunReport",
    "adam_step",
    "pretrain",
    "finetune",
    "evaluate_oa",
    "accuracy_from_predictions",
    "predict",
    "as_patch_array",
]


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "mrs"
    ratio: float = 0.25
    epochs_pretrain: int = 20
    epochs_finetune: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    finetune_learning_rate: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    freeze_encoder: bool = False
    train_fraction: float = 0.1
    test_fraction: float = 0.5
    patch_size: int = 3
    d: int = 16
    d_h: int = 32
    embed_init: float = 1.0

    def validate(self) -> None:
        if self.strategy not in STRATEGIES and self.strategy != "none":
            raise ValueError(f"strategy must be one of {STRATEGIES + ('none',)}, got {self.strategy!r}")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"ratio must lie in (0, 1), got {self.ratio}")
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or (self.finetune_learning_rate is not None and self.finetune_learning_rate <= 0):
            raise ValueError("learning rates must be positive")
        if not (0 < self.train_fraction < 1 and 0 < self.test_fraction < 1):
            raise ValueError("split fractions must lie in (0, 1)")
        if self.train_fraction + self.test_fraction > 1:
            raise ValueError("train_fraction + test_fraction must not exceed 1")
        if min(self.patch_size, self.d, self.d_h) < 1:
            raise ValueError("patch_size, d and d_h must be >= 1")
        if self.embed_init < 0:
            raise ValueError("embed_init must be >= 0")


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> OptimizerState:
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass
class RunReport:
    pretrain_loss: list[float] = field(default_factory=list)
    finetune_loss: list[float] = field(default_factory=list)
    per_class: np.ndarray | None = None
    oa: float | None = None
    config: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def write(self, out_dir: str | Path) -> None:
        """Write ``report.csv`` (phase,epoch,metric,value) and, if evaluated, ``perclass.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["phase", "epoch", "metric", "value"])
            for i, v in enumerate(self.pretrain_loss):
                w.writerow(["pretrain", i, "loss", repr(v)])
            for i, v in enumerate(self.finetune_loss):
                w.writerow(["finetune", i, "loss", repr(v)])
            if self.oa is not None:
                w.writerow(["evaluate", "", "oa", repr(self.oa)])
            w.writerow(["run", "", "wall_seconds", f"{self.wall_seconds:.3f}"])
        if self.per_class is not None:
            with open(out / "perclass.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["class", "accuracy"])
                for k, acc in enumerate(self.per_class, start=1):
                    w.writerow([k, "NA" if np.isnan(acc) else repr(float(acc))])


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    block_of=None,
) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam update; returns new arrays, inputs untouched.

    ``block_of`` maps a flat index to a block name for error messages.
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise TrainingError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        where = block_of(int(bad[0])) if block_of else f"index {int(bad[0])}"
        raise TrainingError(f"non-finite gradient in parameter block {where}")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, OptimizerState(m, v, t)


def as_patch_array(patches) -> np.ndarray:
    """Stack ``Patch`` objects or arrays into float64 ``(N, C_T, P, P)``."""
    if isinstance(patches, np.ndarray):
        return patches.astype(np.float64, copy=False)
    return np.stack([p.data if isinstance(p, Patch) else np.asarray(p) for p in patches]).astype(np.float64)


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    order_seq, mask_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(order_seq), np.random.default_rng(mask_seq)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _optimize(params, state, grads, lr, config, frozen):
    if frozen is not None:
        grads = grads.copy()
        grads[frozen] = 0.0
    vec, state = adam_step(params.vector, grads, state, lr, config.beta1, config.beta2, config.eps, params.block_of)
    if frozen is not None:
        vec[frozen] = params.vector[frozen]
    return params.like(vec), state


def pretrain(
    config: TrainConfig,
    patches,
    num_classes: int = 2,
    params: ModelParams | None = None,
) -> tuple[ModelParams, RunReport]:
    """Masked reconstruction training under ``config.strategy``.

    Every sample gets a fresh plan each epoch from a stream seeded by
    ``config.seed``; the epoch loss is the mean per-sample masked MSE.
    """
    config.validate()
    if config.strategy == "none":
        raise ValueError("strategy 'none' has no pretraining stage")
    data = as_patch_array(patches)
    if data.shape[0] < 1:
        raise ValueError("pretraining needs at least one patch")
    n, C, P = data.shape[0], data.shape[1], data.shape[2]
    masked_count(config.ratio, C if config.strategy != "spatial_random" else P * P)
    start = time.perf_counter()
    if params is None:
        params = init_params(C, P, config.d, config.d_h, num_classes, config.seed, config.embed_init)
    flat = data.reshape(n, C, P * P)
    order_rng, mask_rng = _streams(config.seed)
    state = OptimizerState.zeros(params.size)
    report = RunReport(config=asdict(config))

    for epoch in range(config.epochs_pretrain):
        total = 0.0
        for idx in _batches(n, config.batch_size, order_rng):
            B = idx.size
            hidden = np.zeros((B, C), dtype=bool)
            keep = np.ones((B, P * P))
            weight = np.zeros((B, C, P * P))
            for k, i in enumerate(idx):
                plan = draw_plan(config.strategy, data[i], config.ratio, mask_rng)
                hidden[k], keep[k], weight[k] = autonet.plan_arrays(plan, C, P)
            target = flat[idx]
            x = target * keep[:, None, :] * (~hidden)[..., None]
            loss, per_sample, _, grads = autonet.recon_forward_backward(params, x, target, hidden, weight)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"pretrain loss became non-finite in epoch {epoch}", epoch - 1)
            total += float(per_sample.sum())
            params, state = _optimize(params, state, grads, config.learning_rate, config, None)
        report.pretrain_loss.append(total / n)
    report.wall_seconds = time.perf_counter() - start
    return params, report


def finetune(
    config: TrainConfig,
    pretrained: ModelParams,
    patches,
    labels,
    num_classes: int | None = None,
) -> tuple[ModelParams, RunReport]:
    """Cross-entropy training of the classifier head and (unless frozen) the encoder."""
    config.validate()
    data = as_patch_array(patches)
    y = np.asarray(labels, dtype=np.int64)
    K = int(num_classes if num_classes is not None else y.max(initial=0))
    if K < 2:
        raise DataError(f"fine-tuning needs at least 2 classes, got {K}")
    if y.shape != (data.shape[0],) or y.size == 0:
        raise DataError(f"need one label per patch ({data.shape[0]}), got {y.shape}")
    if y.min() < 1 or y.max() > K:
        raise DataError(f"labels must lie in [1, {K}], found range [{y.min()}, {y.max()}]")
    start = time.perf_counter()
    head_rng, order_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([config.seed, 1]).spawn(2))
    params = pretrained.with_classes(K, head_rng)
    n, C, P = data.shape[0], data.shape[1], data.shape[2]
    flat = data.reshape(n, C, P * P)
    frozen = None
    if config.freeze_encoder:
        frozen = np.zeros(params.size, dtype=bool)
        for name in autonet.ENCODER_BLOCKS:
            frozen[params.block_slice(name)] = True
    lr = config.finetune_learning_rate or config.learning_rate
    state = OptimizerState.zeros(params.size)
    report = RunReport(config=asdict(config))
    for epoch in range(config.epochs_finetune):
        total = 0.0
        for idx in _batches(n, config.batch_size, order_rng):
            loss, _, grads = autonet.class_forward_backward(params, flat[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergence(f"finetune loss became non-finite in epoch {epoch}", epoch - 1)
            total += loss * idx.size
            params, state = _optimize(params, state, grads, lr, config, frozen)
        report.finetune_loss.append(total / n)
    report.wall_seconds = time.perf_counter() - start
    return params, report


def predict(params: ModelParams, patches, batch_size: int = 256) -> np.ndarray:
    """1-based predicted classes; argmax ties go to the lowest class."""
    data = as_patch_array(patches)
    n = data.shape[0]
    flat = data.reshape(n, params.C_T, -1)
    out = np.empty(n, dtype=np.int64)
    for lo in range(0, n, batch_size):
        _, probs, _ = autonet.class_forward_backward(params, flat[lo:lo + batch_size], None)
        out[lo:lo + batch_size] = probs.argmax(axis=1) + 1
    return out


def accuracy_from_predictions(predictions, labels, num_classes: int) -> tuple[float, np.ndarray]:
    """Overall accuracy and per-class accuracy (NaN for classes absent from ``labels``)."""
    pred = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise ValueError("evaluation set is empty")
    if y.min() < 1 or y.max() > num_classes:
        raise DataError(f"labels must lie in [1, {num_classes}]")
    correct = pred == y
    per_class = np.full(num_classes, np.nan)
    for k in range(1, num_classes + 1):
        sel = y == k
        if sel.any():
            per_class[k - 1] = correct[sel].mean()
    return float(correct.mean()), per_class


def evaluate_oa(params: ModelParams, patches, labels) -> tuple[float, np.ndarray]:
    return accuracy_from_predictions(predict(params, patches), labels, params.K)
