"""Data preparation and the strategy comparison shared by the CLI and tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from mrsmask.autonet import ModelParams, init_params
from mrsmask.cube import (
    HyperCube,
    LabelMap,
    SyntheticSpec,
    compute_stats,
    extract_patches,
    gen_synthetic,
    normalize,
    pair_groups,
    read_cube,
    read_labels,
    valid_centers,
)
from mrsmask.errors import DataError
from mrsmask.trainer import RunReport, TrainConfig, evaluate_oa, finetune, pretrain

__all__ = [
    "SplitData",
    "synthetic_spec_from_config",
    "train_config_from_config",
    "prepare_data",
    "run_strategy",
    "StrategyResult",
    "load_or_generate",
]

log = logging.getLogger(__name__)


def _parse_groups(text: str, bands: int) -> tuple[tuple[int, ...], ...]:
    if text == "pairs":
        return pair_groups(bands)
    if text == "none":
        return tuple((b,) for b in range(bands))
    return tuple(tuple(int(v) for v in grp.split(",")) for grp in text.split(";") if grp.strip())


def synthetic_spec_from_config(cfg: dict[str, Any]) -> SyntheticSpec:
    return SyntheticSpec(
        bands=cfg["syn_bands"],
        height=cfg["syn_height"],
        width=cfg["syn_width"],
        class_count=cfg["syn_classes"],
        redundancy_groups=_parse_groups(cfg["syn_groups"], cfg["syn_bands"]),
        gain_range=(cfg["syn_gain_min"], cfg["syn_gain_max"]),
        noise_sigma=cfg["syn_noise_sigma"],
        class_layout=(cfg["syn_layout_rows"], cfg["syn_layout_cols"]),
        seed=cfg["syn_seed"],
        pixel_variability=cfg["syn_pixel_variability"],
        brightness_range=(cfg["syn_brightness_min"], cfg["syn_brightness_max"]),
    )


def train_config_from_config(cfg: dict[str, Any], **changes: Any) -> TrainConfig:
    fields = {k: cfg[k] for k in TrainConfig.__dataclass_fields__}
    fields.update(changes)
    config = TrainConfig(**fields)
    config.validate()
    return config


@dataclass
class SplitData:
    """Patches for one seed: an unlabeled pretraining pool and labeled train/test sets."""

    pretrain: np.ndarray
    train: np.ndarray
    train_labels: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    cube: HyperCube


def prepare_data(
    cube: HyperCube,
    labels: LabelMap,
    config: TrainConfig,
    do_normalize: bool = True,
    pretrain_samples: int = 0,
) -> SplitData:
    """Random pixel-wise split by ``config.seed``; z-score stats from training pixels.

    Only labeled centers whose window fits inside the scene are used. The
    pretraining pool is every fitting center outside the test set (labels
    unused), optionally subsampled to ``pretrain_samples``.
    """
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise DataError(f"label map {labels.height}x{labels.width} does not match cube {cube.height}x{cube.width}")
    P = config.patch_size
    centers = valid_centers(cube, P)
    if centers.size == 0:
        raise DataError(f"no {P}x{P} window fits inside a {cube.height}x{cube.width} cube")
    lab = labels.labels[centers[:, 0], centers[:, 1]]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    order = rng.permutation(centers.shape[0])
    labeled = order[lab[order] > 0]
    n = labeled.size
    n_train = max(1, round(config.train_fraction * n))
    n_test = max(1, round(config.test_fraction * n))
    if n_train + n_test > n:
        raise DataError(f"only {n} labeled windows; cannot split {n_train} train + {n_test} test")
    train_idx = labeled[:n_train]
    test_idx = labeled[n_train:n_train + n_test]
    pool = np.setdiff1d(np.arange(centers.shape[0]), test_idx)
    pool = pool[rng.permutation(pool.size)]
    if pretrain_samples:
        pool = pool[:pretrain_samples]

    if do_normalize:
        pix = centers[train_idx, 0] * cube.width + centers[train_idx, 1]
        cube = normalize(cube, compute_stats(cube, pix))

    return SplitData(
        pretrain=extract_patches(cube, centers[np.sort(pool)], P),
        train=extract_patches(cube, centers[train_idx], P),
        train_labels=lab[train_idx],
        test=extract_patches(cube, centers[test_idx], P),
        test_labels=lab[test_idx],
        num_classes=labels.class_count,
        cube=cube,
    )


@dataclass
class StrategyResult:
    strategy: str
    seed: int
    oa: float
    per_class: np.ndarray
    pretrain_report: RunReport | None
    finetune_report: RunReport
    params: ModelParams


def run_strategy(data: SplitData, config: TrainConfig, init: ModelParams | None = None) -> StrategyResult:
    """Pretrain under ``config.strategy`` (skipped for ``none``), fine-tune, evaluate.

    Every strategy starts from the same seeded initialization, so strategies
    sharing a seed differ only in the masks drawn during pretraining.
    """
    C, P = data.train.shape[1], data.train.shape[2]
    params = init if init is not None else init_params(
        C, P, config.d, config.d_h, data.num_classes, config.seed, config.embed_init
    )
    pre_report = None
    if config.strategy != "none":
        params, pre_report = pretrain(config, data.pretrain, num_classes=data.num_classes, params=params)
        log.info("pretrain %s seed %d final loss %.5f", config.strategy, config.seed, pre_report.pretrain_loss[-1]
                 if pre_report.pretrain_loss else float("nan"))
    params, ft_report = finetune(config, params, data.train, data.train_labels, num_classes=data.num_classes)
    oa, per_class = evaluate_oa(params, data.test, data.test_labels)
    ft_report.oa, ft_report.per_class = oa, per_class
    if pre_report is not None:
        ft_report.pretrain_loss = pre_report.pretrain_loss
    return StrategyResult(config.strategy, config.seed, oa, per_class, pre_report, ft_report, params)


def load_or_generate(cfg: dict[str, Any]) -> tuple[HyperCube, LabelMap]:
    if cfg["cube"]:
        if not cfg["labels"]:
            raise DataError("a cube path needs a matching labels path")
        return read_cube(cfg["cube"]), read_labels(cfg["labels"])
    return gen_synthetic(synthetic_spec_from_config(cfg))
