"""Command-line front end: ``mrsmask <subcommand> [options]``.

Every subcommand writes ``config.echo`` (the fully resolved configuration,
paths made absolute) into its output directory; rerunning with
``--config <out>/config.echo`` reproduces the outputs.

Exit codes: 0 success, 2 usage or validation error, 3 data error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from mrsmask import config as cfgmod
from mrsmask.autonet import init_params, load_params, save_params
from mrsmask.cube import extract_patch, write_cube, write_labels
from mrsmask.errors import (
    BoundsError,
    CubeFormatError,
    DataError,
    RatioError,
    ShapeError,
    SpecError,
    TrainingDivergence,
    TrainingError,
    TruncationError,
)
from mrsmask.experiment import load_or_generate, prepare_data, run_strategy, train_config_from_config
from mrsmask.leakage import redundancy_report, similarity_matrix, write_similarity_csv, write_similarity_pgm
from mrsmask.trainer import RunReport, evaluate_oa, finetune, pretrain

__all__ = ["CommandSpec", "SUBCOMMANDS", "parse_args", "main"]

log = logging.getLogger("mrsmask")

SUBCOMMANDS = ("gen", "sim", "pretrain", "finetune", "evaluate", "compare")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

_DATA_ERRORS = (DataError, CubeFormatError, TruncationError, BoundsError, ShapeError, SpecError, OSError)
_USAGE_ERRORS = (cfgmod.ConfigError, RatioError, ValueError)


class UsageError(Exception):
    pass


@dataclass
class CommandSpec:
    subcommand: str
    config_path: str | None = None
    overrides: dict[str, str] = field(default_factory=dict)
    out: str = "out"
    verbose: bool = False


def _ratio(text: str) -> str:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"ratio must lie in (0, 1), got {text}")
    return text


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrsmask", description="Spectral masked-autoencoder experiments.")
    subs = parser.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    helps = {
        "gen": "generate a synthetic cube and label map",
        "sim": "band similarity matrix, redundancy groups and co-mask rates for one patch",
        "pretrain": "masked reconstruction pretraining",
        "finetune": "supervised fine-tuning and evaluation",
        "evaluate": "evaluate a checkpoint on the test split",
        "compare": "pretrain/fine-tune/evaluate every strategy for every seed",
    }
    for name in SUBCOMMANDS:
        sp = subs.add_parser(name, help=helps[name])
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--ratio", type=_ratio, help="mask ratio in (0, 1)")
        sp.add_argument("--strategy")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        sp.add_argument("--out", default="out", help="output directory (created if absent)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def parse_args(argv: Sequence[str]) -> CommandSpec:
    """Strict parsing; raises SystemExit(2) on usage errors like argparse does."""
    parser = _build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)
    ns = parser.parse_args(list(argv))
    if ns.subcommand is None:
        parser.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)
    overrides: dict[str, str] = {}
    for item in ns.set:
        if "=" not in item:
            parser.error(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key in ("seed", "ratio", "strategy"):
        value = getattr(ns, key)
        if value is not None:
            overrides[key] = str(value)
    return CommandSpec(ns.subcommand, ns.config, overrides, ns.out, ns.verbose)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _resolve(spec: CommandSpec) -> dict[str, Any]:
    file_values = cfgmod.load(spec.config_path) if spec.config_path else None
    cfg = cfgmod.resolve(file_values, spec.overrides)
    for key, (tag, _) in cfgmod.DEFAULTS.items():
        if tag == "path" and cfg[key]:
            cfg[key] = str(Path(cfg[key]).resolve())
    return cfg


def _echo(cfg: dict[str, Any], out: Path) -> None:
    (out / "config.echo").write_text(cfgmod.dump(cfg))


def _split(cfg: dict[str, Any], **changes: Any):
    tc = train_config_from_config(cfg, **changes)
    cube, labels = load_or_generate(cfg)
    return tc, prepare_data(cube, labels, tc, cfg["normalize"], cfg["pretrain_samples"])


def _initial(cfg: dict[str, Any]):
    return load_params(cfg["init"]) if cfg["init"] else None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def run_gen(cfg: dict[str, Any], out: Path) -> int:
    cfg = dict(cfg, cube=None, labels=None)
    cube, labels = load_or_generate(cfg)
    write_cube(cube, out / "scene.cube")
    write_labels(labels, out / "scene.labels")
    # the echo points at the written files so later runs read them back
    _echo(dict(cfg, cube=str((out / "scene.cube").resolve()), labels=str((out / "scene.labels").resolve())), out)
    print(f"wrote {out / 'scene.cube'} ({cube.bands}x{cube.height}x{cube.width}) and {out / 'scene.labels'}")
    return EXIT_OK


def run_sim(cfg: dict[str, Any], out: Path) -> int:
    _echo(cfg, out)
    tc = train_config_from_config(cfg)
    cube, _ = load_or_generate(cfg)
    row = cfg["center_row"] if cfg["center_row"] is not None else cube.height // 2
    col = cfg["center_col"] if cfg["center_col"] is not None else cube.width // 2
    patch = extract_patch(cube, (row, col), tc.patch_size)
    matrix = similarity_matrix(patch)
    write_similarity_csv(matrix, out / "similarity.csv")
    write_similarity_pgm(matrix, out / "similarity.pgm")
    report = redundancy_report(patch.data, threshold=cfg["threshold"], ratio=tc.ratio, trials=1000, seed=tc.seed)
    with open(out / "groups.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "members", "min_link"])
        for i, g in enumerate(report.groups):
            w.writerow([i, ";".join(map(str, g.members)), repr(float(g.min_link))])
    with open(out / "comask.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "band_i", "band_j", "rate"])
        for strategy in sorted(report.comask):
            for (i, j), rate in sorted(report.comask[strategy].items()):
                w.writerow([strategy, i, j, repr(float(rate))])
    print(f"{len(report.groups)} groups at threshold {cfg['threshold']} around pixel ({row}, {col})")
    return EXIT_OK


def run_pretrain(cfg: dict[str, Any], out: Path) -> int:
    _echo(cfg, out)
    tc, data = _split(cfg)
    if tc.strategy == "none":
        raise UsageError("pretrain needs a masking strategy, not 'none'")
    start = time.perf_counter()
    params, report = pretrain(tc, data.pretrain, num_classes=data.num_classes, params=_initial(cfg))
    report.wall_seconds = time.perf_counter() - start
    save_params(params, out / "params.bin")
    report.write(out)
    print(f"pretrain {tc.strategy}: final loss {report.pretrain_loss[-1]:.6f}" if report.pretrain_loss else "no epochs")
    return EXIT_OK


def run_finetune(cfg: dict[str, Any], out: Path) -> int:
    _echo(cfg, out)
    tc, data = _split(cfg)
    init = _initial(cfg)
    if init is None:
        init = init_params(data.train.shape[1], tc.patch_size, tc.d, tc.d_h, data.num_classes, tc.seed, tc.embed_init)
    start = time.perf_counter()
    params, report = finetune(tc, init, data.train, data.train_labels, num_classes=data.num_classes)
    report.oa, report.per_class = evaluate_oa(params, data.test, data.test_labels)
    report.wall_seconds = time.perf_counter() - start
    save_params(params, out / "params.bin")
    report.write(out)
    print(f"OA {report.oa:.4f}")
    return EXIT_OK


def run_evaluate(cfg: dict[str, Any], out: Path) -> int:
    _echo(cfg, out)
    if not cfg["params"]:
        raise UsageError("evaluate needs a checkpoint: --set params=PATH")
    _, data = _split(cfg)
    params = load_params(cfg["params"])
    report = RunReport(config=cfg)
    report.oa, report.per_class = evaluate_oa(params, data.test, data.test_labels)
    report.write(out)
    print(f"OA {report.oa:.4f}")
    return EXIT_OK


def run_compare(cfg: dict[str, Any], out: Path) -> int:
    """OA per strategy per seed into ``compare.csv``; rows written so far survive a failure."""
    _echo(cfg, out)
    cube, labels = load_or_generate(cfg)
    init = _initial(cfg)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "seed", "oa"])
        for seed in cfg["seeds"]:
            for strategy in cfg["strategies"]:
                stage = f"{strategy} seed {seed}"
                try:
                    tc = train_config_from_config(cfg, strategy=strategy, seed=seed)
                    data = prepare_data(cube, labels, tc, cfg["normalize"], cfg["pretrain_samples"])
                    result = run_strategy(data, tc, init=init.copy() if init is not None else None)
                except Exception:
                    fh.flush()
                    print(f"error: compare aborted at stage {stage}; rows so far kept in compare.csv", file=sys.stderr)
                    raise
                w.writerow([strategy, seed, repr(result.oa)])
                fh.flush()
                log.info("%s: OA %.4f", stage, result.oa)
    print(f"wrote {out / 'compare.csv'}")
    return EXIT_OK


_RUNNERS = {
    "gen": run_gen,
    "sim": run_sim,
    "pretrain": run_pretrain,
    "finetune": run_finetune,
    "evaluate": run_evaluate,
    "compare": run_compare,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        spec = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if spec.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(spec)
        out = Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
        return _RUNNERS[spec.subcommand](cfg, out)
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except _DATA_ERRORS as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, *_USAGE_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
