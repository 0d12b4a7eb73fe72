"""Flat ``key = value`` run configuration.

Lines starting with ``#`` are comments. Every key has a typed default; unknown
keys are rejected. :func:`dump` writes the fully resolved configuration in a
stable order so a run can be reproduced from its echo.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

__all__ = ["DEFAULTS", "ConfigError", "parse_text", "load", "resolve", "dump"]


class ConfigError(ValueError):
    pass


# key -> (type tag, default)
DEFAULTS: dict[str, tuple[str, Any]] = {
    # data
    "cube": ("path", None),
    "labels": ("path", None),
    "normalize": ("bool", True),
    # synthetic scene used when no cube is given
    "syn_bands": ("int", 16),
    "syn_height": ("int", 40),
    "syn_width": ("int", 40),
    "syn_classes": ("int", 4),
    "syn_groups": ("str", "pairs"),
    "syn_gain_min": ("float", 0.8),
    "syn_gain_max": ("float", 1.2),
    "syn_noise_sigma": ("float", 0.006),
    "syn_layout_rows": ("int", 2),
    "syn_layout_cols": ("int", 2),
    "syn_pixel_variability": ("float", 0.3),
    "syn_brightness_min": ("float", 0.8),
    "syn_brightness_max": ("float", 1.2),
    "syn_seed": ("int", 0),
    # training
    "strategy": ("str", "mrs"),
    "ratio": ("float", 0.25),
    "epochs_pretrain": ("int", 20),
    "epochs_finetune": ("int", 50),
    "batch_size": ("int", 32),
    "learning_rate": ("float", 1e-3),
    "finetune_learning_rate": ("float?", None),
    "beta1": ("float", 0.9),
    "beta2": ("float", 0.999),
    "eps": ("float", 1e-8),
    "seed": ("int", 0),
    "freeze_encoder": ("bool", False),
    "train_fraction": ("float", 0.1),
    "test_fraction": ("float", 0.5),
    "patch_size": ("int", 3),
    "d": ("int", 16),
    "d_h": ("int", 32),
    "embed_init": ("float", 1.0),
    "pretrain_samples": ("int", 0),
    # checkpoints
    "init": ("path", None),
    "params": ("path", None),
    # compare
    "seeds": ("ints", (1, 2, 3, 4, 5)),
    "strategies": ("strs", ("none", "spectral_random", "mrs")),
    # sim
    "center_row": ("int?", None),
    "center_col": ("int?", None),
    "threshold": ("float", 0.95),
}

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _convert(key: str, raw: str) -> Any:
    tag = DEFAULTS[key][0]
    text = raw.strip()
    try:
        if tag.endswith("?"):
            if text in ("", "none", "None"):
                return None
            tag = tag[:-1]
        if tag == "int":
            return int(text)
        if tag == "float":
            return float(text)
        if tag == "bool":
            return _BOOL[text.lower()]
        if tag == "path":
            return text or None
        if tag == "str":
            return text
        if tag == "ints":
            return tuple(int(v) for v in text.split(",") if v.strip())
        if tag == "strs":
            return tuple(v.strip() for v in text.split(",") if v.strip())
    except (ValueError, KeyError):
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    raise AssertionError(tag)


def parse_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def load(path: str | Path) -> dict[str, Any]:
    return parse_text(Path(path).read_text())


def resolve(file_values: dict[str, Any] | None = None, overrides: dict[str, str] | None = None) -> dict[str, Any]:
    """Defaults, then file values, then string overrides."""
    cfg = {k: default for k, (_, default) in DEFAULTS.items()}
    cfg.update(file_values or {})
    for key, raw in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _convert(key, raw)
    return cfg


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def dump(cfg: dict[str, Any]) -> str:
    return "".join(f"{key} = {_format(cfg[key])}\n" for key in DEFAULTS)
