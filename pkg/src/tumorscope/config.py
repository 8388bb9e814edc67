"""Run configuration: defaults, overlaid by a config file, overlaid by flags.

Files are INI-style (``[section]`` headers, ``key = value`` lines). Every key
is typed by its default; tuples are comma-separated.
"""

from __future__ import annotations

import configparser
from pathlib import Path

DEFAULTS: dict[str, dict[str, object]] = {
    "data": {
        "root": "",
        "positive": "yes",
        "negative": "no",
        "target_size": 32,
        "split_fraction": 0.8,
        "split_seed": 42,
        "manifest": "",
        "synthetic": 0,
        "synthetic_size": 64,
        "synthetic_seed": 0,
    },
    "model": {
        "filters": (32, 64, 128, 128),
        "kernels": (3, 3, 3, 3),
        "dropout": 0.3,
    },
    "train": {
        "epochs": 20,
        "batch_size": 32,
        "lr": 1e-3,
        "seed": 42,
        "checkpoint_interval": 5,
        "deterministic": False,
    },
    "classifiers": {
        "knn_k": 5,
        "logistic_l2": 1e-4,
        "logistic_lr": 0.1,
        "logistic_epochs": 500,
        "svm_c": 1.0,
        "svm_lr": 1e-3,
        "svm_epochs": 1000,
        "rf_trees": 100,
        "rf_max_depth": 16,
        "mlp_hidden": (64,),
        "mlp_epochs": 300,
        "mlp_lr": 1e-2,
        "seed": 0,
    },
    "search": {
        "trials": 5,
        "budget_epochs": 3,
    },
    "localize": {
        "target_class": -1,
        "alpha": 0.5,
        "upsample": "bilinear",
    },
}


class ConfigError(ValueError):
    pass


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Fully resolved configuration, indexed as ``cfg["train"]["epochs"]``."""

    def __init__(self, values: dict[str, dict[str, object]] | None = None):
        self.values = {s: dict(keys) for s, keys in DEFAULTS.items()}
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.set(section, key, value)

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        default = DEFAULTS[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse(value, default, f"[{section}] {key}")
        elif isinstance(default, tuple):
            value = tuple(int(v) for v in value)
        elif isinstance(default, float) and not isinstance(value, bool):
            value = float(value)
        self.values[section][key] = value

    def merge_file(self, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                self.set(section, key, raw)
        return self

    def merge_flags(self, overrides: dict[tuple[str, str], object]) -> "RunConfig":
        for (section, key), value in overrides.items():
            if value is not None:
                self.set(section, key, value)
        return self

    def to_text(self, sections=None) -> str:
        lines = []
        for section in sections or DEFAULTS:
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_format(v)}".rstrip() for k, v in self.values[section].items())
            lines.append("")
        return "\n".join(lines)

    def echo(self, out_dir, sections=None) -> Path:
        path = Path(out_dir) / "config.echo"
        path.write_bytes(self.to_text(sections).encode("utf-8"))
        return path
