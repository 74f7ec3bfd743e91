"""Flat dotted-key configuration (``section.key = value``), one level deep."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

CONFIG_SCHEMA = "softrank.config/1"


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none", "null") else conv(text)

    return parse


# key -> (parser, default)
SCHEMA: dict[str, tuple[Any, Any]] = {
    "seed": (int, 0),
    "data.kind": (str, "synth"),
    "data.n": (int, 2500),
    "data.seq_len": (int, 16),
    "data.vocab_size": (int, 32),
    "data.n_classes": (int, 2),
    "data.difficulty": (float, 0.1),
    "data.val_fraction": (float, 0.2),
    "data.path": (str, ""),
    "data.text_column": (str, "text"),
    "data.label_column": (str, "label"),
    "data.vocab_cap": (int, 10_000),
    "model.kind": (str, "encoder"),
    "model.n_blocks": (int, 4),
    "model.d_model": (int, 32),
    "model.n_heads": (int, 4),
    "model.d_ff": (_opt(int), None),
    "model.norm": (str, "post"),
    "model.hidden": (_ints, [64]),
    "pretrain.epochs": (int, 6),
    "pretrain.lr": (float, 1e-3),
    "compress.which": (str, "all"),
    "compress.sharpness": (float, 10.0),
    "compress.calibrate": (_bool, True),
    "train.cr": (_opt(float), 0.5),
    "train.target_params": (_opt(int), None),
    "train.gamma": (float, 0.01),
    "train.variant": (str, "adaptive"),
    "train.base_lr": (float, 1e-3),
    "train.threshold_lr": (float, 1e-2),
    "train.weight_decay": (float, 0.01),
    "train.batch_size": (int, 32),
    "train.n_recovery_epochs": (int, 2),
    "train.max_budget_steps": (int, 2000),
    "train.eval_every": (int, 0),
    "train.eps": (float, 1e-8),
    "train.log_sigmas": (_bool, True),
    "baseline.static": (_bool, False),
    "sweep.cr_list": (_floats, [0.25, 0.5, 0.75]),
    "sweep.n_seeds": (int, 5),
}


def defaults() -> dict[str, Any]:
    return {k: (list(v) if isinstance(v, list) else v) for k, (_, v) in SCHEMA.items()}


def _coerce(key: str, value: Any) -> Any:
    parser, default = SCHEMA[key]
    if isinstance(value, str):
        return parser(value)
    if value is None or isinstance(value, bool):
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    return value


def resolve(overrides: dict[str, Any]) -> dict[str, Any]:
    unknown = sorted(k for k in overrides if k not in SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = defaults()
    for key, value in overrides.items():
        try:
            cfg[key] = _coerce(key, value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return cfg


def parse_text(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.count(".") > 1:
            raise ConfigError(f"line {lineno}: {key!r} nests deeper than one level")
        raw[key] = value
    return resolve(raw)


def load(path) -> dict[str, Any]:
    """Load a config file, or the resolved config inside a run manifest (JSON)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return resolve(doc.get("config", doc))
    return parse_text(text)


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(repr(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def dumps(cfg: dict[str, Any]) -> str:
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in sorted(cfg))


def run_id(cfg: dict[str, Any]) -> str:
    return hashlib.sha1(dumps(cfg).encode()).hexdigest()[:12]
