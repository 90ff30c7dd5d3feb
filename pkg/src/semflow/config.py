"""Flat ``key = value`` configuration files validated against a fixed schema."""
from __future__ import annotations

import re
from collections import OrderedDict
from dataclasses import dataclass

from .errors import ConfigError
from .net import ModelConfig
from .train import TrainConfig

_KEY = re.compile(r"^[a-z][a-z0-9_]*(\.[a-z][a-z0-9_]*)+$")
_INT = re.compile(r"^[+-]?\d+$")
_FLOAT = re.compile(r"^[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?$")

# key -> (type, default)
SCHEMA = OrderedDict(
    [
        ("model.variant", (str, "sfnet")),
        ("model.stem_channels", (int, 16)),
        ("model.stage_channels", (str, "16,32,64,128")),
        ("model.blocks_per_stage", (int, 2)),
        ("model.decoder_channels", (int, 64)),
        ("model.num_classes", (int, 6)),
        ("model.norm", (str, "batchnorm")),
        ("model.fam_positions", (str, "F3,F4,F5")),
        ("model.gdfam_gate_on", (str, "high_res")),
        ("model.lite_high_level", (str, "F1")),
        ("model.seed", (int, 0)),
        ("train.base_lr", (float, 0.01)),
        ("train.momentum", (float, 0.9)),
        ("train.weight_decay", (float, 5e-4)),
        ("train.power", (float, 0.9)),
        ("train.total_iters", (int, 2000)),
        ("train.batch_size", (int, 8)),
        ("train.ohem_keep_frac", (float, 0.1)),
        ("train.aux_weight", (float, 0.4)),
        ("train.seed", (int, 0)),
        ("train.scale_min", (float, 0.75)),
        ("train.scale_max", (float, 2.0)),
        ("train.eval_every", (int, 500)),
        ("data.train_count", (int, 512)),
        ("data.val_count", (int, 128)),
        ("data.size", (int, 64)),
        ("data.train_seed", (int, 0)),
        ("data.val_seed", (int, 1)),
    ]
)


@dataclass
class Entry:
    value: object
    line: int


def parse_value(text: str):
    if text == "true":
        return True
    if text == "false":
        return False
    if _INT.match(text):
        return int(text)
    if _FLOAT.match(text):
        return float(text)
    return text


def _coerce(key: str, value, where: str):
    expected = SCHEMA[key][0]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is str and not isinstance(value, str):
        return str(value)
    if type(value) is not expected:
        raise ConfigError(f"{where}: {key} expects {expected.__name__}, got {type(value).__name__} {value!r}")
    return value


def _check_known(key: str, where: str) -> None:
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown key {key!r}; known keys: {', '.join(SCHEMA)}")


def parse_config(text: str) -> "OrderedDict[str, Entry]":
    """Parse config text; comments start with ``#``."""
    entries: "OrderedDict[str, Entry]" = OrderedDict()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: syntax error, expected 'key = value'")
        key, _, value = (part.strip() for part in line.partition("="))
        if not _KEY.match(key) or not value:
            raise ConfigError(f"line {lineno}: syntax error in {raw.strip()!r}")
        if key in entries:
            raise ConfigError(f"duplicate key {key!r} on lines {entries[key].line} and {lineno}")
        _check_known(key, f"line {lineno}")
        entries[key] = Entry(_coerce(key, parse_value(value), f"line {lineno}"), lineno)
    return entries


def apply_overrides(entries: "OrderedDict[str, Entry]", overrides) -> "OrderedDict[str, Entry]":
    """Apply ``key=value`` strings from ``--set``; later ones win."""
    out = OrderedDict(entries)
    for item in overrides or ():
        key, sep, value = (part.strip() for part in item.partition("="))
        if not sep or not value:
            raise ConfigError(f"--set {item!r}: expected key=value")
        _check_known(key, f"--set {item!r}")
        out[key] = Entry(_coerce(key, parse_value(value), f"--set {item!r}"), 0)
    return out


def resolved(entries) -> "OrderedDict[str, object]":
    """Every schema key with its configured or default value."""
    return OrderedDict((k, entries[k].value if k in entries else d) for k, (_, d) in SCHEMA.items())


def _int_list(text: str, key: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from exc


def model_config(entries) -> ModelConfig:
    v = resolved(entries)
    positions = v["model.fam_positions"].strip()
    fam_positions = () if positions in ("", "none") else tuple(p.strip() for p in positions.split(","))
    return ModelConfig(
        variant=v["model.variant"],
        stem_channels=v["model.stem_channels"],
        stage_channels=_int_list(v["model.stage_channels"], "model.stage_channels"),
        blocks_per_stage=v["model.blocks_per_stage"],
        decoder_channels=v["model.decoder_channels"],
        num_classes=v["model.num_classes"],
        norm=v["model.norm"],
        fam_positions=fam_positions,
        gdfam_gate_on=v["model.gdfam_gate_on"],
        lite_high_level=v["model.lite_high_level"],
        seed=v["model.seed"],
    )


def train_config(entries) -> TrainConfig:
    v = resolved(entries)
    keys = [k for k in SCHEMA if k.startswith("train.")]
    return TrainConfig(**{k.split(".", 1)[1]: v[k] for k in keys})


def data_settings(entries) -> dict:
    v = resolved(entries)
    return {k.split(".", 1)[1]: v[k] for k in SCHEMA if k.startswith("data.")}


def dump_config(entries) -> str:
    lines = []
    for key, value in resolved(entries).items():
        text = ("true" if value else "false") if isinstance(value, bool) else (repr(value) if isinstance(value, float) else str(value))
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def load_config_file(path) -> "OrderedDict[str, Entry]":
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
