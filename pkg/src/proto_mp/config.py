"""Experiment config files: flat ``key = value`` pairs grouped in sections.

Example::

    [model]
    backbone = gcn
    num_layers = 2
    hidden = 16
    num_pn = 8
    num_pa = 8

    [loss]
    lambda_al = 0.01

    [run]
    seed = 0

    [data]
    dataset = toy

Keys omitted from the file take the :class:`ExperimentConfig` defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from pathlib import Path

from .training import ConfigError, ExperimentConfig

SECTIONS = {
    "model": ("backbone", "num_layers", "hidden", "sgc_hops", "num_pn", "num_pa", "temperature"),
    "loss": ("lambda_al", "lambda_d", "lambda_s", "diversity_axis", "regularizer_grad"),
    "optim": ("lr", "weight_decay", "max_epochs", "patience", "dropout"),
    "run": ("seed",),
    "data": ("dataset", "split_mode", "split_train", "split_val", "split_test", "split_file"),
}
_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()


def _parser() -> configparser.ConfigParser:
    # "value  # note" is allowed; a '#' needs leading whitespace to start a comment
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    return cp


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = _parser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _convert(key, raw.strip())
    return ExperimentConfig(**values).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    return parse_config(text, str(path))


def config_items(cfg: ExperimentConfig):
    """(section, key, text) triples covering every field."""
    for section, keys in SECTIONS.items():
        for key in keys:
            value = getattr(cfg, key)
            yield section, key, repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    cp = _parser()
    for section, key, text in config_items(cfg):
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][key] = text
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def apply_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Replace the given fields (``None`` values are ignored)."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    unknown = set(changes) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown config fields {sorted(unknown)}")
    return dataclasses.replace(cfg, **changes).validate()
