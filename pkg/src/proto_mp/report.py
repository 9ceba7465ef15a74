"""Line-oriented run reports and their schema checker.

Reports use the same ``[section]`` / ``key = value`` layout as config
files. The first section is always ``[report]``, holding ``command``,
``format_version`` and a ``timestamp`` line; the timestamp line is the
only one allowed to differ between two runs of the same command.

Schemas (required sections and keys, ``*`` = one or more sections):

train
    [config] every config key; [seed.N]* best_val_acc, test_acc,
    best_epoch, epochs_run, final_train_loss, param_checksum, segments.*;
    [aggregate] n_seeds, test_acc_mean, test_acc_std; optional [ttest]
ablate
    [config]; [variant.backbone], [variant.P_N], [variant.P_N+P_A] each
    with seeds, accuracies, mean, std; prototype variants also p_value
analyze
    [dataset] name, num_nodes, num_edges, num_undirected_edges,
    feature_dim, num_classes, mean_node_homophily, segment counts
"""

from __future__ import annotations

import configparser
from pathlib import Path

FORMAT_VERSION = "1"
TIMESTAMP_KEY = "timestamp"


class ReportSchemaError(ValueError):
    pass


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    return cp


def write_report(path, command: str, sections: dict[str, dict], timestamp: str) -> Path:
    """Write ``sections`` (ordered) under a ``[report]`` header."""
    cp = _parser()
    cp["report"] = {"command": command, "format_version": FORMAT_VERSION, TIMESTAMP_KEY: timestamp}
    for name, body in sections.items():
        cp[name] = {k: str(v) for k, v in body.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        cp.write(fh)
    return path


def read_report(path) -> configparser.ConfigParser:
    cp = _parser()
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    return cp


def strip_timestamp(text: str) -> str:
    return "".join(line for line in text.splitlines(keepends=True)
                   if not line.startswith(TIMESTAMP_KEY + " ="))


_CONFIG_KEYS = None


def _config_keys():
    global _CONFIG_KEYS
    if _CONFIG_KEYS is None:
        from .config import SECTIONS
        _CONFIG_KEYS = [k for keys in SECTIONS.values() for k in keys]
    return _CONFIG_KEYS


def _need(cp, section, keys, numeric=()):
    if not cp.has_section(section):
        raise ReportSchemaError(f"missing section [{section}]")
    for k in keys:
        if not cp.has_option(section, k):
            raise ReportSchemaError(f"[{section}] missing key {k!r}")
    for k in numeric:
        try:
            float(cp[section][k])
        except ValueError:
            raise ReportSchemaError(f"[{section}] {k} is not numeric: {cp[section][k]!r}") from None


def check_report(path) -> str:
    """Validate a report file; returns its command name or raises ReportSchemaError."""
    try:
        cp = read_report(path)
    except (OSError, configparser.Error) as e:
        raise ReportSchemaError(f"unreadable report {path}: {e}") from None
    _need(cp, "report", ("command", "format_version", TIMESTAMP_KEY))
    if cp["report"]["format_version"] != FORMAT_VERSION:
        raise ReportSchemaError(f"unsupported format_version {cp['report']['format_version']}")
    command = cp["report"]["command"]
    if command == "train":
        _need(cp, "config", _config_keys())
        seeds = [s for s in cp.sections() if s.startswith("seed.")]
        if not seeds:
            raise ReportSchemaError("train report has no [seed.N] sections")
        for s in seeds:
            _need(cp, s, ("best_val_acc", "test_acc", "best_epoch", "epochs_run", "final_train_loss",
                          "param_checksum"), numeric=("best_val_acc", "test_acc", "best_epoch"))
        _need(cp, "aggregate", ("n_seeds", "test_acc_mean", "test_acc_std"),
              numeric=("n_seeds", "test_acc_mean", "test_acc_std"))
        if int(cp["aggregate"]["n_seeds"]) != len(seeds):
            raise ReportSchemaError("aggregate n_seeds does not match the seed sections")
    elif command == "ablate":
        _need(cp, "config", _config_keys())
        for v in ("backbone", "P_N", "P_N+P_A"):
            keys = ("seeds", "accuracies", "mean", "std") + (("p_value",) if v != "backbone" else ())
            _need(cp, f"variant.{v}", keys, numeric=("mean", "std"))
            n = len(cp[f"variant.{v}"]["seeds"].split(","))
            if len(cp[f"variant.{v}"]["accuracies"].split(",")) != n:
                raise ReportSchemaError(f"[variant.{v}] accuracies and seeds differ in length")
    elif command == "analyze":
        _need(cp, "dataset", ("name", "num_nodes", "num_edges", "num_undirected_edges", "feature_dim",
                              "num_classes", "mean_node_homophily", "segment.SHet", "segment.WHet",
                              "segment.WHom", "segment.SHom"), numeric=("num_nodes", "mean_node_homophily"))
    else:
        raise ReportSchemaError(f"unknown report command {command!r}")
    return command
