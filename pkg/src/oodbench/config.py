"""Strict JSON run configuration.

One document drives every subcommand: data geometry, split sizes and
ladder, network widths, training hyperparameters, and experiment protocol.
Unknown keys are rejected, types are checked, and every violation reports
the JSON pointer of the offending key. Missing keys take the documented
defaults, so the empty document {} is a complete configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .datagen import GridSpec
from .errors import ConfigError
from .training import APPROACH_FLAGS, TrainConfig

_ALLOWED_APPROACHES = (
    "baseline",
    "late_stopping",
    "tuned_bn",
    "invariance_loss",
    "three_together",
    "best_of_three",
)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_float(v) -> bool:
    return (_is_int(v) or isinstance(v, float)) and not isinstance(v, bool)


@dataclass(frozen=True)
class _Field:
    kind: str  # int | float | bool | str | int_or_null | list_int | list_float | list_str
    default: object
    doc: str = ""

    def check(self, value, pointer: str):
        kind = self.kind
        if kind == "int":
            if not _is_int(value):
                raise ConfigError(pointer, f"expected an integer, got {value!r}")
            return int(value)
        if kind == "float":
            if not _is_float(value):
                raise ConfigError(pointer, f"expected a number, got {value!r}")
            return float(value)
        if kind == "bool":
            if not isinstance(value, bool):
                raise ConfigError(pointer, f"expected true/false, got {value!r}")
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise ConfigError(pointer, f"expected a string, got {value!r}")
            return value
        if kind == "int_or_null":
            if value is None:
                return None
            if not _is_int(value):
                raise ConfigError(pointer, f"expected an integer or null, got {value!r}")
            return int(value)
        if kind.startswith("list_"):
            if not isinstance(value, list):
                raise ConfigError(pointer, f"expected a list, got {value!r}")
            inner = kind[5:]
            out = []
            for i, item in enumerate(value):
                if inner == "int" and not _is_int(item):
                    raise ConfigError(f"{pointer}/{i}", f"expected an integer, got {item!r}")
                if inner == "float" and not _is_float(item):
                    raise ConfigError(f"{pointer}/{i}", f"expected a number, got {item!r}")
                if inner == "str" and not isinstance(item, str):
                    raise ConfigError(f"{pointer}/{i}", f"expected a string, got {item!r}")
                out.append(float(item) if inner == "float" else item)
            return out
        raise AssertionError(f"unhandled field kind {kind}")


SCHEMA = {
    "config_version": _Field("int", 1, "config schema version; must be 1"),
    "data": {
        "num_categories": _Field("int", 5, "glyph classes rendered (digits 0..k-1)"),
        "num_conditions": _Field("int", 5, "grid positions used as conditions"),
        "cell_grid": _Field("list_int", [3, 3], "placement grid rows, cols"),
        "glyph_size": _Field("int", 14, "glyph patch side in pixels"),
        "canvas_size": _Field("int", 42, "square canvas side in pixels"),
        "samples_per_combination": _Field("int", 40, "items per (category, condition)"),
        "noise_std": _Field("float", 0.02, "additive pixel noise sigma"),
        "seed": _Field("int", 7, "dataset generation seed"),
    },
    "split": {
        "degrees": _Field("list_int", [2, 3, 4], "nested ladder degrees (k per level)"),
        "level": _Field("int", 1, "ladder level index used by split/train"),
        "train_size": _Field("int", 320, "training items (InD)"),
        "val_size": _Field("int", 80, "validation items (InD)"),
        "ood_size": _Field("int", 200, "OoD test items"),
        "seed": _Field("int", 11, "split sampling seed"),
    },
    "network": {
        "channels": _Field("int", 16, "conv channels in the mini resnet"),
        "probe_width": _Field("int", 64, "probe dense layer width"),
    },
    "train": {
        "learning_rate": _Field("float", 0.001, "Adam learning rate"),
        "epochs": _Field("int_or_null", None, "epoch budget; null = 100 (1000 late-stopping)"),
        "batch_size": _Field("int", 32, "mini-batch size"),
        "bn_momentum": _Field("float", 0.99, "BatchNorm running-average momentum"),
        "invariance_weight": _Field("float", 0.0, "pair invariance loss weight (0 disables)"),
        "pair_refresh_interval": _Field("int", 100, "epochs between pair re-randomization"),
        "seed": _Field("int", 0, "training seed (init, shuffling, pairs)"),
        "approach_flags": _Field("list_str", [], "subset of late_stopping/tuned_bn/invariance_loss"),
        "restart_rule_enabled": _Field("bool", True, "restart on chance-level validation"),
    },
    "experiment": {
        "n_trials": _Field("int", 5, "measurement trials per cell"),
        "master_seed": _Field("int", 0, "seed deriving reserved + trial seeds"),
        "approaches": _Field(
            "list_str",
            ["baseline", "late_stopping", "tuned_bn", "invariance_loss"],
            "approaches in the matrix",
        ),
        "grid": _Field("str", "full", "hyperparameter grids: full or fast"),
        "workers": _Field("int", 1, "parallel runs in run-matrix"),
        "dataset_id": _Field("str", "grid-positions", "dataset name in the results tree"),
    },
}


@dataclass
class RunConfig:
    raw: dict

    def __getitem__(self, section: str) -> dict:
        return self.raw[section]

    def grid_spec(self) -> GridSpec:
        d = self.raw["data"]
        return GridSpec(
            num_categories=d["num_categories"],
            num_conditions=d["num_conditions"],
            cell_grid=tuple(d["cell_grid"]),
            glyph_size=d["glyph_size"],
            canvas_size=d["canvas_size"],
            samples_per_combination=d["samples_per_combination"],
            noise_std=d["noise_std"],
        )

    def train_config(self) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            learning_rate=t["learning_rate"],
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            bn_momentum=t["bn_momentum"],
            invariance_weight=t["invariance_weight"],
            pair_refresh_interval=t["pair_refresh_interval"],
            seed=t["seed"],
            approach_flags=frozenset(t["approach_flags"]),
            restart_rule_enabled=t["restart_rule_enabled"],
        )


def _validate_section(doc: dict, schema: dict, pointer: str) -> dict:
    out = {}
    for key, value in doc.items():
        if key not in schema:
            raise ConfigError(f"{pointer}/{key}", "unknown key")
    for key, field in schema.items():
        child_pointer = f"{pointer}/{key}"
        if isinstance(field, dict):
            child = doc.get(key, {})
            if not isinstance(child, dict):
                raise ConfigError(child_pointer, f"expected an object, got {child!r}")
            out[key] = _validate_section(child, field, child_pointer)
        else:
            if key in doc:
                out[key] = field.check(doc[key], child_pointer)
            else:
                out[key] = field.default
    return out


def _semantic_checks(raw: dict) -> None:
    if raw["config_version"] != 1:
        raise ConfigError("/config_version", f"unsupported version {raw['config_version']}")
    for flag in raw["train"]["approach_flags"]:
        if flag not in APPROACH_FLAGS:
            raise ConfigError("/train/approach_flags", f"unknown flag {flag!r}")
    for approach in raw["experiment"]["approaches"]:
        if approach not in _ALLOWED_APPROACHES:
            raise ConfigError("/experiment/approaches", f"unknown approach {approach!r}")
    if raw["experiment"]["grid"] not in ("full", "fast"):
        raise ConfigError("/experiment/grid", "grid must be 'full' or 'fast'")
    if len(raw["data"]["cell_grid"]) != 2:
        raise ConfigError("/data/cell_grid", "cell_grid must be [rows, cols]")
    if raw["split"]["level"] < 0 or raw["split"]["level"] >= len(raw["split"]["degrees"]):
        raise ConfigError("/split/level", "level indexes into degrees")


def set_pointer(doc: dict, pointer: str, value) -> None:
    """Set a value at a JSON pointer like /train/bn_momentum, creating objects."""
    parts = [p for p in pointer.split("/") if p]
    if not parts:
        raise ConfigError(pointer, "empty pointer")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(pointer, "pointer passes through a non-object")
    node[parts[-1]] = value


def parse_config(path=None, overrides=None) -> RunConfig:
    """Load, override, validate, and default-fill a configuration document."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("/", f"invalid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("/", "top-level document must be an object")
        doc = loaded
    for pointer, value in (overrides or {}).items():
        set_pointer(doc, pointer, value)
    raw = _validate_section(doc, SCHEMA, "")
    _semantic_checks(raw)
    return RunConfig(raw=raw)


def write_effective_config(config: RunConfig, directory) -> None:
    import os

    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "effective_config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.raw, fh, indent=2, sort_keys=True)
        fh.write("\n")


def defaults_help() -> str:
    """Flat listing of every key and default, for --help output."""
    lines = []

    def walk(schema, pointer):
        for key, field in schema.items():
            child = f"{pointer}/{key}"
            if isinstance(field, dict):
                walk(field, child)
            else:
                lines.append(f"  {child} = {json.dumps(field.default)}  ({field.doc})")

    walk(SCHEMA, "")
    return "config keys and defaults:\n" + "\n".join(lines)
