"""Experiment configuration: TOML file + dotted ``--set`` overrides."""
from __future__ import annotations

import copy
import dataclasses
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .architectures import ArchConfig
from .data import Dataset, load_cifar_binary, load_digits_split, load_idx, synth_dataset
from .evaluation import DEFAULT_GRID, SweepSpec
from .training import STREAM_DATA, STREAM_INIT, TrainConfig

DATA_KINDS = ("synthetic-blobs", "synthetic-xor", "idx", "cifar", "digits")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


_ARCH_DEFAULTS = {k: v for k, v in dataclasses.asdict(ArchConfig()).items() if k not in ("seed", "input_shape", "n_classes")}
_TRAIN_DEFAULTS = dataclasses.asdict(TrainConfig())
_CONTROLLER_DEFAULTS = dict(dataclasses.asdict(TrainConfig.controller_defaults()), hidden=32)
for _d in (_TRAIN_DEFAULTS, _CONTROLLER_DEFAULTS):
    del _d["seed"], _d["phase"]

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "arch": _ARCH_DEFAULTS,
    "data": {
        "kind": "synthetic-blobs",
        "path": "",
        "labels": "",
        "test_path": "",
        "test_labels": "",
        "dir": "",
        "count": 512,
        "test_count": 256,
        "n_classes": 4,
        "shape": [1, 8, 8],
        "noise": 0.1,
        "test_size": 500,
    },
    "train": _TRAIN_DEFAULTS,
    "controller": _CONTROLLER_DEFAULTS,
    "sweep": {"grid": list(DEFAULT_GRID), "strategy": "nested", "batch_size": 256, "threads": 1},
}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected a table")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def parse_value(text: str):
    """A TOML literal (number, bool, string, array), else the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(tree: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not KEY=VALUE")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    update: dict = {}
    node = update
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = parse_value(text.strip())
    return _merge(tree, update)


def load_config(path: str | None = None, overrides=(), seed: int | None = None, out: str | None = None) -> dict:
    """Defaults, then the TOML file, then ``--set`` overrides, then ``--seed``/``--out``."""
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            parsed = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        tree = _merge(tree, parsed)
    for assignment in overrides:
        tree = apply_override(tree, assignment)
    if seed is not None:
        tree["seed"] = seed
    if out is not None:
        tree["out"] = out
    validate(tree)
    return tree


def validate(tree: dict) -> None:
    seed = tree["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed: expected an integer in [0, 2^64), got {seed!r}")
    if tree["data"]["kind"] not in DATA_KINDS:
        raise ConfigError(f"data.kind: expected one of {DATA_KINDS}, got {tree['data']['kind']!r}")
    for section in ("train", "controller"):
        try:
            train_config(tree, section).validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    try:
        sweep_spec(tree)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"sweep: {exc}") from None


def substream_seed(seed: int, stream: int) -> int:
    """A 32-bit seed for a named substream of the global seed."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def arch_config(tree: dict, input_shape, n_classes: int) -> ArchConfig:
    a = dict(tree["arch"])
    for key in ("widths", "blocks"):
        if a.get(key) is not None:
            a[key] = tuple(a[key])
    try:
        cfg = ArchConfig(**a, input_shape=tuple(input_shape), n_classes=n_classes,
                         seed=substream_seed(tree["seed"], STREAM_INIT))
        cfg.validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"arch: {exc}") from None
    return cfg


def train_config(tree: dict, section: str = "train") -> TrainConfig:
    fields = dict(tree[section])
    fields.pop("hidden", None)
    phase = "datapath" if section == "train" else "controller"
    return TrainConfig(phase=phase, seed=tree["seed"], **fields)


def sweep_spec(tree: dict) -> SweepSpec:
    s = tree["sweep"]
    return SweepSpec(grid=tuple(s["grid"]), strategy=s["strategy"], batch_size=s["batch_size"], seed=tree["seed"])


def _require(d: dict, key: str) -> Path:
    value = d.get(key)
    if not value:
        raise ConfigError(f"data.{key}: required for data.kind = {d['kind']!r}")
    p = Path(value)
    if not p.exists():
        raise ConfigError(f"data.{key}: path {str(p)!r} does not exist")
    return p


def load_data(tree: dict, need_test: bool = True) -> tuple[Dataset, Dataset | None]:
    d = tree["data"]
    kind = d["kind"]
    data_seed = substream_seed(tree["seed"], STREAM_DATA)
    if kind in ("synthetic-blobs", "synthetic-xor"):
        name = "blobs" if kind == "synthetic-blobs" else "xor-grid"
        shape = tuple(d["shape"])
        # both splits come from one draw so they share class prototypes
        full = synth_dataset(name, d["count"] + d["test_count"], seed=data_seed, n_classes=d["n_classes"],
                             shape=shape, noise=d["noise"])
        train = full.subset(np.arange(d["count"]), "train")
        test = full.subset(np.arange(d["count"], len(full)), "test") if d["test_count"] else None
        return train, test
    if kind == "digits":
        return load_digits_split(test_size=d["test_size"], seed=data_seed)
    if kind == "cifar":
        return load_cifar_binary(_require(d, "dir"))
    images = _require(d, "path")
    labels = _require(d, "labels")
    train = load_idx(images, labels)
    test = None
    if need_test or d.get("test_path"):
        test = load_idx(_require(d, "test_path"), _require(d, "test_labels"), n_classes=train.n_classes, split="test")
    return train, test
