"""Experiment configuration: parsing, strict validation, hashing, builders.

Configs are JSON trees. Unknown keys are hard errors (a silently ignored typo
in a sweep config is worse than a crash), every default is materialized on
parse, and the resolved tree round-trips: ``parse(serialize(cfg))`` equals
``cfg``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, PartitionSpec, generate_synthetic, load_csv, load_idx
from .errors import ConfigurationError
from .nn import Network, build_cnn, build_mlp
from .strategies import Strategy, make_strategy

_DATASET_KEYS = {
    "synthetic": {"kind", "classes", "dims", "samples_per_class", "separation", "shape"},
    "csv": {"kind", "path", "feature_cols", "label_col"},
    "idx": {"kind", "images", "labels"},
}
_ARCH_KEYS = {"mlp": {"name", "hidden"}, "cnn": {"name", "channels", "kernel", "hidden"}}
_STRATEGY_KEYS = {
    "fedavg": {"name"},
    "fedper": {"name"},
    "flayer": {"name", "agg", "adaptive_lr", "masking"},
}
_TOP_KEYS = {
    "dataset",
    "partition",
    "architecture",
    "strategy",
    "head_size",
    "base_lr",
    "batch_size",
    "local_epochs",
    "rho",
    "t_max",
    "early_stop",
    "aggregation",
    "output_dir",
    "seeds",
    "dump_payloads",
}


def _reject_unknown(d: dict, allowed: set, path: str):
    unknown = sorted(set(d) - allowed)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigurationError(f"unknown config key: {where}")


def _need(d: dict, key: str, path: str):
    if key not in d:
        where = f"{path}.{key}" if path else key
        raise ConfigurationError(f"missing required config field: {where}")
    return d[key]


def _number(value, path: str, lo=None, hi=None, integer=False):
    ok = isinstance(value, int) if integer else isinstance(value, (int, float))
    ok = ok and not isinstance(value, bool)
    if not ok:
        kind = "an integer" if integer else "a number"
        raise ConfigurationError(f"{path} must be {kind}, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigurationError(f"{path} must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigurationError(f"{path} must be <= {hi}, got {value}")
    return value


@dataclass
class ExperimentConfig:
    dataset: dict
    partition: dict
    architecture: dict
    strategy: dict
    head_size: int
    base_lr: float
    batch_size: int
    local_epochs: int
    rho: float
    t_max: int
    early_stop: dict
    aggregation: str
    output_dir: str
    seeds: list[int]
    dump_payloads: bool = False

    # -- convenience views -------------------------------------------------

    @property
    def n_clients(self) -> int:
        return self.partition["n_clients"]

    @property
    def early_stop_delta(self) -> float:
        return self.early_stop["delta"]

    @property
    def early_stop_window(self) -> int:
        return self.early_stop["window"]

    def n_units(self) -> int:
        """Units in the configured architecture without building it."""
        if self.architecture["name"] == "mlp":
            return len(self.architecture["hidden"]) + 1
        return len(self.architecture["channels"]) + 2

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dataset": dict(self.dataset),
            "partition": dict(self.partition),
            "architecture": dict(self.architecture),
            "strategy": dict(self.strategy),
            "head_size": self.head_size,
            "base_lr": self.base_lr,
            "batch_size": self.batch_size,
            "local_epochs": self.local_epochs,
            "rho": self.rho,
            "t_max": self.t_max,
            "early_stop": dict(self.early_stop),
            "aggregation": self.aggregation,
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "dump_payloads": self.dump_payloads,
        }

    def config_hash(self) -> str:
        tree = self.to_dict()
        tree.pop("output_dir")
        return _digest(tree)

    def data_hash(self) -> str:
        """Identifies the data side of a run: dataset, partition, seeds."""
        return _digest(
            {"dataset": self.dataset, "partition": self.partition, "seeds": self.seeds}
        )

    # -- builders ------------------------------------------------------------

    def build_dataset(self, seed: int) -> Dataset:
        spec = self.dataset
        if spec["kind"] == "synthetic":
            ds = generate_synthetic(
                classes=spec["classes"],
                dims=spec["dims"],
                samples_per_class=spec["samples_per_class"],
                class_separation=spec["separation"],
                seed=seed,
            )
            if spec.get("shape"):
                shape = tuple(spec["shape"])
                if int(np.prod(shape)) != ds.inputs.shape[1]:
                    raise ConfigurationError(
                        f"dataset.shape {list(shape)} does not hold {ds.inputs.shape[1]} features"
                    )
                ds = Dataset(
                    ds.inputs.reshape(len(ds), *shape), ds.labels, ds.num_classes, ds.name
                )
            return ds
        if spec["kind"] == "csv":
            return load_csv(spec["path"], spec["feature_cols"], spec["label_col"])
        return load_idx(spec["images"], spec["labels"])

    def partition_spec(self, seed: int) -> PartitionSpec:
        return PartitionSpec(
            n_clients=self.partition["n_clients"],
            beta=self.partition["beta"],
            seed=seed,
            min_per_client=self.partition["min_per_client"],
        )

    def build_network(self, ds: Dataset) -> Network:
        arch = self.architecture
        if arch["name"] == "mlp":
            if ds.inputs.ndim != 2:
                raise ConfigurationError("architecture mlp needs flat (N, d) inputs")
            return build_mlp(ds.inputs.shape[1], arch["hidden"], ds.num_classes)
        if ds.inputs.ndim != 4:
            raise ConfigurationError("architecture cnn needs image (N, C, H, W) inputs")
        return build_cnn(
            ds.inputs.shape[1:], arch["channels"], arch["kernel"], arch["hidden"], ds.num_classes
        )

    def build_strategy(self) -> Strategy:
        name = self.strategy["name"]
        toggles = {k: v for k, v in self.strategy.items() if k != "name"}
        return make_strategy(name, self.head_size, toggles)


def _digest(tree: dict) -> str:
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Parsing


def parse_config(source, overrides: list[str] | None = None) -> ExperimentConfig:
    """Parse a config from a JSON file path or a dict, applying overrides.

    Overrides are ``dotted.path=value`` strings; values are parsed as JSON
    with a fallback to plain strings.
    """
    if isinstance(source, (str, Path)):
        try:
            raw = json.loads(Path(source).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {source}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None
    else:
        raw = json.loads(json.dumps(source))  # private copy
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be an object")
    for item in overrides or []:
        _apply_override(raw, item)
    return _validate(raw)


def _apply_override(tree: dict, item: str):
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not of the form path=value")
    path, _, value = item.partition("=")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = tree
    keys = path.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override path {path!r} crosses a non-object value")
    node[keys[-1]] = parsed


def _validate(raw: dict) -> ExperimentConfig:
    _reject_unknown(raw, _TOP_KEYS, "")

    dataset = _validate_dataset(_need(raw, "dataset", ""))
    partition = _validate_partition(raw.get("partition", {}))
    architecture = _validate_architecture(_need(raw, "architecture", ""))
    strategy = _validate_strategy(raw.get("strategy", {"name": "flayer"}))

    early = dict(raw.get("early_stop", {}))
    _reject_unknown(early, {"delta", "window"}, "early_stop")
    early = {
        "delta": float(_number(early.get("delta", 0.001), "early_stop.delta", lo=0)),
        "window": _number(early.get("window", 20), "early_stop.window", lo=1, integer=True),
    }

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigurationError("seeds must be a non-empty list of integers")
    for s in seeds:
        _number(s, "seeds", lo=0, integer=True)
    if len(set(seeds)) != len(seeds):
        raise ConfigurationError("seeds must be distinct")

    aggregation = raw.get("aggregation", "mask_aware")
    if aggregation not in ("mask_aware", "literal"):
        raise ConfigurationError(f"aggregation must be mask_aware or literal, got {aggregation!r}")
    if strategy["name"] == "fedper" and aggregation != "mask_aware":
        raise ConfigurationError("strategy fedper requires mask_aware aggregation")

    cfg = ExperimentConfig(
        dataset=dataset,
        partition=partition,
        architecture=architecture,
        strategy=strategy,
        head_size=_number(raw.get("head_size", 1), "head_size", lo=1, integer=True),
        base_lr=float(_number(_need(raw, "base_lr", ""), "base_lr")),
        batch_size=_number(raw.get("batch_size", 10), "batch_size", lo=1, integer=True),
        local_epochs=_number(raw.get("local_epochs", 1), "local_epochs", lo=1, integer=True),
        rho=float(_number(raw.get("rho", 1.0), "rho", lo=0, hi=1)),
        t_max=_number(raw.get("t_max", 150), "t_max", lo=1, integer=True),
        early_stop=early,
        aggregation=aggregation,
        output_dir=str(raw.get("output_dir", "runs/out")),
        seeds=[int(s) for s in seeds],
        dump_payloads=bool(raw.get("dump_payloads", False)),
    )
    if cfg.base_lr <= 0:
        raise ConfigurationError("base_lr must be > 0")
    if cfg.rho <= 0:
        raise ConfigurationError("rho must be in (0, 1]")
    if not 1 <= cfg.head_size < cfg.n_units():
        raise ConfigurationError(
            f"head_size must be in [1, {cfg.n_units() - 1}] for this architecture"
        )
    if cfg.partition["min_per_client"] < cfg.batch_size:
        raise ConfigurationError("partition.min_per_client must be >= batch_size")
    return cfg


def _validate_dataset(spec) -> dict:
    if not isinstance(spec, dict):
        raise ConfigurationError("dataset must be an object")
    kind = _need(spec, "kind", "dataset")
    if kind not in _DATASET_KEYS:
        raise ConfigurationError(f"dataset.kind must be one of {sorted(_DATASET_KEYS)}")
    _reject_unknown(spec, _DATASET_KEYS[kind], "dataset")
    out = {"kind": kind}
    if kind == "synthetic":
        out["classes"] = _number(_need(spec, "classes", "dataset"), "dataset.classes", lo=2, integer=True)
        out["dims"] = _number(_need(spec, "dims", "dataset"), "dataset.dims", lo=2, integer=True)
        out["samples_per_class"] = _number(
            _need(spec, "samples_per_class", "dataset"), "dataset.samples_per_class", lo=1, integer=True
        )
        out["separation"] = float(_number(_need(spec, "separation", "dataset"), "dataset.separation", lo=0))
        shape = spec.get("shape")
        if shape is not None:
            if not isinstance(shape, list) or len(shape) != 3:
                raise ConfigurationError("dataset.shape must be [C, H, W]")
            shape = [_number(v, "dataset.shape", lo=1, integer=True) for v in shape]
        out["shape"] = shape
    elif kind == "csv":
        out["path"] = str(_need(spec, "path", "dataset"))
        cols = _need(spec, "feature_cols", "dataset")
        if not isinstance(cols, list) or not cols:
            raise ConfigurationError("dataset.feature_cols must be a non-empty list")
        out["feature_cols"] = [str(c) for c in cols]
        out["label_col"] = str(_need(spec, "label_col", "dataset"))
    else:
        out["images"] = str(_need(spec, "images", "dataset"))
        out["labels"] = str(_need(spec, "labels", "dataset"))
    return out


def _validate_partition(spec) -> dict:
    if not isinstance(spec, dict):
        raise ConfigurationError("partition must be an object")
    _reject_unknown(spec, {"n_clients", "beta", "min_per_client"}, "partition")
    return {
        "n_clients": _number(spec.get("n_clients", 20), "partition.n_clients", lo=2, integer=True),
        "beta": float(_number(spec.get("beta", 0.1), "partition.beta")),
        "min_per_client": _number(
            spec.get("min_per_client", 20), "partition.min_per_client", lo=1, integer=True
        ),
    }


def _validate_architecture(spec) -> dict:
    if not isinstance(spec, dict):
        raise ConfigurationError("architecture must be an object")
    name = _need(spec, "name", "architecture")
    if name not in _ARCH_KEYS:
        raise ConfigurationError(f"architecture.name must be one of {sorted(_ARCH_KEYS)}")
    _reject_unknown(spec, _ARCH_KEYS[name], "architecture")
    out = {"name": name}
    if name == "mlp":
        hidden = _need(spec, "hidden", "architecture")
        if not isinstance(hidden, list) or not hidden:
            raise ConfigurationError("architecture.hidden must be a non-empty list")
        out["hidden"] = [_number(h, "architecture.hidden", lo=1, integer=True) for h in hidden]
    else:
        channels = _need(spec, "channels", "architecture")
        if not isinstance(channels, list) or not channels:
            raise ConfigurationError("architecture.channels must be a non-empty list")
        out["channels"] = [_number(c, "architecture.channels", lo=1, integer=True) for c in channels]
        out["kernel"] = _number(spec.get("kernel", 3), "architecture.kernel", lo=1, integer=True)
        out["hidden"] = _number(_need(spec, "hidden", "architecture"), "architecture.hidden", lo=1, integer=True)
    return out


def _validate_strategy(spec) -> dict:
    if not isinstance(spec, dict):
        raise ConfigurationError("strategy must be an object")
    name = _need(spec, "name", "strategy")
    if name not in _STRATEGY_KEYS:
        raise ConfigurationError(f"strategy.name must be one of {sorted(_STRATEGY_KEYS)}")
    _reject_unknown(spec, _STRATEGY_KEYS[name], "strategy")
    out = {"name": name}
    if name == "flayer":
        for key in ("agg", "adaptive_lr", "masking"):
            value = spec.get(key, True)
            if not isinstance(value, bool):
                raise ConfigurationError(f"strategy.{key} must be true or false")
            out[key] = value
    return out
