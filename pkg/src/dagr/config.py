"""Strict YAML run configuration.

Every key has a default, a type and a range check. Unknown keys, duplicate
keys, wrong types and out-of-range values are rejected with an error that
names the (dotted) key. The materialized result, defaults included, is what
gets echoed into every report.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import yaml

from .data import CORRUPTIONS, CorruptionSpec, SyntheticDataConfig
from .engine import ACTIVATIONS
from .errors import ConfigError, ParseError, RangeError, UnknownKey
from .flow import FlowConfig
from .losses import DEFAULT_T, DEFAULT_TAU
from .pareto import DEFAULT_BETA
from .trainer import TASK_MODES, TrainConfig


@dataclass(frozen=True)
class Key:
    default: Any
    kind: str  # int | float | bool | str | ints | floats | strs | float?
    check: Callable[[Any], bool] | None = None
    rule: str = ""


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _at_least(n):
    return lambda v: v >= n


def _one_of(options):
    return lambda v: v in options


def _all(pred):
    return lambda vs: all(pred(v) for v in vs)


SCHEMA: dict[str, Any] = {
    "seed": Key(0, "int", _nonneg, ">= 0"),
    "t": Key(DEFAULT_T, "float", _pos, "> 0"),
    "tau": Key(DEFAULT_TAU, "float", _nonneg, ">= 0"),
    "beta": Key(DEFAULT_BETA, "float", _nonneg, ">= 0"),
    "use_pareto": Key(True, "bool"),
    "dagr": Key(True, "bool"),
    "lambda_intra": Key(0.1, "float", _nonneg, ">= 0"),
    "lambda_inter": Key(0.05, "float", _nonneg, ">= 0"),
    "epochs": Key(30, "int", _at_least(1), ">= 1"),
    "batch_size": Key(32, "int", _at_least(1), ">= 1"),
    "lr": Key(0.1, "float", _pos, "> 0"),
    "embed_dim": Key(8, "int", _at_least(1), ">= 1"),
    "hidden": Key([32], "ints", _all(_at_least(1)), "entries >= 1"),
    "activation": Key("tanh", "str", _one_of(ACTIVATIONS), f"one of {ACTIVATIONS}"),
    "task_mode": Key("decoupled", "str", _one_of(TASK_MODES), f"one of {TASK_MODES}"),
    "diag_every": Key(1, "int", _nonneg, ">= 0"),
    "estimate_gap": Key(False, "bool"),
    "data": {
        "M": Key(2, "int", _at_least(2), ">= 2"),
        "K": Key(4, "int", _at_least(2), ">= 2"),
        "samples_per_class": Key(50, "int", _at_least(2), ">= 2"),
        "input_dims": Key([16, 16], "ints", _all(_at_least(1)), "entries >= 1"),
        "latent_dim": Key(4, "int", _at_least(1), ">= 1"),
        "nuisance_dim": Key(4, "int", _at_least(1), ">= 1"),
        "separation": Key(2.0, "float", _nonneg, ">= 0"),
        "shared_std": Key(1.0, "float", _nonneg, ">= 0"),
        "signal_strength": Key([1.0, 1.0], "floats", _all(_nonneg), "entries >= 0"),
        "nuisance_std": Key([0.5, 0.5], "floats", _all(_nonneg), "entries >= 0"),
        "noise_std": Key(0.1, "float", _nonneg, ">= 0"),
        "train_fraction": Key(0.8, "float", lambda v: 0 < v < 1, "in (0, 1)"),
    },
    "flow": {
        "B": Key(64, "int", _at_least(2), ">= 2"),
        "d": Key(8, "int", _at_least(2), ">= 2"),
        "M": Key(1, "int", _at_least(1), ">= 1"),
        "eta": Key(0.05, "float", _pos, "> 0"),
        "steps": Key(2000, "int", _nonneg, ">= 0"),
        "lambda_intra": Key(1.0, "float", _nonneg, ">= 0"),
        "lambda_inter": Key(0.0, "float", _nonneg, ">= 0"),
        "projection": Key("riemannian", "str", _one_of(("riemannian", "chain")), "riemannian or chain"),
        "init": Key("collapsed", "str", _one_of(("collapsed", "uniform")), "collapsed or uniform"),
        "jitter": Key(1e-3, "float", _nonneg, ">= 0"),
        "conflict_weight": Key(0.0, "float", _nonneg, ">= 0"),
        "conflict_spread": Key(1.0, "float", _nonneg, ">= 0"),
    },
    "gradcheck": {
        "B": Key(6, "int", _at_least(2), ">= 2"),
        "d": Key(4, "int", _at_least(2), ">= 2"),
        "M": Key(2, "int", _at_least(2), ">= 2"),
        "trials": Key(3, "int", _at_least(1), ">= 1"),
        "hinge_margin": Key(2.0, "float", _pos, "> 0"),
        "step": Key(1e-5, "float", _pos, "> 0"),
        "tol": Key(1e-5, "float", _pos, "> 0"),
        "debug_corrupt_gradient": Key(False, "bool"),
    },
    "robustness": {
        "kinds": Key(list(CORRUPTIONS), "strs", _all(_one_of(CORRUPTIONS)), f"entries in {CORRUPTIONS}"),
        "target": Key(0, "int", _nonneg, ">= 0"),
        "severities": Key([0.0, 0.25, 0.5, 0.75, 1.0], "floats", lambda v: bool(v) and min(v) >= 0, "nonempty, entries >= 0"),
        "seeds": Key([0, 1, 2, 3, 4], "ints", lambda v: bool(v) and min(v) >= 0, "nonempty, entries >= 0"),
        "noise_scale": Key(None, "float?", lambda v: v is None or v > 0, "> 0 or null"),
    },
    "diagnose": {
        "input": Key("", "str"),
        "ks": Key([1, 5], "ints", _all(_at_least(1)), "entries >= 1"),
        "normalize_sem": Key(True, "bool"),
    },
}


class _StrictLoader(yaml.SafeLoader):
    pass


def _mapping_no_duplicates(loader, node, deep=False):
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise ParseError(f"duplicate key {key!r} (line {key_node.start_mark.line + 1})", key=str(key))
        seen.add(key)
    return loader.construct_mapping(node, deep)


_StrictLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _mapping_no_duplicates)


def _coerce(name: str, spec: Key, v):
    def bad():
        return ParseError(f"{name}: expected {spec.kind}, got {type(v).__name__} {v!r}", key=name)

    is_int = isinstance(v, int) and not isinstance(v, bool)
    is_num = is_int or isinstance(v, float)
    if spec.kind == "int":
        if not is_int:
            raise bad()
        return int(v)
    if spec.kind in ("float", "float?"):
        if v is None and spec.kind == "float?":
            return None
        if not is_num:
            raise bad()
        return float(v)
    if spec.kind == "bool":
        if not isinstance(v, bool):
            raise bad()
        return v
    if spec.kind == "str":
        if not isinstance(v, str):
            raise bad()
        return v
    if not isinstance(v, list):
        raise bad()
    elem = {"ints": "int", "floats": "float", "strs": "str"}[spec.kind]
    return [_coerce(f"{name}[{i}]", Key(None, elem), x) for i, x in enumerate(v)]


def _materialize(schema: dict, given: dict, prefix: str = "") -> dict:
    if not isinstance(given, dict):
        raise ParseError(f"{prefix.rstrip('.') or 'config'} must be a mapping", key=prefix.rstrip(".") or None)
    for k in given:
        if k not in schema:
            name = f"{prefix}{k}"
            raise UnknownKey(f"unknown key {name!r}", key=name)
    out = {}
    for k, spec in schema.items():
        name = f"{prefix}{k}"
        if isinstance(spec, dict):
            out[k] = _materialize(spec, given.get(k) or {}, f"{name}.")
            continue
        v = _coerce(name, spec, given[k]) if k in given else copy.deepcopy(spec.default)
        if spec.check is not None and not spec.check(v):
            raise RangeError(f"{name} = {v!r} out of range ({spec.rule})", key=name)
        out[k] = v
    return out


def _cross_checks(v: dict):
    data = v["data"]
    for k in ("input_dims", "signal_strength", "nuisance_std"):
        if len(data[k]) != data["M"]:
            raise RangeError(f"data.{k} needs one entry per modality ({data['M']})", key=f"data.{k}")
    if v["robustness"]["target"] >= data["M"]:
        raise RangeError("robustness.target must name an existing modality", key="robustness.target")
    for kind in v["robustness"]["kinds"]:
        if kind in ("dropout", "missing") and max(v["robustness"]["severities"]) > 1:
            raise RangeError(f"{kind} severities are probabilities in [0, 1]", key="robustness.severities")


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def echo(self) -> dict:
        return copy.deepcopy(self.values)

    def with_seed(self, seed: int) -> "RunConfig":
        v = self.echo()
        v["seed"] = seed
        return from_dict(v)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        v = self.values
        keys = ("epochs", "batch_size", "lr", "dagr", "use_pareto", "beta", "lambda_intra", "lambda_inter", "tau", "t",
                "embed_dim", "hidden", "activation", "task_mode", "diag_every")
        return TrainConfig(**{k: copy.deepcopy(v[k]) for k in keys}, seed=v["seed"] if seed is None else seed)

    def data_config(self, seed: int | None = None) -> SyntheticDataConfig:
        return SyntheticDataConfig(**copy.deepcopy(self.values["data"]), seed=self.values["seed"] if seed is None else seed)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(**self.values["flow"], t=self.values["t"], tau=self.values["tau"], seed=self.values["seed"])

    def corruption_specs(self) -> list[CorruptionSpec]:
        r = self.values["robustness"]
        return [CorruptionSpec(k, r["target"], list(r["severities"]), r["noise_scale"] if k == "gaussian" else None)
                for k in r["kinds"]]


def from_dict(given: dict | None) -> RunConfig:
    values = _materialize(SCHEMA, given or {})
    _cross_checks(values)
    return RunConfig(values)


def parse_text(text: str) -> RunConfig:
    try:
        given = yaml.load(text, Loader=_StrictLoader)
    except ConfigError:
        raise
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML: {exc}") from exc
    return from_dict(given)


def parse_config(path: str | Path | None) -> RunConfig:
    """Read and validate a config file; ``None`` gives all defaults."""
    if path is None:
        return from_dict({})
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {str(path)!r}: {exc.strerror}", key=None) from exc
    return parse_text(text)


def defaults() -> dict:
    return from_dict({}).echo()
