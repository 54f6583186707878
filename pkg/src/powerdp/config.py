"""Run configuration: schema, presets, validation and consumed-key tracking.

Precedence, lowest first: schema defaults, a named preset, the config file,
then ``--set key=value`` overrides from the command line.
"""
from __future__ import annotations

import copy
import math
from pathlib import Path
from typing import Any

import yaml

from powerdp.errors import ConfigError

REQUIRED = object()

TASKS = ("digits", "blobs", "mnist", "quadratic")

# dotted path -> default
SCHEMA: dict[str, Any] = {
    "topology.preset": None,
    "topology.gains": None,
    "topology.degree_bound": None,
    "topology.r_policy": "max_degree_plus_one",
    "topology.allow_zero_self_loops": False,
    "task.name": "digits",
    "task.pool": 2,
    "task.mu": 1e-3,
    "task.radius": 10.0,
    "task.train_fraction": 0.8,
    "task.split_seed": 0,
    "task.batch_size": None,
    "task.num_samples": 600,
    "task.num_classes": 3,
    "task.dim": 2,
    "task.spread": 0.15,
    "task.data_seed": 0,
    "task.eig_range": [1.0, 3.0],
    "task.b_scale": 1.0,
    "task.mnist_images": None,
    "task.mnist_labels": None,
    "task.mnist_test_images": None,
    "task.mnist_test_labels": None,
    "privacy.eps_max": REQUIRED,
    "privacy.delta": REQUIRED,
    "privacy.grad_bound": None,
    "privacy.sigma.kind": "inv_sqrt",
    "privacy.sigma.scale": 10.0,
    "privacy.lr.kind": "inv_sqrt",
    "privacy.lr.scale": 1.0,
    "privacy.lr_mu": None,
    "power.p": 1.0,
    "allocation.theta_safety": 1.1,
    "allocation.tol": 1e-9,
    "allocation.max_rounds": 50,
    "run.epochs": 300,
    "run.seeds": [0],
    "run.init_std": 0.1,
    "run.resolve_each_epoch": False,
    "run.power_cap": False,
    "run.workers": 1,
    "run.replicate_workers": 1,
    "run.channel_uses": None,
    "baseline.enabled": False,
    "baseline.link_alpha": 0.5,
    "baseline.channel_uses": None,
    "baseline.match_epsilon": True,
    "output.name": "run",
}

_PRESET_COMMON = {
    "task": {"name": "digits", "pool": 2},
    "privacy": {"delta": 1e-5, "sigma": {"kind": "inv_sqrt", "scale": 10.0}, "lr": {"kind": "inv_sqrt", "scale": 1.0}},
    "power": {"p": 1.0},
    "run": {"epochs": 300, "seeds": [0, 1, 2]},
    "baseline": {"enabled": True, "link_alpha": 0.5, "match_epsilon": False},
}

PRESETS: dict[str, dict] = {
    "paper-eps1": {
        **copy.deepcopy(_PRESET_COMMON),
        "topology": {"preset": "h1"},
        "output": {"name": "paper-eps1"},
    },
    "paper-eps2": {
        **copy.deepcopy(_PRESET_COMMON),
        "topology": {"preset": "h2"},
        "output": {"name": "paper-eps2"},
    },
    "quadratic-noiseless": {
        "topology": {"preset": "h1"},
        "task": {"name": "quadratic", "dim": 5, "b_scale": 2.0, "data_seed": 0},
        "privacy": {"eps_max": math.inf, "delta": 1e-5, "lr_mu": "auto"},
        "run": {"epochs": 20000, "seeds": [0], "init_std": 1.0},
        "output": {"name": "quadratic-noiseless"},
    },
}
PRESETS["paper-eps1"]["privacy"]["eps_max"] = 1.0
PRESETS["paper-eps2"]["privacy"]["eps_max"] = 2.0


def flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict) and not _is_leaf(path):
            out.update(flatten(value, path + "."))
        else:
            out[path] = value
    return out


def _is_leaf(path: str) -> bool:
    return path in SCHEMA


def unflatten(flat: dict[str, Any]) -> dict:
    tree: dict = {}
    for path, value in flat.items():
        node = tree
        *parents, leaf = path.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return tree


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=value`` with the value read as YAML (so 2, 1e-5, .inf, [0, 1] work)."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    return key, yaml.safe_load(raw) if raw.strip() else None


def load_document(source: str | Path | None) -> dict:
    """Read a YAML config file, or expand a bare preset name."""
    if source is None:
        return {}
    path = Path(source)
    if not path.exists():
        if str(source) in PRESETS:
            return {"preset": str(source)}
        raise ConfigError("config", f"no config file or preset named {str(source)!r}")
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level of the config file must be a mapping")
    return doc


def resolve(document: dict, overrides: list[str] | tuple = ()) -> "RunConfig":
    """Merge defaults, preset, document and overrides, then validate."""
    document = copy.deepcopy(document)
    preset = document.pop("preset", None)
    flat = {k: v for k, v in SCHEMA.items()}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        flat.update(flatten(PRESETS[preset]))
    layers = [flatten(document)] + [dict([parse_override(o)]) for o in overrides]
    for layer in layers:
        for key, value in layer.items():
            if key not in SCHEMA:
                raise ConfigError(key, "unknown configuration key")
            flat[key] = value
    for key, value in flat.items():
        if value is REQUIRED or (value is None and SCHEMA[key] is REQUIRED):
            raise ConfigError(key, "required field missing")
    _validate(flat)
    return RunConfig(flat, preset)


def _number(flat, key, *, positive=False, allow_inf=False, integer=False, minimum=None):
    value = flat[key]
    if isinstance(value, str) and allow_inf and value.strip().lower() in ("inf", "+inf", ".inf", "infinity"):
        value = math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if integer and (not float(value).is_integer()):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if math.isnan(value) or (math.isinf(value) and not allow_inf):
        raise ConfigError(key, "must be finite")
    if positive and not value > 0:
        raise ConfigError(key, "must be positive")
    if minimum is not None and value < minimum:
        raise ConfigError(key, f"must be >= {minimum}")
    flat[key] = int(value) if integer else float(value)


def _optional(flat, key, **kw):
    if flat[key] is not None:
        _number(flat, key, **kw)


def _flag(flat, key):
    if not isinstance(flat[key], bool):
        raise ConfigError(key, f"expected true/false, got {flat[key]!r}")


def _validate(flat: dict) -> None:
    topo_preset, gains = flat["topology.preset"], flat["topology.gains"]
    if (topo_preset is None) == (gains is None):
        raise ConfigError("topology.preset", "set exactly one of topology.preset and topology.gains")
    _optional(flat, "topology.degree_bound", integer=True, minimum=1)
    _flag(flat, "topology.allow_zero_self_loops")

    if flat["task.name"] not in TASKS:
        raise ConfigError("task.name", f"expected one of {TASKS}, got {flat['task.name']!r}")
    for key in ("task.pool", "task.num_samples", "task.num_classes", "task.dim"):
        _number(flat, key, integer=True, minimum=1)
    for key in ("task.split_seed", "task.data_seed"):
        _number(flat, key, integer=True, minimum=0)
    _number(flat, "task.mu", minimum=0.0)
    for key in ("task.radius", "task.spread", "task.b_scale"):
        _number(flat, key, positive=True)
    _number(flat, "task.train_fraction", positive=True)
    if not flat["task.train_fraction"] < 1:
        raise ConfigError("task.train_fraction", "must lie in (0, 1)")
    _optional(flat, "task.batch_size", integer=True, minimum=1)
    eig = flat["task.eig_range"]
    if not (isinstance(eig, (list, tuple)) and len(eig) == 2 and 0 < eig[0] <= eig[1]):
        raise ConfigError("task.eig_range", "expected [low, high] with 0 < low <= high")
    flat["task.eig_range"] = [float(eig[0]), float(eig[1])]
    if flat["task.name"] == "mnist":
        for key in ("task.mnist_images", "task.mnist_labels"):
            if not flat[key]:
                raise ConfigError(key, "required for the mnist task")

    _number(flat, "privacy.eps_max", positive=True, allow_inf=True)
    _number(flat, "privacy.delta", positive=True)
    if not flat["privacy.delta"] < 1:
        raise ConfigError("privacy.delta", "must lie in (0, 1)")
    _optional(flat, "privacy.grad_bound", positive=True)
    for which in ("sigma", "lr"):
        kind_key = f"privacy.{which}.kind"
        if flat[kind_key] not in ("const", "inv_sqrt", "inv_t"):
            raise ConfigError(kind_key, f"expected const, inv_sqrt or inv_t, got {flat[kind_key]!r}")
        _number(flat, f"privacy.{which}.scale", positive=True)
    if flat["privacy.lr_mu"] != "auto":
        _optional(flat, "privacy.lr_mu", positive=True)

    p = flat["power.p"]
    if isinstance(p, (list, tuple)):
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 for v in p):
            raise ConfigError("power.p", "every power must be a positive number")
        flat["power.p"] = [float(v) for v in p]
    else:
        _number(flat, "power.p", positive=True)

    _number(flat, "allocation.theta_safety", minimum=1.0)
    _number(flat, "allocation.tol", positive=True)
    _number(flat, "allocation.max_rounds", integer=True, minimum=1)

    _number(flat, "run.epochs", integer=True, minimum=1)
    seeds = flat["run.seeds"]
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not (isinstance(seeds, (list, tuple)) and seeds
            and all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
        raise ConfigError("run.seeds", "expected a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("run.seeds", "seeds must be distinct")
    flat["run.seeds"] = list(seeds)
    _number(flat, "run.init_std", minimum=0.0)
    for key in ("run.resolve_each_epoch", "run.power_cap", "baseline.enabled", "baseline.match_epsilon"):
        _flag(flat, key)
    _number(flat, "run.workers", integer=True, minimum=1)
    _number(flat, "run.replicate_workers", integer=True, minimum=1)
    _optional(flat, "run.channel_uses", integer=True, minimum=1)
    _optional(flat, "baseline.channel_uses", integer=True, minimum=1)
    _number(flat, "baseline.link_alpha", positive=True)
    if not flat["baseline.link_alpha"] < 1:
        raise ConfigError("baseline.link_alpha", "must lie in (0, 1) so every link carries noise")
    name = flat["output.name"]
    if not isinstance(name, str) or not name or "/" in name:
        raise ConfigError("output.name", "expected a plain directory name")


class RunConfig:
    """Validated, flat view of a run configuration.

    Every :meth:`get` records the key, so the keys a run actually consumed
    can be compared with the echo written to the summary.
    """

    def __init__(self, flat: dict[str, Any], preset: str | None = None):
        self._flat = flat
        self.preset = preset
        self.consumed: set[str] = set()

    def get(self, key: str) -> Any:
        if key not in self._flat:
            raise KeyError(key)
        self.consumed.add(key)
        return copy.deepcopy(self._flat[key])

    __getitem__ = get

    def echo(self) -> dict:
        """Nested copy of every resolved field (the provenance record)."""
        tree = unflatten(self._flat)
        tree["preset"] = self.preset
        return tree

    def flat(self) -> dict[str, Any]:
        return copy.deepcopy(self._flat)
