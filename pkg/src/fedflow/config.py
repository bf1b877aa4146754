"""YAML experiment configs.

Unknown keys and bad values are reported with the line they appear on::

    experiment: {name: moons, seed: 0}
    data:
      source: {kind: eight_gaussians}
      target: {kind: two_moons}
      n_clients: 2
      partition: split
    training: {coupling: global_ot, rounds: 10000}
    eval: {nfe: [2, 5, 10, 50], n_eval: 2048}
    output: {dir: runs/moons}
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .data import distribution_from_dict, distribution_to_dict
from .errors import ConfigError
from .federation import FederationSpec
from .semidual import CTransformCfg

# section -> key -> FederationSpec field (None: handled outside FederationSpec)
_SCHEMA: dict[str, dict[str, str | None]] = {
    "experiment": {"name": None, "seed": "seed"},
    "data": {
        "source": "source",
        "target": "target",
        "n_clients": "n_clients",
        "weights": "weights",
        "partition": "partition",
        "alpha": "alpha",
        "samples_per_client": "samples_per_client",
    },
    "training": {
        "rounds": "rounds",
        "batch_size": "batch_size",
        "coupling": "coupling",
        "lr_theta": "lr_theta",
        "lr_phi": "lr_phi",
        "dual_every": "dual_every",
        "ot_solver": "ot_solver",
        "sinkhorn_epsilon": "sinkhorn_epsilon",
        "ctransform": "ctransform",
    },
    "model": {"field": None, "potential": None},
    "eval": {"nfe": None, "n_eval": None, "scheme": None, "every": None, "n_target": None},
    "output": {"dir": None, "checkpoint_every": None, "trajectories": None},
}
_NET_KEYS = {"hidden", "activation"}
_CTRANSFORM_KEYS = set(CTransformCfg.__dataclass_fields__)
_DIST_KEYS = {"kind", "mean", "var", "radius", "std", "noise_std", "scale", "low", "high"}


@dataclass(frozen=True)
class EvalCfg:
    nfe: tuple[int, ...] = (2, 5, 10, 50)
    n_eval: int = 2048
    scheme: str = "euler"
    every: int = 0  # 0 disables periodic evaluation
    n_target: int = 2048

    def __post_init__(self):
        if not self.nfe:
            raise ConfigError("eval.nfe must list at least one NFE")
        if any(int(n) < 1 for n in self.nfe) or self.n_eval < 1 or self.n_target < 1 or self.every < 0:
            raise ConfigError("eval sizes must be positive")


@dataclass(frozen=True)
class OutputCfg:
    dir: str = "runs/default"
    checkpoint_every: int = 0
    trajectories: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    spec: FederationSpec
    name: str = "experiment"
    eval: EvalCfg = field(default_factory=EvalCfg)
    output: OutputCfg = field(default_factory=OutputCfg)

    def to_dict(self) -> dict:
        s = self.spec
        return {
            "experiment": {"name": self.name, "seed": s.seed},
            "data": {
                "source": distribution_to_dict(s.source),
                "target": distribution_to_dict(s.target),
                "n_clients": s.n_clients,
                "weights": None if s.weights is None else list(s.weights),
                "partition": s.partition,
                "alpha": s.alpha,
                "samples_per_client": s.samples_per_client,
            },
            "training": {
                "rounds": s.rounds,
                "batch_size": s.batch_size,
                "coupling": s.coupling,
                "lr_theta": s.lr_theta,
                "lr_phi": s.lr_phi,
                "dual_every": s.dual_every,
                "ot_solver": s.ot_solver,
                "sinkhorn_epsilon": s.sinkhorn_epsilon,
                "ctransform": asdict(s.ctransform),
            },
            "model": {
                "field": {"hidden": list(s.field_hidden), "activation": s.field_activation},
                "potential": {"hidden": list(s.potential_hidden), "activation": s.potential_activation},
            },
            "eval": {**asdict(self.eval), "nfe": list(self.eval.nfe)},
            "output": asdict(self.output),
        }

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; output paths are excluded."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _where(node: yaml.Node, source: str) -> str:
    return f"{source}:{node.start_mark.line + 1}"


def _mapping(node: yaml.Node, what: str, source: str) -> list[tuple[str, yaml.Node, yaml.Node]]:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{_where(node, source)}: {what} must be a mapping")
    out, seen = [], set()
    for k, v in node.value:
        key = k.value
        if key in seen:
            raise ConfigError(f"{_where(k, source)}: duplicate key '{key}' in {what}")
        seen.add(key)
        out.append((key, k, v))
    return out


def _check_keys(node, allowed, what, source):
    for key, knode, _ in _mapping(node, what, source):
        if key not in allowed:
            raise ConfigError(f"{_where(knode, source)}: unknown key '{key}' in {what}")


def _validate(root: yaml.Node, source: str) -> None:
    for section, snode_k, snode in _mapping(root, "config", source):
        if section not in _SCHEMA:
            raise ConfigError(f"{_where(snode_k, source)}: unknown key '{section}' at top level")
        for key, knode, vnode in _mapping(snode, section, source):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{_where(knode, source)}: unknown key '{key}' in {section}")
            if section == "data" and key in ("source", "target"):
                _check_keys(vnode, _DIST_KEYS, f"data.{key}", source)
            elif section == "model":
                _check_keys(vnode, _NET_KEYS, f"model.{key}", source)
            elif section == "training" and key == "ctransform":
                _check_keys(vnode, _CTRANSFORM_KEYS, "training.ctransform", source)


def _lines(root: yaml.Node) -> dict[tuple[str, ...], int]:
    out = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                out[path + (k.value,)] = k.start_mark.line + 1
                walk(v, path + (k.value,))

    walk(root, ())
    return out


def _build(raw: dict, lines: dict, source: str) -> ExperimentConfig:
    def section(name):
        return raw.get(name) or {}

    def at(*path):
        ln = lines.get(path) or lines.get(path[:1])
        return f"{source}:{ln}" if ln else source

    kw: dict[str, Any] = {}
    for sec, keys in _SCHEMA.items():
        for key, target in keys.items():
            if target is None or key not in section(sec):
                continue
            val = section(sec)[key]
            try:
                if key in ("source", "target"):
                    val = distribution_from_dict(val)
                elif key == "ctransform":
                    val = CTransformCfg(**val)
                elif key == "weights":
                    val = None if val is None else tuple(float(w) for w in val)
            except (ConfigError, TypeError, ValueError) as exc:
                raise ConfigError(f"{at(sec, key)}: {sec}.{key}: {exc}") from exc
            kw[target] = val
    for role in ("field", "potential"):
        net = section("model").get(role) or {}
        if "hidden" in net:
            kw[f"{role}_hidden"] = tuple(int(h) for h in net["hidden"])
        if "activation" in net:
            kw[f"{role}_activation"] = net["activation"]
    for req in ("source", "target"):
        if req not in kw:
            raise ConfigError(f"{source}: data.{req} is required")
    try:
        spec = FederationSpec(**kw)
        spec.field_arch()
        spec.potential_arch()
    except (ConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    try:
        ev = dict(section("eval"))
        if "nfe" in ev:
            ev["nfe"] = tuple(int(n) for n in (ev["nfe"] or ()))
        evcfg = EvalCfg(**ev)
    except (ConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"{at('eval')}: eval: {exc}") from exc
    out = OutputCfg(**section("output"))
    return ExperimentConfig(spec, str(section("experiment").get("name", "experiment")), evcfg, out)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from exc
    if root is None:
        raise ConfigError(f"{source}: empty config")
    _validate(root, source)
    return _build(raw, _lines(root), source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def apply_env(cfg: ExperimentConfig, env=os.environ) -> ExperimentConfig:
    """Apply the FFM_OUTPUT_DIR and FFM_SEED overrides."""
    if "FFM_SEED" in env:
        try:
            seed = int(env["FFM_SEED"])
        except ValueError as exc:
            raise ConfigError(f"FFM_SEED must be an integer, got {env['FFM_SEED']!r}") from exc
        cfg = replace(cfg, spec=replace(cfg.spec, seed=seed))
    if env.get("FFM_OUTPUT_DIR"):
        cfg = replace(cfg, output=replace(cfg.output, dir=env["FFM_OUTPUT_DIR"]))
    return cfg
