"""Run configuration for the command-line front end (JSON file)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from .federation import Aggregator

DATA_SOURCES = ("synthetic_classification", "synthetic_regression", "csv")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class RunSpec:
    model: dict
    data: dict
    n_agents: int = 3
    dirichlet_alpha: float = 0.5
    noise_sigmas: Optional[tuple] = None
    caps: Any = "auto"
    cap_safety: float = 1.5
    weights: Optional[tuple] = None
    aggregator: str = "corefed"
    rounds: int = 200
    local_epochs: int = 1
    learning_rate: float = 0.1
    clients_per_round: Optional[int] = None
    batch_size: Optional[int] = None
    seed: int = 0
    out: str = "run"
    solver: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def out_dir(self) -> Path:
        p = Path(self.out)
        return p if p.is_absolute() else self.base_dir / p

    def with_overrides(self, seed=None, out=None, aggregator=None) -> "RunSpec":
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if out is not None:
            changes["out"] = str(Path(out).resolve())
        if aggregator is not None:
            changes["aggregator"] = aggregator
        spec = replace(self, **changes)
        spec.validate()
        return spec

    def validate(self) -> None:
        kind = self.model.get("kind")
        if kind not in ("linreg", "logreg", "mlp"):
            raise ConfigError("model.kind", f"expected linreg, logreg or mlp, got {kind!r}")
        if kind == "logreg" and not _num(self.model.get("alpha", 1.0)) >= 0:
            raise ConfigError("model.alpha", "must be >= 0")
        if kind == "mlp":
            dims = self.model.get("layer_dims")
            if not isinstance(dims, list) or len(dims) < 2 or not all(isinstance(d, int) and d >= 1 for d in dims):
                raise ConfigError("model.layer_dims", "need a list of >= 2 positive ints (hidden..., classes)")
        src = self.data.get("source")
        if src not in DATA_SOURCES:
            raise ConfigError("data.source", f"expected one of {DATA_SOURCES}, got {src!r}")
        if src == "csv":
            if "path" not in self.data or "target" not in self.data:
                raise ConfigError("data.path", "csv source needs 'path' and 'target'")
        else:
            for key in ("n", "dim"):
                if not isinstance(self.data.get(key), int) or self.data[key] < 1:
                    raise ConfigError(f"data.{key}", "must be a positive integer")
        if src == "synthetic_regression" and kind != "linreg":
            raise ConfigError("model.kind", "synthetic_regression data needs a linreg model")
        if src == "synthetic_classification" and kind == "linreg":
            raise ConfigError("model.kind", "classification data needs logreg or mlp")
        if not isinstance(self.n_agents, int) or self.n_agents < 1:
            raise ConfigError("n_agents", "must be a positive integer")
        if not _num(self.dirichlet_alpha) > 0:
            raise ConfigError("dirichlet_alpha", f"must be > 0, got {self.dirichlet_alpha!r}")
        if self.noise_sigmas is not None:
            if len(self.noise_sigmas) != self.n_agents or not all(_num(s) >= 0 for s in self.noise_sigmas):
                raise ConfigError("noise_sigmas", "need one non-negative value per agent")
        if self.weights is not None:
            if len(self.weights) != self.n_agents or not all(_num(w) > 0 for w in self.weights):
                raise ConfigError("weights", "need one positive value per agent")
        if isinstance(self.caps, str):
            if self.caps != "auto":
                raise ConfigError("caps", "must be 'auto', a number or a list")
        elif isinstance(self.caps, (list, tuple)):
            if len(self.caps) != self.n_agents or not all(_num(c) > 0 for c in self.caps):
                raise ConfigError("caps", "need one positive cap per agent")
        elif not _num(self.caps) > 0:
            raise ConfigError("caps", "must be > 0")
        if not _num(self.cap_safety) > 1:
            raise ConfigError("cap_safety", "must be > 1")
        try:
            Aggregator(self.aggregator)
        except ValueError:
            raise ConfigError("aggregator", f"expected fedavg, corefed or weighted-corefed, got {self.aggregator!r}")
        for name, lo in (("rounds", 0), ("local_epochs", 1)):
            v = getattr(self, name)
            if not isinstance(v, int) or v < lo:
                raise ConfigError(name, f"must be an integer >= {lo}")
        if not _num(self.learning_rate) > 0:
            raise ConfigError("learning_rate", "must be > 0")
        if self.clients_per_round is not None:
            if not isinstance(self.clients_per_round, int) or not 1 <= self.clients_per_round <= self.n_agents:
                raise ConfigError("clients_per_round", f"must be an integer in [1, {self.n_agents}]")
        if self.batch_size is not None and (not isinstance(self.batch_size, int) or self.batch_size < 1):
            raise ConfigError("batch_size", "must be a positive integer or null")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")


def _num(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        return float("nan")
    return float(v)


def load_runspec(path) -> RunSpec:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("<file>", "top level must be an object")
    known = {f for f in RunSpec.__dataclass_fields__ if f != "base_dir"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    for req in ("model", "data"):
        if not isinstance(raw.get(req), dict):
            raise ConfigError(req, "required object is missing")
    for key in ("noise_sigmas", "weights"):
        if raw.get(key) is not None:
            if not isinstance(raw[key], list):
                raise ConfigError(key, "must be a list")
            raw[key] = tuple(raw[key])
    if isinstance(raw.get("caps"), list):
        raw["caps"] = tuple(raw["caps"])
    spec = RunSpec(**raw, base_dir=path.resolve().parent)
    spec.validate()
    return spec
