"""Round-based client/server simulation with FedAvg and CoreFed aggregation."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import models
from .errors import EmptyRound, InvalidK, InvalidParams, NonPositiveUtility
from .models import ModelSpec
from .utility import DEFAULT_CONFIG, AgentProfile, UtilityConfig, utility_of_loss

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class Aggregator(str, enum.Enum):
    FEDAVG = "fedavg"
    COREFED = "corefed"
    WEIGHTED_COREFED = "weighted-corefed"


@dataclass(frozen=True)
class RoundConfig:
    total_rounds: int = 100
    local_epochs: int = 1
    learning_rate: float = 0.1
    clients_per_round: Optional[int] = None  # None selects every agent
    batch_size: Optional[int] = None  # None means full batch
    aggregator: Aggregator = Aggregator.COREFED
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "aggregator", Aggregator(self.aggregator))
        if self.total_rounds < 0:
            raise InvalidParams("total_rounds must be >= 0")
        if self.local_epochs < 1:
            raise InvalidParams("local_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidParams("learning_rate must be > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidParams("batch_size must be >= 1")
        if self.seed < 0:
            raise InvalidParams("seed must be >= 0")


@dataclass
class ClientUpdate:
    agent_id: int
    delta: np.ndarray
    start_loss: float
    sample_count: int


@dataclass
class RoundRecord:
    round: int
    selected: List[int]
    agent_ids: List[int]
    losses: List[float]
    utilities: List[float]
    objective: Optional[float]
    aggregator: str
    theta: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "round": self.round,
            "aggregator": self.aggregator,
            "selected": list(self.selected),
            "agent_ids": list(self.agent_ids),
            "losses": [float(v) for v in self.losses],
            "utilities": [float(v) for v in self.utilities],
            "objective": self.objective,
        }
        if self.theta is not None:
            out["theta"] = [float(v) for v in self.theta]
        return out


@dataclass
class TrainingTrace:
    aggregator: str
    records: List[RoundRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in self.records)

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read_jsonl(cls, path) -> "TrainingTrace":
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                d = json.loads(line)
                theta = np.array(d["theta"]) if "theta" in d else None
                records.append(RoundRecord(d["round"], d["selected"], d["agent_ids"], d["losses"],
                                           d["utilities"], d["objective"], d["aggregator"], theta))
        agg = records[0].aggregator if records else ""
        return cls(agg, records)


def select_clients(n_agents: int, K: int, round_index: int, seed: int) -> List[int]:
    """Uniform K-subset without replacement, fixed by ``(seed, round_index)``.

    Each agent draws a uniform key from a generator seeded with
    ``[seed, round_index]``; the K smallest keys win.
    """
    if not 1 <= K <= n_agents:
        raise InvalidK(f"clients_per_round must lie in [1, {n_agents}], got {K}")
    if K == n_agents:
        return list(range(n_agents))
    keys = np.random.default_rng([seed, round_index]).random(n_agents)
    return sorted(int(i) for i in np.argsort(keys, kind="stable")[:K])


def local_update(
    agent: AgentProfile,
    spec: ModelSpec,
    theta_t,
    cfg: RoundConfig,
    round_index: int = 0,
    ucfg: UtilityConfig = DEFAULT_CONFIG,
) -> ClientUpdate:
    """E epochs of gradient descent starting from the broadcast ``theta_t``.

    The reported loss is taken at ``theta_t`` before any local step and, for
    the CoreFed kinds, must stay below the agent's cap.  The displacement is
    accumulated directly so that one full-batch epoch yields exactly
    ``-lr * grad``.
    """
    theta_t = np.asarray(theta_t, dtype=np.float64)
    data = agent.dataset
    start_loss = models.loss(spec, theta_t, data)
    if cfg.aggregator is not Aggregator.FEDAVG:
        utility_of_loss(start_loss, agent.cap, ucfg, agent_id=agent.id)
    lr = cfg.learning_rate
    delta = np.zeros_like(theta_t)
    n = len(data)
    for epoch in range(cfg.local_epochs):
        if cfg.batch_size is None or cfg.batch_size >= n:
            delta -= lr * models.loss_gradient(spec, theta_t + delta, data)
            continue
        order = np.random.default_rng([cfg.seed, agent.id, round_index, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data.subset(order[start:start + cfg.batch_size])
            delta -= lr * models.loss_gradient(spec, theta_t + delta, batch)
    return ClientUpdate(agent.id, delta, start_loss, n)


def aggregate(
    theta_t,
    updates: Sequence[ClientUpdate],
    agents: Sequence[AgentProfile],
    kind: Aggregator,
    ucfg: UtilityConfig = DEFAULT_CONFIG,
) -> np.ndarray:
    """Server step.  Updates are summed in ascending agent id.

    * fedavg: ``theta + sum_s (n_s / N) delta_s``
    * corefed: ``theta + (1/|S|) sum_s delta_s / (M_s - L_s)``
    * weighted-corefed: ``theta + sum_s w_s delta_s / (M_s - L_s) / (mean_w |S|)``
    """
    kind = Aggregator(kind)
    if not updates:
        raise EmptyRound("aggregate needs at least one client update")
    theta_t = np.asarray(theta_t, dtype=np.float64)
    by_id = {a.id: a for a in agents}
    ups = sorted(updates, key=lambda u: u.agent_id)
    acc = np.zeros_like(theta_t)
    if kind is Aggregator.FEDAVG:
        total = sum(u.sample_count for u in ups)
        for u in ups:
            acc += (u.sample_count / total) * u.delta
        return theta_t + acc

    weighted = kind is Aggregator.WEIGHTED_COREFED
    ws = [by_id[u.agent_id].weight if weighted else 1.0 for u in ups]
    for u, w in zip(ups, ws):
        a = by_id[u.agent_id]
        util = utility_of_loss(u.start_loss, a.cap, ucfg, agent_id=a.id)
        acc += (w * u.delta) / util
    mean_w = sum(ws) / len(ws)
    return theta_t + acc / (mean_w * len(ups))


def _log_state(spec, theta, agents, weighted):
    losses = [models.loss(spec, theta, a.dataset) for a in agents]
    utils = [a.cap - l for a, l in zip(agents, losses)]
    if all(u > 0 for u in utils):
        objective = float(sum((a.weight if weighted else 1.0) * (np.log(u) + a.log_offset)
                              for a, u in zip(agents, utils)))
    else:
        objective = None
    return losses, utils, objective


def run_rounds(
    agents: Sequence[AgentProfile],
    spec: ModelSpec,
    cfg: RoundConfig,
    theta_0,
    ucfg: UtilityConfig = DEFAULT_CONFIG,
    keep_checkpoints: bool = False,
    executor=None,
):
    """Run ``cfg.total_rounds`` rounds of select, local update, aggregate.

    Every round logs all agents' losses and utilities at the round's starting
    model, selected or not.  ``executor`` (a ``concurrent.futures`` executor)
    may run the clients of a round in parallel; the result does not depend on
    completion order.  Returns ``(theta_T, trace)``.
    """
    for a in agents:
        if a.cap is None:
            raise InvalidParams(f"agent {a.id} has no cap; calibrate caps before training")
    theta = np.array(theta_0, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise InvalidParams(f"theta_0 has shape {theta.shape}, expected ({spec.n_params},)")
    n = len(agents)
    K = n if cfg.clients_per_round is None else cfg.clients_per_round
    weighted = cfg.aggregator is Aggregator.WEIGHTED_COREFED
    trace = TrainingTrace(cfg.aggregator.value)
    for t in range(cfg.total_rounds):
        try:
            losses, utils, objective = _log_state(spec, theta, agents, weighted)
            chosen = [agents[i] for i in select_clients(n, K, t, cfg.seed)]

            def work(agent, theta=theta, t=t):
                return local_update(agent, spec, theta, cfg, t, ucfg)

            updates = list(executor.map(work, chosen)) if executor is not None else [work(a) for a in chosen]
            new_theta = aggregate(theta, updates, agents, cfg.aggregator, ucfg)
        except NonPositiveUtility as exc:
            exc.round_index = t
            raise
        trace.records.append(RoundRecord(
            t, [a.id for a in chosen], [a.id for a in agents], losses, utils, objective,
            cfg.aggregator.value, theta.copy() if keep_checkpoints else None,
        ))
        theta = new_theta
    return theta, trace


def save_checkpoint(path, theta, spec: ModelSpec, round_index: int, **extra) -> None:
    """JSON checkpoint: a small header plus the flat parameter array."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "spec": spec.to_dict(),
        "dims": spec.n_params,
        "round": int(round_index),
        **extra,
        "theta": [float(v) for v in np.asarray(theta)],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    """Returns ``(theta, spec, header)``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    theta = np.array(doc.pop("theta"), dtype=np.float64)
    spec = ModelSpec.from_dict(doc["spec"])
    if theta.shape != (spec.n_params,):
        raise InvalidParams(f"checkpoint {path} has {theta.size} values, spec needs {spec.n_params}")
    return theta, spec, doc
