"""Loss-to-utility mapping and the Nash-welfare objective.

An agent's utility is ``M_i - loss_i(theta)`` for a per-agent cap ``M_i``.
The welfare objective is ``sum_i w_i * log u_i(theta)``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import models
from .errors import EmptyProbeSet, InvalidParams, NonPositiveUtility
from .models import LabeledDataset, ModelSpec

logger = logging.getLogger(__name__)

CAP_FLOOR = 1.0


class OnViolation(str, enum.Enum):
    ERROR = "error"
    AUTO_RESCALE = "auto_rescale"


@dataclass(frozen=True)
class UtilityConfig:
    epsilon: float = 1e-6
    on_violation: OnViolation = OnViolation.ERROR
    # multiplier applied to the worst probe loss by calibrate_caps
    safety: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "on_violation", OnViolation(self.on_violation))
        if not 0.0 < self.epsilon < 1e-5:
            raise InvalidParams(f"epsilon must lie in (0, 1e-5), got {self.epsilon}")
        if not self.safety > 1.0:
            raise InvalidParams(f"safety factor must exceed 1, got {self.safety}")


DEFAULT_CONFIG = UtilityConfig()


@dataclass(frozen=True)
class AgentProfile:
    id: int
    dataset: LabeledDataset
    cap: Optional[float] = None
    weight: float = 1.0
    # constant added to this agent's log-utility term; moves the objective value only
    log_offset: float = 0.0

    def __post_init__(self):
        if not self.weight > 0:
            raise InvalidParams(f"agent {self.id}: weight must be > 0, got {self.weight}")
        if self.cap is not None and not self.cap > 0:
            raise InvalidParams(f"agent {self.id}: cap must be > 0, got {self.cap}")


def with_caps(agents: Sequence[AgentProfile], caps) -> list:
    return [replace(a, cap=float(m)) for a, m in zip(agents, caps)]


def with_weights(agents: Sequence[AgentProfile], weights) -> list:
    return [replace(a, weight=float(w)) for a, w in zip(agents, weights)]


def rescaled_cap(loss: float, cfg: UtilityConfig = DEFAULT_CONFIG) -> float:
    """Smallest cap that puts ``loss`` back above the utility floor."""
    eps = cfg.epsilon
    return (1.0 + eps) * loss / (1.0 - eps)


def utility_of_loss(loss: float, cap: float, cfg: UtilityConfig = DEFAULT_CONFIG, agent_id=None) -> float:
    if not cap > 0:
        raise InvalidParams(f"cap must be > 0, got {cap}")
    eps = cfg.epsilon
    if loss >= cap * (1.0 - eps):
        if cfg.on_violation is OnViolation.ERROR:
            raise NonPositiveUtility(
                f"loss {loss:.6g} reaches cap {cap:.6g} (utility floor M*eps)", agent_id=agent_id
            )
        new_cap = rescaled_cap(loss, cfg)
        logger.warning("raising cap %.6g -> %.6g (agent %s); this changes the objective", cap, new_cap, agent_id)
        cap = new_cap
    return cap - loss


def _require_caps(agents):
    for a in agents:
        if a.cap is None:
            raise InvalidParams(f"agent {a.id} has no cap; run calibrate_caps first")


def agent_losses(spec: ModelSpec, theta, agents: Sequence[AgentProfile]) -> np.ndarray:
    return np.array([models.loss(spec, theta, a.dataset) for a in agents])


def agent_utilities(spec: ModelSpec, theta, agents: Sequence[AgentProfile], cfg: UtilityConfig = DEFAULT_CONFIG) -> np.ndarray:
    _require_caps(agents)
    return np.array([
        utility_of_loss(models.loss(spec, theta, a.dataset), a.cap, cfg, agent_id=a.id) for a in agents
    ])


def _weights(agents, weights_on):
    return np.array([a.weight if weights_on else 1.0 for a in agents])


def nash_value_and_gradient(
    spec: ModelSpec,
    theta,
    agents: Sequence[AgentProfile],
    weights_on: bool = False,
    cfg: UtilityConfig = DEFAULT_CONFIG,
    need_grad: bool = True,
):
    """Welfare ``sum w_i log u_i`` and its gradient ``sum w_i (-grad loss_i) / u_i``.

    Terms are accumulated in the order of ``agents``.
    """
    _require_caps(agents)
    theta = np.asarray(theta, dtype=np.float64)
    value = 0.0
    grad = np.zeros(spec.n_params) if need_grad else None
    for a in agents:
        w = a.weight if weights_on else 1.0
        loss_i, g_i = models.loss_and_gradient(spec, theta, a.dataset, need_grad=need_grad)
        u = utility_of_loss(loss_i, a.cap, cfg, agent_id=a.id)
        value += w * (np.log(u) + a.log_offset)
        if need_grad:
            grad += (w * -g_i) / u
    return value, grad


def nash_welfare(spec, theta, agents, weights_on: bool = False, cfg: UtilityConfig = DEFAULT_CONFIG) -> float:
    return nash_value_and_gradient(spec, theta, agents, weights_on, cfg, need_grad=False)[0]


def nash_gradient(spec, theta, agents, weights_on: bool = False, cfg: UtilityConfig = DEFAULT_CONFIG) -> np.ndarray:
    return nash_value_and_gradient(spec, theta, agents, weights_on, cfg)[1]


def calibrate_caps(
    spec: ModelSpec,
    agents: Sequence[AgentProfile],
    probe_thetas,
    cfg: UtilityConfig = DEFAULT_CONFIG,
) -> np.ndarray:
    """Per-agent caps from the worst loss seen over a set of probe predictors.

    ``M_i = safety * max_probe loss_i``, floored at 1.0 when every probe loss
    is zero.  A cap already set on an agent is never lowered.
    """
    probes = list(probe_thetas)
    if not probes:
        raise EmptyProbeSet("calibrate_caps needs at least one probe predictor")
    caps = np.empty(len(agents))
    for k, a in enumerate(agents):
        worst = max(models.loss(spec, t, a.dataset) for t in probes)
        m = cfg.safety * worst if worst > 0 else CAP_FLOOR
        if a.cap is not None:
            m = max(m, a.cap)
        caps[k] = m
    return caps
