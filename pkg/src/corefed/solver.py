"""Centralized maximization of the Nash-welfare objective.

Projected gradient ascent over an L2 ball (or the probability simplex for
``simplex`` models) with Barzilai-Borwein trial steps and Armijo backtracking.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import models
from .errors import InvalidParams, NonPositiveUtility, NotConverged, NumericOverflow
from .models import ModelKind, ModelSpec
from .utility import DEFAULT_CONFIG, AgentProfile, OnViolation, UtilityConfig, agent_utilities, nash_value_and_gradient

logger = logging.getLogger(__name__)

SIMPLEX = "simplex"


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 20000
    grad_tol: float = 1e-8
    # radius of the L2-ball domain; math.inf means unconstrained
    domain_radius: float = 1e3
    shrink: float = 0.5
    sufficient_increase: float = 1e-4
    seed: int = 0
    initial_step: float = 1.0
    max_backtracks: int = 60
    # consecutive no-gain iterations tolerated once progress is below float resolution
    flat_patience: int = 50

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise InvalidParams("grad_tol must be > 0")
        if not self.domain_radius > 0:
            raise InvalidParams("domain_radius must be > 0 or inf")
        if not 0 < self.shrink < 1 or not 0 < self.sufficient_increase < 1:
            raise InvalidParams("armijo parameters must lie in (0, 1)")

    @classmethod
    def for_spec(cls, spec: ModelSpec, **overrides) -> "SolverConfig":
        """Defaults with the looser first-order tolerance used for mlp models."""
        if spec.kind is ModelKind.MLP:
            overrides.setdefault("grad_tol", 1e-4)
        return cls(**overrides)


@dataclass
class SolveResult:
    theta_star: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    converged: bool
    utilities: np.ndarray = field(default=None, repr=False)


def project_ball(theta, radius: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if math.isinf(radius):
        return theta.copy()
    norm = float(np.linalg.norm(theta))
    # slack of a few ulps so that projecting a projected point is a no-op
    if norm <= radius * (1.0 + 4.0 * np.finfo(float).eps):
        return theta.copy()
    return theta * (radius / norm)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = 1} by the sorted-threshold rule."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v, kind="stable")[::-1]
    css = np.cumsum(u)
    j = np.arange(1, v.size + 1)
    rho = np.nonzero(u - (css - 1.0) / j > 0)[0][-1]
    tau = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def project(theta, domain) -> np.ndarray:
    """Project onto ``domain``: ``"simplex"``, a ball radius, or None (identity)."""
    if domain is None:
        return np.asarray(theta, dtype=np.float64).copy()
    if isinstance(domain, str):
        if domain != SIMPLEX:
            raise InvalidParams(f"unknown domain {domain!r}")
        return project_simplex(theta)
    if not domain > 0:
        raise InvalidParams(f"ball radius must be > 0, got {domain}")
    return project_ball(theta, float(domain))


def domain_for(spec: ModelSpec, cfg: SolverConfig):
    return SIMPLEX if spec.kind is ModelKind.SIMPLEX else cfg.domain_radius


def projected_gradient_norm(theta, grad, domain) -> float:
    """Norm of the unit-step gradient map ``P(theta + grad) - theta``."""
    return float(np.linalg.norm(project(theta + grad, domain) - theta))


def _default_start(spec: ModelSpec, cfg: SolverConfig):
    if spec.kind is ModelKind.MLP:
        # all-zero weights leave the hidden units permanently symmetric
        return models.init_params(spec, seed=cfg.seed)
    return np.zeros(spec.n_params)


def maximize_nash(
    agents: Sequence[AgentProfile],
    spec: ModelSpec,
    cfg: SolverConfig = SolverConfig(),
    weights_on: bool = False,
    theta0=None,
    ucfg: UtilityConfig = DEFAULT_CONFIG,
    strict: bool = False,
) -> SolveResult:
    """Maximize ``sum_i w_i log u_i(theta)`` over the model's domain.

    Steps that leave the feasible region (any utility at or below ``M * eps``)
    or fail the Armijo test are shrunk.  If the iteration budget runs out the
    last iterate comes back with ``converged=False``; with ``strict=True``
    :class:`NotConverged` is raised instead, carrying that result.
    """
    ucfg = replace(ucfg, on_violation=OnViolation.ERROR)
    domain = domain_for(spec, cfg)
    theta = project(_default_start(spec, cfg) if theta0 is None else theta0, domain)

    def evaluate(t):
        return nash_value_and_gradient(spec, t, agents, weights_on, ucfg)

    val, grad = evaluate(theta)
    step = cfg.initial_step
    c = cfg.sufficient_increase
    it = 0
    flat = 0
    res = projected_gradient_norm(theta, grad, domain)
    while res > cfg.grad_tol and it < cfg.max_iters:
        it += 1
        t = step
        accepted = False
        for _ in range(cfg.max_backtracks):
            cand = project(theta + t * grad, domain)
            d = cand - theta
            try:
                cval, cgrad = evaluate(cand)
            except (NonPositiveUtility, NumericOverflow):
                t *= cfg.shrink
                continue
            demand = c * float(grad @ d)
            # below float resolution the sufficient-increase test is noise; ask only for no decrease
            if cval >= val + demand or (demand <= 16 * np.spacing(abs(val)) and cval >= val):
                accepted = True
                flat = flat + 1 if cval == val else 0
                break
            t *= cfg.shrink
        if not accepted:
            logger.debug("line search stalled at iteration %d (residual %.3g)", it, res)
            break
        if flat > cfg.flat_patience:
            # the objective can no longer resolve progress
            logger.debug("objective flat at float resolution from iteration %d (residual %.3g)", it - flat, res)
            break
        s = cand - theta
        sy = -float(s @ (cgrad - grad))
        step = float(np.clip(s @ s / sy, 1e-12, 1e12)) if sy > 0 else min(2.0 * t, 1e12)
        theta, val, grad = cand, cval, cgrad
        res = projected_gradient_norm(theta, grad, domain)

    result = SolveResult(
        theta_star=theta,
        objective=float(val),
        grad_norm=res,
        iterations=it,
        converged=res <= cfg.grad_tol,
        utilities=agent_utilities(spec, theta, agents, ucfg),
    )
    if not result.converged:
        msg = f"solver stopped after {it} iterations with residual {res:.3g} > {cfg.grad_tol:.3g}"
        if strict:
            raise NotConverged(msg, result)
        logger.warning(msg)
    return result


def maximize_agent_utility(
    agent: AgentProfile,
    spec: ModelSpec,
    cfg: SolverConfig = SolverConfig(),
    theta0=None,
    ucfg: UtilityConfig = DEFAULT_CONFIG,
    strict: bool = False,
) -> SolveResult:
    """Best predictor for one agent; ``objective`` is that agent's utility."""
    solo = replace(agent, weight=1.0, log_offset=0.0)
    result = maximize_nash([solo], spec, cfg, theta0=theta0, ucfg=ucfg, strict=strict)
    result.objective = float(result.utilities[0])
    return result


def fixed_point_residual(
    spec: ModelSpec,
    theta,
    agents: Sequence[AgentProfile],
    domain=None,
    weights_on: bool = False,
    ucfg: UtilityConfig = DEFAULT_CONFIG,
) -> float:
    """Size of the welfare gradient at ``theta`` (projected when ``domain`` is given).

    A residual at or below the solver tolerance marks ``theta`` as an
    approximate fixed point of the best-response map
    ``d -> argmax sum_i u_i(d) / u_i(theta)``, whose gradient at ``d = theta``
    coincides with the welfare gradient.
    """
    theta = np.asarray(theta, dtype=np.float64)
    _, grad = nash_value_and_gradient(spec, theta, agents, weights_on, ucfg)
    if domain is None:
        return float(np.linalg.norm(grad))
    return projected_gradient_norm(theta, grad, domain)


def pooled_agent(agents: Sequence[AgentProfile], agent_id: int = -1) -> AgentProfile:
    """All agents' samples merged into one profile (the FedAvg population loss)."""
    X = np.vstack([a.dataset.features for a in agents])
    y = np.concatenate([a.dataset.targets for a in agents])
    return AgentProfile(agent_id, models.LabeledDataset(X, y))


def cap_probes(spec: ModelSpec, agents: Sequence[AgentProfile], cfg: SolverConfig = SolverConfig()) -> list:
    """Probe predictors for cap calibration: the solver's start and the pooled optimum.

    These bracket where both aggregation rules travel: training starts at the
    first and FedAvg heads for the second.
    """
    start = project(_default_start(spec, cfg), domain_for(spec, cfg))
    pooled = pooled_agent(agents)
    # any cap above the starting loss keeps a descent path feasible
    pooled = replace(pooled, cap=2.0 * models.loss(spec, start, pooled.dataset) + 1.0)
    best = maximize_agent_utility(pooled, spec, cfg, theta0=start)
    return [start, best.theta_star]
