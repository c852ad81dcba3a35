"""Fairness checks on utility profiles: core certificates, blocking coalitions,
proportionality, Pareto dominance, and the local (pseudo-core) radius."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import models
from .errors import InvalidParams, LengthMismatch, NonPositiveUtility, TooManyAgents
from .models import ModelSpec
from .utility import AgentProfile

MAX_COALITION_AGENTS = 20
STRICT_TOL = 1e-9


def _positive_vector(u, name) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1:
        raise LengthMismatch(f"{name} must be a vector")
    if not np.all(u > 0):
        raise NonPositiveUtility(f"{name} has non-positive entries: {u}")
    return u


def _weights_or_ones(weights, n) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise LengthMismatch(f"expected {n} weights, got {w.shape}")
    if not np.all(w > 0):
        raise InvalidParams("weights must be > 0")
    return w


@dataclass(frozen=True)
class UtilityMatrix:
    """Utilities of each agent (rows) under each candidate predictor (columns)."""

    values: np.ndarray
    weights: Optional[np.ndarray] = None
    candidates: Optional[tuple] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise LengthMismatch(f"utility matrix must be a non-empty 2-D table, got shape {v.shape}")
        if not np.all(v > 0):
            raise NonPositiveUtility("utility matrix entries must be > 0")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "weights", _weights_or_ones(self.weights, v.shape[0]))
        names = self.candidates or tuple(f"c{j}" for j in range(v.shape[1]))
        if len(names) != v.shape[1]:
            raise LengthMismatch("one name per candidate column expected")
        object.__setattr__(self, "candidates", tuple(names))

    @property
    def n_agents(self) -> int:
        return self.values.shape[0]

    def column(self, key) -> int:
        if isinstance(key, str):
            return self.candidates.index(key)
        return int(key)

    @classmethod
    def from_csv(cls, path) -> "UtilityMatrix":
        """Rows are agents; header names the candidates; optional ``weight`` column."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
        header = [h.strip() for h in rows[0]]
        wcol = header.index("weight") if "weight" in header else None
        cols = [j for j in range(len(header)) if j != wcol]
        values, weights = [], []
        for r in rows[1:]:
            if len(r) != len(header):
                raise LengthMismatch(f"row {r} does not match header {header}")
            values.append([float(r[j]) for j in cols])
            if wcol is not None:
                weights.append(float(r[wcol]))
        return cls(np.array(values), np.array(weights) if wcol is not None else None,
                   tuple(header[j] for j in cols))


@dataclass(frozen=True)
class Certificate:
    ratio_sum: float
    threshold: float
    holds: bool
    witness: Optional[Tuple[tuple, int]] = None

    def verdict(self) -> str:
        """Two-decimal rendering, e.g. ``2.80 (<3)``."""
        sign = "<" if self.holds else ">"
        return f"{self.ratio_sum:.2f} ({sign}{self.threshold:g})"


def core_ratio(u_ref, u_alt, weights=None) -> Certificate:
    """``sum_i w_i u_alt_i / u_ref_i`` against ``sum_i w_i``.

    ``u_ref`` is the profile being certified; the certificate holds when no
    alternative gains in aggregate relative terms.
    """
    u_ref = _positive_vector(u_ref, "u_ref")
    u_alt = _positive_vector(u_alt, "u_alt")
    if u_ref.shape != u_alt.shape:
        raise LengthMismatch(f"u_ref has {u_ref.size} entries, u_alt has {u_alt.size}")
    w = _weights_or_ones(weights, u_ref.size)
    ratio = float(np.sum(w * u_alt / u_ref))
    threshold = float(np.sum(w))
    return Certificate(ratio, threshold, ratio <= threshold)


def blocks(share: float, u_ref, u_alt, k: float = 1.0, strict_tol: float = STRICT_TOL) -> bool:
    """True when ``(share / k) * u_alt >= u_ref`` everywhere, strictly somewhere."""
    lhs = (share / k) * np.asarray(u_alt, dtype=np.float64)
    u_ref = np.asarray(u_ref, dtype=np.float64)
    return bool(np.all(lhs >= u_ref) and np.any(lhs > u_ref + strict_tol))


def find_blocking_coalition(m: UtilityMatrix, ref_col, k: float = 1.0, strict_tol: float = STRICT_TOL):
    """Exhaustive search for a coalition and candidate that block ``ref_col``.

    A pair ``(S, c)`` blocks when ``(w(S) / w(all)) / k * u_i(c) >= u_i(ref)``
    for every ``i`` in ``S`` with at least one inequality strict by more than
    ``strict_tol``.  ``k = 1`` is plain (weighted) core stability; ``k > 1`` the
    relaxed pseudo-core notion.  Coalitions are tried largest first, and in
    lexicographic order within a size; candidates by column index.  Returns
    ``(S, column)`` for the first hit, or None.
    """
    n = m.n_agents
    if n > MAX_COALITION_AGENTS:
        raise TooManyAgents(f"exhaustive search is capped at {MAX_COALITION_AGENTS} agents, got {n}")
    if not k >= 1:
        raise InvalidParams(f"k must be >= 1, got {k}")
    ref = m.column(ref_col)
    if not 0 <= ref < m.values.shape[1]:
        raise InvalidParams(f"reference column {ref_col!r} out of range")
    u_ref = m.values[:, ref]
    total = float(m.weights.sum())
    for size in range(n, 0, -1):
        for S in itertools.combinations(range(n), size):
            idx = list(S)
            share = float(m.weights[idx].sum()) / total
            for c in range(m.values.shape[1]):
                if blocks(share, u_ref[idx], m.values[idx, c], k, strict_tol):
                    return S, c
    return None


def check_proportionality(u_at_theta, u_best, weights=None, tol: float = 1e-6) -> np.ndarray:
    """Per-agent pass/fail of ``u_i >= (w_i / sum w) * u_best_i - tol``."""
    u = np.asarray(u_at_theta, dtype=np.float64)
    best = np.asarray(u_best, dtype=np.float64)
    if u.shape != best.shape:
        raise LengthMismatch(f"{u.size} utilities but {best.size} reference utilities")
    w = _weights_or_ones(weights, u.size)
    return u >= (w / w.sum()) * best - tol


def check_pareto_dominated(u_ref, u_alt) -> bool:
    u_ref = np.asarray(u_ref, dtype=np.float64)
    u_alt = np.asarray(u_alt, dtype=np.float64)
    if u_ref.shape != u_alt.shape:
        raise LengthMismatch(f"{u_ref.size} vs {u_alt.size} utilities")
    return bool(np.all(u_alt >= u_ref) and np.any(u_alt > u_ref))


@dataclass(frozen=True)
class PseudoCoreParams:
    beta: float
    grad_norm_eps: float
    k: float
    n: int
    utilities: tuple

    def __post_init__(self):
        u = tuple(float(x) for x in self.utilities)
        object.__setattr__(self, "utilities", u)
        if not self.beta > 0:
            raise InvalidParams(f"beta must be > 0, got {self.beta}")
        if not self.grad_norm_eps >= 0:
            raise InvalidParams("gradient bound must be >= 0")
        if not self.k > 1:
            raise InvalidParams(f"k must be > 1, got {self.k}")
        if self.n < 1 or not u or not all(x > 0 for x in u):
            raise InvalidParams("need n >= 1 and positive utilities")


def pseudo_core_radius(p: PseudoCoreParams) -> float:
    """Radius within which no coalition gains by the relaxed factor k.

    ``d = (-eps + sqrt(eps^2 + 2 beta (k-1) n S)) / (beta S)`` with
    ``S = sum_i 1/u_i``, evaluated in the rationalized form
    ``2 (k-1) n / (eps + sqrt(eps^2 + 2 beta (k-1) n S))`` to avoid
    cancellation when eps dominates.
    """
    inv_sum = math.fsum(1.0 / u for u in p.utilities)
    a = 2.0 * p.beta * (p.k - 1.0) * p.n * inv_sum
    root = math.sqrt(p.grad_norm_eps ** 2 + a)
    return 2.0 * (p.k - 1.0) * p.n / (p.grad_norm_eps + root)


def _uniform_in_ball(rng, center, radius):
    d = center.size
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    return center + radius * rng.random() ** (1.0 / d) * direction


def estimate_beta(
    spec: ModelSpec,
    theta,
    agents: Sequence[AgentProfile],
    radius: float,
    n_probes: int,
    seed: int,
) -> float:
    """Largest sampled ``||grad u_i(a) - grad u_i(b)|| / ||a - b||`` over pairs in a ball.

    This is a lower bound on the true smoothness constant on that ball; it
    only grows with ``n_probes`` because probe ``j`` is the same for any
    budget larger than ``j``.
    """
    if n_probes < 1:
        raise InvalidParams("n_probes must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_probes):
        a = _uniform_in_ball(rng, theta, radius)
        b = _uniform_in_ball(rng, theta, radius)
        gap = float(np.linalg.norm(a - b))
        if gap == 0:
            continue
        for agent in agents:
            diff = models.loss_gradient(spec, a, agent.dataset) - models.loss_gradient(spec, b, agent.dataset)
            best = max(best, float(np.linalg.norm(diff)) / gap)
    return best


@dataclass(frozen=True)
class PseudoCoreReport:
    radius: float
    beta: float
    probe_radius: float
    n_probes: int
    grad_norm: float
    k: float

    @property
    def within_probe_ball(self) -> bool:
        """The smoothness estimate covers the whole certified ball."""
        return self.radius <= self.probe_radius


def pseudo_core_report(
    spec: ModelSpec,
    theta,
    agents: Sequence[AgentProfile],
    utilities,
    grad_norm: float,
    k: float = 2.0,
    probe_radius: float = 1.0,
    n_probes: int = 200,
    seed: int = 0,
) -> PseudoCoreReport:
    """Estimate beta on a ball of ``probe_radius`` and derive the certified radius.

    The certified radius is meaningful only if it does not exceed the probe
    ball; ``within_probe_ball`` flags that.
    """
    beta = estimate_beta(spec, theta, agents, probe_radius, n_probes, seed)
    if beta == 0:
        # linear utilities: the beta -> 0 limit of the radius formula
        d = (k - 1.0) * len(agents) / grad_norm if grad_norm > 0 else math.inf
    else:
        d = pseudo_core_radius(PseudoCoreParams(beta, grad_norm, k, len(agents), tuple(utilities)))
    return PseudoCoreReport(d, beta, probe_radius, n_probes, grad_norm, k)
