import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corefed import audit, models
from corefed.audit import PseudoCoreParams, UtilityMatrix
from corefed.errors import InvalidParams, LengthMismatch, NonPositiveUtility, TooManyAgents
from corefed.models import LabeledDataset, ModelSpec
from corefed.utility import AgentProfile

THETA_MATRIX = np.array([[10.0, 1.0], [10.0, 1.0], [1.0, 1.11]])


def test_core_ratio_identity_is_boundary():
    c = audit.core_ratio([1, 1], [1, 1])
    assert c.ratio_sum == 2 and c.threshold == 2 and c.holds


def test_core_ratio_adult_row():
    c = audit.core_ratio([2.62, 0.90, 1.53], [2.59, 0.77, 1.46])
    assert c.holds
    assert c.verdict() == "2.80 (<3)"
    assert c.ratio_sum == pytest.approx(2.59 / 2.62 + 0.77 / 0.90 + 1.46 / 1.53, rel=1e-15)


def test_core_ratio_simplex_vertex():
    d = 1e-9
    c = audit.core_ratio([1 / 3] * 3, [1, d, d])
    assert c.ratio_sum == pytest.approx(3 + 6e-9, abs=1e-15)
    assert not c.holds and c.verdict() == "3.00 (>3)"


def test_core_ratio_weighted_threshold():
    c = audit.core_ratio([1, 1, 1], [1, 1, 1], weights=[2, 1, 1])
    assert c.threshold == 4 and c.ratio_sum == 4 and c.holds


def test_core_ratio_errors():
    with pytest.raises(NonPositiveUtility):
        audit.core_ratio([1, 0], [1, 1])
    with pytest.raises(LengthMismatch):
        audit.core_ratio([1, 1], [1, 1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=10))
def test_identical_profiles_hit_threshold_exactly(u):
    c = audit.core_ratio(u, u)
    assert c.ratio_sum == c.threshold == len(u) and c.holds


def test_blocking_coalition_examples():
    m = UtilityMatrix(THETA_MATRIX, candidates=("theta1", "theta2"))
    assert audit.find_blocking_coalition(m, "theta2") == ((0, 1), 0)
    assert audit.find_blocking_coalition(m, "theta1") is None
    single = UtilityMatrix(np.array([[1.0], [2.0], [3.0]]))
    assert audit.find_blocking_coalition(single, 0) is None


def test_blocking_coalition_guard():
    m = UtilityMatrix(np.ones((21, 1)))
    with pytest.raises(TooManyAgents):
        audit.find_blocking_coalition(m, 0)


def test_weighted_blocking_uses_weight_share():
    # agent 0 alone holds weight share 0.8: 0.8 * 2 > 1.5 blocks, unweighted 1/2 * 2 < 1.5 does not
    values = np.array([[1.5, 2.0], [1.0, 0.1]])
    assert audit.find_blocking_coalition(UtilityMatrix(values), 0) is None
    assert audit.find_blocking_coalition(UtilityMatrix(values, weights=[4, 1]), 0) == ((0,), 1)


def test_pseudo_core_k_relaxes_blocking():
    m = UtilityMatrix(THETA_MATRIX)
    # with k = 10, (2/3)/10 * 10 < 1 and no coalition blocks
    assert audit.find_blocking_coalition(m, 1, k=10.0) is None


def _brute_blocks(values, weights, ref, k=1.0):
    """Independent oracle: every (S, c) pair that blocks, by direct enumeration."""
    n, m = values.shape
    hits = []
    for size in range(1, n + 1):
        for S in itertools.combinations(range(n), size):
            share = weights[list(S)].sum() / weights.sum() / k
            for c in range(m):
                lhs = [share * values[i, c] for i in S]
                rhs = [values[i, ref] for i in S]
                if all(a >= b for a, b in zip(lhs, rhs)) and any(a > b + 1e-9 for a, b in zip(lhs, rhs)):
                    hits.append((S, c))
    return hits


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31), st.booleans())
def test_blocking_search_agrees_with_brute_force(n, m, seed, weighted):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0.05, 3.0, (n, m))
    weights = rng.uniform(0.5, 2.0, n) if weighted else np.ones(n)
    um = UtilityMatrix(values, weights)
    ref = int(rng.integers(m))
    got = audit.find_blocking_coalition(um, ref)
    hits = _brute_blocks(values, weights, ref)
    assert (got is None) == (not hits)
    if got is not None:
        assert got in hits
        # witness order: largest coalition first
        assert len(got[0]) == max(len(S) for S, _ in hits)
    if all(audit.core_ratio(values[:, ref], values[:, c], weights).holds for c in range(m)):
        assert got is None


def test_proportionality_examples():
    assert audit.check_proportionality([0.5, 1.0], [1.0, 1.0]).tolist() == [True, True]
    assert audit.check_proportionality([0.30, 1, 1], [1.0, 1, 1]).tolist() == [False, True, True]
    assert audit.check_proportionality([1 / 3] * 3, [1.0] * 3).all()
    got = audit.check_proportionality([0.5, 0.25, 0.24], [1, 1, 1], weights=[2, 1, 1])
    assert got.tolist() == [True, True, False]
    with pytest.raises(LengthMismatch):
        audit.check_proportionality([1, 1], [1])


def test_pareto_examples():
    assert audit.check_pareto_dominated([1, 2], [2, 2])
    assert not audit.check_pareto_dominated([1, 2], [2, 1])
    assert not audit.check_pareto_dominated([1, 2], [1, 2])
    with pytest.raises(LengthMismatch):
        audit.check_pareto_dominated([1], [1, 2])


def _direct_radius(eps, beta, k, n, u):
    s = sum(1 / x for x in u)
    return (-eps + math.sqrt(eps**2 + 2 * beta * (k - 1) * n * s)) / (beta * s)


def test_pseudo_core_radius_examples():
    assert audit.pseudo_core_radius(PseudoCoreParams(2.0, 0.0, 2.0, 1, (1.0,))) == pytest.approx(1.0, abs=1e-15)
    d = audit.pseudo_core_radius(PseudoCoreParams(2.0, 100.0, 2.0, 1, (1.0,)))
    assert d == pytest.approx((-100 + math.sqrt(10004)) / 2, rel=1e-12)
    assert d == pytest.approx(0.0100, abs=1e-4)
    base = audit.pseudo_core_radius(PseudoCoreParams(1.0, 0.1, 1.5, 3, (1.0, 2.0, 3.0)))
    doubled = audit.pseudo_core_radius(PseudoCoreParams(1.0, 0.1, 1.5, 3, (2.0, 4.0, 6.0)))
    assert doubled > base


@pytest.mark.parametrize("eps,beta,k,n,u", [
    (0.0, 2.0, 2.0, 1, (1.0,)),
    (0.3, 4.0, 1.5, 3, (0.5, 1.0, 2.0)),
    (1e-4, 0.7, 3.0, 5, (1.0, 1.1, 1.2, 1.3, 1.4)),
])
def test_pseudo_core_radius_matches_direct_formula(eps, beta, k, n, u):
    got = audit.pseudo_core_radius(PseudoCoreParams(beta, eps, k, n, u))
    assert abs(got - _direct_radius(eps, beta, k, n, u)) <= 1e-12


def test_pseudo_core_params_validation():
    with pytest.raises(InvalidParams):
        PseudoCoreParams(0.0, 0.0, 2.0, 1, (1.0,))
    with pytest.raises(InvalidParams):
        PseudoCoreParams(1.0, 0.0, 1.0, 1, (1.0,))
    with pytest.raises(InvalidParams):
        PseudoCoreParams(1.0, 0.0, 2.0, 1, (0.0,))


def test_estimate_beta_examples():
    spec = ModelSpec.linreg(1)
    agent = [AgentProfile(0, LabeledDataset([[1.0]], [0.0]), cap=10.0)]
    beta = audit.estimate_beta(spec, np.zeros(1), agent, radius=1.0, n_probes=50, seed=0)
    assert beta == pytest.approx(2.0, rel=0.05)
    simplex = [AgentProfile(i, models.simplex_agent_data(3, i), cap=1.0) for i in range(3)]
    assert audit.estimate_beta(ModelSpec.simplex(3), np.full(3, 1 / 3), simplex, 0.1, 50, seed=0) <= 1e-9


def test_estimate_beta_monotone_in_probes():
    rng = np.random.default_rng(0)
    spec = ModelSpec.logreg(2, alpha=3.0)
    agents = [AgentProfile(0, LabeledDataset(rng.standard_normal((20, 2)), rng.choice([-1.0, 1.0], 20)), cap=5.0)]
    betas = [audit.estimate_beta(spec, np.zeros(3), agents, 2.0, n, seed=4) for n in (1, 5, 25, 125)]
    assert betas == sorted(betas)


def test_pseudo_core_report_flags_probe_ball():
    spec = ModelSpec.linreg(1)
    agents = [AgentProfile(0, LabeledDataset([[1.0]], [0.0]), cap=10.0)]
    r = audit.pseudo_core_report(spec, np.zeros(1), agents, [10.0], grad_norm=0.0, k=2.0, probe_radius=0.5)
    assert r.radius == pytest.approx(_direct_radius(0.0, r.beta, 2.0, 1, [10.0]), rel=1e-12)
    # beta = 2 exactly: d = sqrt(2 * 2 * 0.1) / (2 * 0.1) = sqrt(10)
    assert r.radius == pytest.approx(math.sqrt(10), rel=0.05)
    assert not r.within_probe_ball
    wide = audit.pseudo_core_report(spec, np.zeros(1), agents, [10.0], grad_norm=0.0, k=2.0, probe_radius=50.0)
    assert wide.within_probe_ball


def test_utility_matrix_csv(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("theta1,theta2,weight\n10,1,2\n10,1,1\n1,1.11,1\n", encoding="utf-8")
    m = UtilityMatrix.from_csv(p)
    assert m.candidates == ("theta1", "theta2")
    np.testing.assert_array_equal(m.weights, [2, 1, 1])
    np.testing.assert_array_equal(m.values, THETA_MATRIX)
    with pytest.raises(NonPositiveUtility):
        UtilityMatrix(np.array([[1.0, -1.0]]))
