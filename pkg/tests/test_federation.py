from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corefed import federation, models, utility
from corefed.errors import EmptyRound, InvalidK, NonPositiveUtility
from corefed.federation import Aggregator, ClientUpdate, RoundConfig
from corefed.models import LabeledDataset, ModelSpec
from corefed.utility import AgentProfile

from conftest import random_instance

QUAD = ModelSpec.linreg(1)


def quad_agent(i=0, y=2.0, cap=10.0, weight=1.0):
    return AgentProfile(i, LabeledDataset([[1.0]], [y]), cap=cap, weight=weight)


def test_select_all_when_k_equals_n():
    assert federation.select_clients(5, 5, 3, seed=1) == [0, 1, 2, 3, 4]


def test_select_matches_reference_sampler():
    got = federation.select_clients(10, 3, round_index=4, seed=11)
    keys = np.random.default_rng([11, 4]).random(10)
    expected = sorted(sorted(range(10), key=lambda i: keys[i])[:3])
    assert got == expected
    assert got == federation.select_clients(10, 3, round_index=4, seed=11)
    assert len(set(got)) == 3


def test_select_rejects_bad_k():
    with pytest.raises(InvalidK):
        federation.select_clients(3, 0, 0, 0)
    with pytest.raises(InvalidK):
        federation.select_clients(3, 4, 0, 0)


def test_local_update_examples():
    cfg = RoundConfig(local_epochs=1, learning_rate=0.1)
    u = federation.local_update(quad_agent(), QUAD, [0.0], cfg)
    np.testing.assert_allclose(u.delta, [0.4], rtol=0, atol=1e-15)
    assert u.start_loss == 4.0 and u.sample_count == 1
    at_opt = federation.local_update(quad_agent(), QUAD, [2.0], cfg)
    np.testing.assert_array_equal(at_opt.delta, [0.0])
    two = federation.local_update(quad_agent(), QUAD, [0.0], RoundConfig(local_epochs=2, learning_rate=0.1))
    np.testing.assert_allclose(two.delta, [0.4 + 0.1 * 2 * (2 - 0.4)], rtol=0, atol=1e-15)


def test_local_update_checks_cap():
    with pytest.raises(NonPositiveUtility):
        federation.local_update(quad_agent(cap=3.0), QUAD, [0.0], RoundConfig())
    # FedAvg never consults caps
    federation.local_update(quad_agent(cap=3.0), QUAD, [0.0], RoundConfig(aggregator="fedavg"))


def test_minibatch_update_is_seeded():
    rng = np.random.default_rng(0)
    spec, agents, theta = random_instance(rng, "logreg")
    cfg = RoundConfig(local_epochs=3, batch_size=4, seed=5)
    a = federation.local_update(agents[0], spec, theta, cfg, round_index=2)
    b = federation.local_update(agents[0], spec, theta, cfg, round_index=2)
    c = federation.local_update(agents[0], spec, theta, cfg, round_index=3)
    assert np.array_equal(a.delta, b.delta)
    assert not np.array_equal(a.delta, c.delta)


def _two_updates():
    # utilities at theta: 9 and 5
    agents = [quad_agent(0, cap=10.0), quad_agent(1, cap=10.0)]
    ups = [ClientUpdate(0, np.array([0.0]), 1.0, 10), ClientUpdate(1, np.array([0.4]), 5.0, 10)]
    return agents, ups


def test_aggregate_examples():
    agents, ups = _two_updates()
    theta = np.array([1.0])
    np.testing.assert_allclose(federation.aggregate(theta, ups, agents, "corefed"), [1.04], rtol=0, atol=1e-15)
    np.testing.assert_allclose(federation.aggregate(theta, ups, agents, "fedavg"), [1.2], rtol=0, atol=1e-15)
    w = federation.aggregate(theta, ups, agents, "weighted-corefed")
    assert np.array_equal(w, federation.aggregate(theta, ups, agents, "corefed"))


def test_aggregate_weighted_normalization():
    agents, ups = _two_updates()
    agents = utility.with_weights(agents, [1.0, 3.0])
    got = federation.aggregate(np.zeros(1), ups, agents, "weighted-corefed")
    # (1 * 0/9 + 3 * 0.4/5) / (mean weight 2 * 2 clients)
    np.testing.assert_allclose(got, [3 * 0.4 / 5 / 4], rtol=1e-15)


def test_aggregate_fedavg_uses_sample_counts():
    agents, _ = _two_updates()
    ups = [ClientUpdate(0, np.array([1.0]), 1.0, 30), ClientUpdate(1, np.array([0.0]), 5.0, 10)]
    np.testing.assert_allclose(federation.aggregate(np.zeros(1), ups, agents, "fedavg"), [0.75])


def test_aggregate_errors():
    agents, ups = _two_updates()
    with pytest.raises(EmptyRound):
        federation.aggregate(np.zeros(1), [], agents, "corefed")
    bad = [ClientUpdate(0, np.array([0.0]), 10.0, 1)]
    with pytest.raises(NonPositiveUtility):
        federation.aggregate(np.zeros(1), bad, agents, "corefed")


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(5)), st.integers(0, 1000))
def test_aggregate_order_independent(order, seed):
    rng = np.random.default_rng(seed)
    agents = [quad_agent(i, cap=20.0) for i in range(5)]
    ups = [ClientUpdate(i, rng.standard_normal(3), float(rng.uniform(0, 5)), int(rng.integers(1, 9))) for i in range(5)]
    shuffled = [ups[i] for i in order]
    for kind in Aggregator:
        a = federation.aggregate(np.zeros(3), ups, agents, kind)
        b = federation.aggregate(np.zeros(3), shuffled, agents, kind)
        assert np.array_equal(a, b)


def test_one_round_is_centralized_ascent_step():
    rng = np.random.default_rng(3)
    spec, agents, theta = random_instance(rng, "logreg", n_agents=4)
    eta = 0.05
    cfg = RoundConfig(total_rounds=1, learning_rate=eta)
    out, _ = federation.run_rounds(agents, spec, cfg, theta)
    step = theta + (eta / 4) * utility.nash_gradient(spec, theta, agents)
    np.testing.assert_allclose(out, step, rtol=0, atol=1e-10)


def test_zero_rounds_is_identity():
    theta, trace = federation.run_rounds([quad_agent()], QUAD, RoundConfig(total_rounds=0), [0.5])
    assert theta.tolist() == [0.5] and len(trace) == 0


def _instance(seed=2):
    rng = np.random.default_rng(seed)
    return random_instance(rng, "linreg", n_agents=3, samples=30)


def test_runs_are_bit_deterministic():
    spec, agents, theta = _instance()
    cfg = RoundConfig(total_rounds=15, learning_rate=0.02, clients_per_round=2, batch_size=8, seed=4)
    a, ta = federation.run_rounds(agents, spec, cfg, theta)
    b, tb = federation.run_rounds(agents, spec, cfg, theta)
    assert np.array_equal(a, b) and ta.to_jsonl() == tb.to_jsonl()


def test_parallel_clients_match_serial():
    spec, agents, theta = _instance()
    cfg = RoundConfig(total_rounds=10, learning_rate=0.02)
    a, _ = federation.run_rounds(agents, spec, cfg, theta)
    with ThreadPoolExecutor(3) as ex:
        b, _ = federation.run_rounds(agents, spec, cfg, theta, executor=ex)
    assert np.array_equal(a, b)


def test_trace_logs_every_agent_each_round(tmp_path):
    spec, agents, theta = _instance()
    cfg = RoundConfig(total_rounds=6, learning_rate=0.02, clients_per_round=1)
    _, trace = federation.run_rounds(agents, spec, cfg, theta, keep_checkpoints=True)
    assert [r.round for r in trace.records] == list(range(6))
    for r in trace.records:
        assert len(r.selected) == 1 and r.agent_ids == [0, 1, 2]
        caps = np.array([a.cap for a in agents])
        np.testing.assert_allclose(r.utilities, caps - np.array(r.losses), rtol=0, atol=0)
    trace.write_jsonl(tmp_path / "t.jsonl")
    back = federation.TrainingTrace.read_jsonl(tmp_path / "t.jsonl")
    assert back.to_jsonl() == trace.to_jsonl()
    assert '"schema_version": 1' in trace.to_jsonl()


def test_welfare_nondecreasing_for_small_steps():
    spec, agents, theta = _instance(7)
    # Hessian of log u_i is bounded by lambda_max(H_i) / u_i + |grad loss_i|^2 / u_i^2;
    # summed at the start point this is the curvature estimate beta-hat
    beta_hat = 0.0
    for a in agents:
        X = a.dataset.features
        loss_i, g_i = models.loss_and_gradient(spec, theta, a.dataset)
        u = a.cap - loss_i
        beta_hat += np.linalg.eigvalsh(2 * X.T @ X / len(X)).max() / u + float(g_i @ g_i) / u**2
    # one round moves by (eta / n) * grad, so eta / n = 1 / (2 beta-hat)
    cfg = RoundConfig(total_rounds=40, learning_rate=len(agents) / (2 * beta_hat))
    _, trace = federation.run_rounds(agents, spec, cfg, theta)
    obj = [r.objective for r in trace.records]
    assert all(b >= a - 1e-8 for a, b in zip(obj, obj[1:]))
    assert obj[-1] > obj[0]


def test_unit_weights_reproduce_corefed_trajectory():
    spec, agents, theta = _instance()
    a, ta = federation.run_rounds(agents, spec, RoundConfig(total_rounds=20, learning_rate=0.02), theta, keep_checkpoints=True)
    cfg = RoundConfig(total_rounds=20, learning_rate=0.02, aggregator="weighted-corefed")
    b, tb = federation.run_rounds(agents, spec, cfg, theta, keep_checkpoints=True)
    assert np.array_equal(a, b)
    assert all(np.array_equal(x.theta, y.theta) for x, y in zip(ta.records, tb.records))


def test_round_index_attached_to_violation():
    # round 0 jumps from theta 0 to 8, far past the cap
    cfg = RoundConfig(total_rounds=5, learning_rate=1.0)
    with pytest.raises(NonPositiveUtility) as info:
        federation.run_rounds([quad_agent(0, y=2.0, cap=4.5)], QUAD, cfg, [0.0])
    assert info.value.round_index == 1 and info.value.agent_id == 0
    assert "round" in str(info.value)


def test_checkpoint_round_trip(tmp_path):
    spec = ModelSpec.logreg(3, alpha=0.5)
    theta = np.array([0.1, 1 / 3, -2.5, 1e-17])
    federation.save_checkpoint(tmp_path / "c.json", theta, spec, 12, caps=[1.0])
    back, spec2, header = federation.load_checkpoint(tmp_path / "c.json")
    assert np.array_equal(back, theta) and spec2 == spec
    assert header["round"] == 12 and header["dims"] == 4 and header["caps"] == [1.0]
