import sys

import numpy as np
import pytest

from corefed.models import LabeledDataset, ModelSpec, init_params, loss
from corefed.utility import AgentProfile


def central_diff(f, x, h=1e-6):
    """Independent gradient oracle: coordinate-wise central differences."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def random_instance(rng, kind, n_agents=3, dim=3, samples=20):
    """Small random (spec, agents, theta) with caps well above every loss at theta."""
    if kind == "linreg":
        spec = ModelSpec.linreg(dim)
    elif kind == "logreg":
        spec = ModelSpec.logreg(dim, alpha=float(rng.uniform(0.2, 3.0)))
    else:
        spec = ModelSpec.mlp(dim, (4, 3))
    agents = []
    for i in range(n_agents):
        X = rng.standard_normal((samples, dim))
        if kind == "linreg":
            y = X @ rng.standard_normal(dim) + 0.3 * rng.standard_normal(samples)
        elif kind == "logreg":
            y = rng.choice([-1.0, 1.0], samples)
        else:
            y = rng.integers(0, 3, samples).astype(float)
        agents.append(AgentProfile(i, LabeledDataset(X, y)))
    if kind == "mlp":
        theta = init_params(spec, seed=int(rng.integers(1 << 30)), scale=0.5)
    else:
        theta = 0.5 * rng.standard_normal(spec.n_params)
    agents = [
        AgentProfile(a.id, a.dataset, cap=loss(spec, theta, a.dataset) + float(rng.uniform(0.5, 3.0)))
        for a in agents
    ]
    return spec, agents, theta


@pytest.fixture
def two_quadratics():
    """Agents {(x=1, y=0)} and {(x=1, y=2)} with cap 9: the welfare optimum is theta = 1."""
    spec = ModelSpec.linreg(1)
    agents = [
        AgentProfile(0, LabeledDataset([[1.0]], [0.0]), cap=9.0),
        AgentProfile(1, LabeledDataset([[1.0]], [2.0]), cap=9.0),
    ]
    return spec, agents


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
