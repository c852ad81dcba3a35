"""Predictor families, their mean losses and analytic gradients.

Every predictor is a flat float64 vector.  Layouts per kind:

* ``linreg``  -- ``theta`` (input_dim,), ``f(x) = theta @ x``
* ``logreg``  -- ``[theta..., c]`` (input_dim + 1,), last entry is the intercept
* ``mlp``     -- per layer, row-major weight matrix (fan_in, fan_out) then bias
* ``simplex`` -- a point of the probability simplex in R^n
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateDirection,
    DimensionMismatch,
    EmptyDataset,
    InvalidParams,
    NumericOverflow,
    UnsupportedForKind,
)


class ModelKind(str, enum.Enum):
    LINREG = "linreg"
    LOGREG = "logreg"
    MLP = "mlp"
    SIMPLEX = "simplex"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    input_dim: int
    alpha: float = 1.0
    # mlp only: output width of every layer, last entry is the number of classes
    layer_dims: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if self.input_dim < 1:
            raise InvalidParams(f"input_dim must be >= 1, got {self.input_dim}")
        if self.kind is ModelKind.LOGREG and not self.alpha >= 0:
            raise InvalidParams(f"logreg alpha must be >= 0, got {self.alpha}")
        if self.kind is ModelKind.MLP:
            if len(self.layer_dims) < 2:
                raise InvalidParams("mlp needs at least one hidden layer plus an output layer")
            if any(d < 1 for d in self.layer_dims) or self.layer_dims[-1] < 2:
                raise InvalidParams(f"bad mlp layer_dims {self.layer_dims}")

    @classmethod
    def linreg(cls, input_dim: int) -> "ModelSpec":
        return cls(ModelKind.LINREG, input_dim)

    @classmethod
    def logreg(cls, input_dim: int, alpha: float = 1.0) -> "ModelSpec":
        return cls(ModelKind.LOGREG, input_dim, alpha=alpha)

    @classmethod
    def mlp(cls, input_dim: int, layer_dims: Sequence[int]) -> "ModelSpec":
        return cls(ModelKind.MLP, input_dim, layer_dims=tuple(layer_dims))

    @classmethod
    def simplex(cls, n: int) -> "ModelSpec":
        return cls(ModelKind.SIMPLEX, n)

    @property
    def n_params(self) -> int:
        if self.kind is ModelKind.LOGREG:
            return self.input_dim + 1
        if self.kind is ModelKind.MLP:
            return sum(i * o + o for i, o in self._layer_shapes())
        return self.input_dim

    @property
    def n_classes(self) -> Optional[int]:
        if self.kind is ModelKind.MLP:
            return self.layer_dims[-1]
        if self.kind is ModelKind.LOGREG:
            return 2
        return None

    def _layer_shapes(self):
        dims = (self.input_dim,) + self.layer_dims
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "input_dim": self.input_dim}
        if self.kind is ModelKind.LOGREG:
            out["alpha"] = self.alpha
        if self.kind is ModelKind.MLP:
            out["layer_dims"] = list(self.layer_dims)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            ModelKind(d["kind"]),
            int(d["input_dim"]),
            alpha=float(d.get("alpha", 1.0)),
            layer_dims=tuple(d.get("layer_dims", ())),
        )


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix plus targets.

    Regression targets are reals; logistic targets are in {-1, +1}; mlp targets
    are class indices 0..K-1.
    """

    features: np.ndarray
    targets: np.ndarray
    feature_names: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or y.ndim != 1:
            raise DimensionMismatch(f"features must be 2-D and targets 1-D, got {X.shape}, {y.shape}")
        if X.shape[0] != y.shape[0]:
            raise DimensionMismatch(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidParams("dataset contains missing or non-finite values")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledDataset(self.features[idx], self.targets[idx], self.feature_names)


def simplex_agent_data(n: int, i: int) -> LabeledDataset:
    """One-sample dataset whose loss under ``simplex`` is ``1 - theta[i]``."""
    x = np.zeros((1, n))
    x[0, i] = 1.0
    return LabeledDataset(x, np.ones(1))


def _sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _check_theta(spec: ModelSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise DimensionMismatch(f"{spec.kind.value} expects {spec.n_params} parameters, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise InvalidParams("predictor has non-finite entries")
    return theta


def _check_data(spec: ModelSpec, data: LabeledDataset):
    if len(data) == 0:
        raise EmptyDataset("loss is undefined on an empty dataset")
    if data.dim != spec.input_dim:
        raise DimensionMismatch(f"data has {data.dim} features, model expects {spec.input_dim}")
    if spec.kind is ModelKind.LOGREG and not np.all(np.abs(data.targets) == 1.0):
        raise InvalidParams("logistic targets must be in {-1, +1}")
    if spec.kind is ModelKind.MLP:
        y = data.targets
        if np.any(y != np.round(y)) or y.min() < 0 or y.max() >= spec.n_classes:
            raise InvalidParams(f"mlp targets must be class indices in 0..{spec.n_classes - 1}")


def unpack_mlp(spec: ModelSpec, theta: np.ndarray):
    """Split a flat mlp vector into a list of (W, b) views."""
    layers, pos = [], 0
    for fan_in, fan_out in spec._layer_shapes():
        W = theta[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = theta[pos:pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return layers


def _mlp_forward(spec, theta, X):
    layers = unpack_mlp(spec, theta)
    acts, pre = [X], []
    h = X
    for W, b in layers[:-1]:
        z = h @ W + b
        pre.append(z)
        h = _softplus(z)
        acts.append(h)
    W, b = layers[-1]
    return h @ W + b, acts, pre


def _log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def init_params(spec: ModelSpec, seed: int = 0, scale: float = 0.1) -> np.ndarray:
    """Starting point: zeros for convex kinds, small Gaussian weights for mlp."""
    if spec.kind is ModelKind.SIMPLEX:
        return np.full(spec.input_dim, 1.0 / spec.input_dim)
    if spec.kind is not ModelKind.MLP:
        return np.zeros(spec.n_params)
    rng = np.random.default_rng(seed)
    theta = np.zeros(spec.n_params)
    pos = 0
    for fan_in, fan_out in spec._layer_shapes():
        theta[pos:pos + fan_in * fan_out] = rng.normal(0.0, scale, fan_in * fan_out)
        pos += fan_in * fan_out + fan_out
    return theta


def predict(spec: ModelSpec, theta, x):
    """Model output for one feature vector (or a matrix of rows).

    logreg returns P(y=+1); mlp returns class probabilities.
    """
    if spec.kind is ModelKind.SIMPLEX:
        raise UnsupportedForKind("simplex predictors have no per-sample prediction")
    theta = _check_theta(spec, theta)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"x has {X.shape[1]} features, model expects {spec.input_dim}")
    if spec.kind is ModelKind.LINREG:
        out = X @ theta
    elif spec.kind is ModelKind.LOGREG:
        out = _sigmoid(X @ theta[:-1] + theta[-1])
    else:
        logits, _, _ = _mlp_forward(spec, theta, X)
        out = np.exp(_log_softmax(logits))
    return out[0] if single else out


def loss(spec: ModelSpec, theta, data: LabeledDataset) -> float:
    """Mean loss of ``theta`` over ``data``."""
    value, _ = loss_and_gradient(spec, theta, data, need_grad=False)
    return value


def loss_gradient(spec: ModelSpec, theta, data: LabeledDataset) -> np.ndarray:
    return loss_and_gradient(spec, theta, data)[1]


def loss_and_gradient(spec: ModelSpec, theta, data: LabeledDataset, need_grad: bool = True):
    theta = _check_theta(spec, theta)
    _check_data(spec, data)
    X, y = data.features, data.targets
    N = X.shape[0]
    grad = None

    if spec.kind is ModelKind.LINREG:
        r = X @ theta - y
        value = float(np.mean(r * r))
        if need_grad:
            grad = (2.0 / N) * (X.T @ r)

    elif spec.kind is ModelKind.LOGREG:
        w, c = theta[:-1], theta[-1]
        margin = y * (X @ w + c)
        value = 0.5 * float(w @ w) + spec.alpha * float(np.mean(np.logaddexp(0.0, -margin)))
        if need_grad:
            # d/dz log(1 + e^{-z}) = -sigmoid(-z)
            coef = -y * _sigmoid(-margin) * (spec.alpha / N)
            grad = np.empty_like(theta)
            grad[:-1] = w + X.T @ coef
            grad[-1] = coef.sum()

    elif spec.kind is ModelKind.MLP:
        logits, acts, pre = _mlp_forward(spec, theta, X)
        logp = _log_softmax(logits)
        labels = y.astype(np.intp)
        value = -float(np.mean(logp[np.arange(N), labels]))
        if need_grad:
            delta = np.exp(logp)
            delta[np.arange(N), labels] -= 1.0
            delta /= N
            layers = unpack_mlp(spec, theta)
            grad = np.empty_like(theta)
            g_layers = unpack_mlp(spec, grad)
            for li in range(len(layers) - 1, -1, -1):
                W, _ = layers[li]
                gW, gb = g_layers[li]
                gW[...] = acts[li].T @ delta
                gb[...] = delta.sum(axis=0)
                if li > 0:
                    delta = (delta @ W.T) * _sigmoid(pre[li - 1])

    else:  # simplex: rows of X are indicator vectors of the agent's coordinate
        value = float(np.mean(1.0 - X @ theta))
        if need_grad:
            grad = -X.mean(axis=0)

    if not np.isfinite(value) or (grad is not None and not np.all(np.isfinite(grad))):
        raise NumericOverflow(f"non-finite {spec.kind.value} loss or gradient")
    return value, grad


def hvp_estimate(spec: ModelSpec, theta, data: LabeledDataset, v, rel_step: float = 1e-5) -> np.ndarray:
    """Hessian-vector product by central differences of the analytic gradient."""
    theta = _check_theta(spec, theta)
    v = np.asarray(v, dtype=np.float64)
    vnorm = float(np.linalg.norm(v))
    if not vnorm > 0:
        raise DegenerateDirection("direction must be non-zero")
    h = rel_step * (1.0 + float(np.linalg.norm(theta))) / vnorm
    g_plus = loss_gradient(spec, theta + h * v, data)
    g_minus = loss_gradient(spec, theta - h * v, data)
    return (g_plus - g_minus) / (2.0 * h)
