"""Synthetic datasets, non-IID Dirichlet partitioning, noise injection, CSV ingestion."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import AgentWithNoData, InvalidParams, InvalidShape, MalformedRow, MissingColumn, NonBinaryTarget
from .models import LabeledDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionPlan:
    """Result of a label-wise Dirichlet split.

    ``proportions[l]`` is the Dirichlet draw for label ``labels[l]`` (one entry
    per agent, sums to 1); ``counts[a, l]`` is the realized number of samples of
    that label given to agent ``a``.
    """

    assignments: np.ndarray
    labels: np.ndarray
    proportions: np.ndarray
    counts: np.ndarray

    @property
    def sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def agent_label_shares(self) -> np.ndarray:
        """Each agent's own label mix (rows sum to 1; uniform for empty agents)."""
        sizes = self.sizes[:, None].astype(float)
        shares = np.divide(self.counts, sizes, out=np.full(self.counts.shape, 1.0 / self.counts.shape[1]), where=sizes > 0)
        return shares


@dataclass(frozen=True)
class NoiseConfig:
    sigmas: tuple

    def __post_init__(self):
        s = tuple(float(x) for x in self.sigmas)
        if not all(np.isfinite(x) and x >= 0 for x in s):
            raise InvalidParams(f"noise sigmas must be finite and >= 0, got {s}")
        object.__setattr__(self, "sigmas", s)


def gen_synthetic_regression(n: int, dim: int, true_theta, noise_sigma: float, seed: int) -> LabeledDataset:
    true_theta = np.asarray(true_theta, dtype=np.float64)
    if n < 1 or dim < 1 or true_theta.shape != (dim,):
        raise InvalidShape(f"need n >= 1, dim >= 1 and true_theta of length dim; got n={n}, dim={dim}, theta {true_theta.shape}")
    if noise_sigma < 0:
        raise InvalidParams("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dim))
    y = X @ true_theta
    if noise_sigma > 0:
        y = y + rng.normal(0.0, noise_sigma, n)
    return LabeledDataset(X, y)


def gen_synthetic_classification(
    n: int, dim: int, n_classes: int, separation: float, seed: int, signed: bool = False
) -> LabeledDataset:
    """Gaussian blobs, one per class, with pairwise mean distance ``separation``.

    Labels are 0..K-1, or {-1, +1} when ``signed`` (binary only).  Class sizes
    differ by at most one.
    """
    if n_classes < 2 or n < 1 or dim < 1:
        raise InvalidShape(f"need n >= 1, dim >= 1, n_classes >= 2; got {n}, {dim}, {n_classes}")
    if n_classes > 2 and n_classes > dim:
        raise InvalidShape(f"{n_classes} equidistant class means need dim >= {n_classes}, got {dim}")
    if signed and n_classes != 2:
        raise InvalidShape("signed labels are only defined for two classes")
    means = np.zeros((n_classes, dim))
    if n_classes == 2:
        means[0, 0], means[1, 0] = -separation / 2, separation / 2
    else:
        means[np.arange(n_classes), np.arange(n_classes)] = separation / np.sqrt(2.0)
        means -= means.mean(axis=0)
    counts = np.full(n_classes, n // n_classes)
    counts[: n % n_classes] += 1
    labels = np.repeat(np.arange(n_classes), counts)
    rng = np.random.default_rng(seed)
    labels = labels[rng.permutation(n)]
    X = means[labels] + rng.standard_normal((n, dim))
    y = labels.astype(float)
    if signed:
        y = 2.0 * y - 1.0
    return LabeledDataset(X, y)


def largest_remainder(proportions, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, as close as possible to ``proportions * total``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    data: LabeledDataset,
    n_agents: int,
    alpha: float,
    seed: int,
    labels=None,
    strict: bool = False,
):
    """Split ``data`` across agents with per-label Dirichlet(alpha) shares.

    For every distinct label (ascending) the generator draws a share vector over
    agents, then a permutation of that label's samples; the permutation is cut
    into consecutive blocks sized by largest-remainder rounding.  ``labels``
    overrides the grouping key (e.g. all zeros for regression targets).

    Returns ``(plan, per_agent_datasets)``.
    """
    if not alpha > 0:
        raise InvalidParams(f"dirichlet alpha must be > 0, got {alpha}")
    if n_agents < 1:
        raise InvalidParams(f"n_agents must be >= 1, got {n_agents}")
    key = data.targets if labels is None else np.asarray(labels)
    if key.shape != (len(data),):
        raise InvalidShape("labels must have one entry per sample")
    rng = np.random.default_rng(seed)
    uniq = np.unique(key)
    assignments = np.full(len(data), -1, dtype=np.int64)
    props = np.empty((uniq.size, n_agents))
    counts = np.zeros((n_agents, uniq.size), dtype=np.int64)
    for l, lab in enumerate(uniq):
        idx = np.flatnonzero(key == lab)
        # a one-component draw can land a rounding step below 1
        p = rng.dirichlet(np.full(n_agents, float(alpha))) if n_agents > 1 else np.ones(1)
        perm = idx[rng.permutation(idx.size)]
        c = largest_remainder(p, idx.size)
        bounds = np.concatenate(([0], np.cumsum(c)))
        for a in range(n_agents):
            assignments[perm[bounds[a]:bounds[a + 1]]] = a
        props[l] = p
        counts[:, l] = c
    plan = PartitionPlan(assignments, uniq, props, counts)
    empty = np.flatnonzero(plan.sizes == 0)
    if empty.size:
        if strict:
            raise AgentWithNoData(f"agents {empty.tolist()} received no samples")
        logger.warning("agents %s received no samples", empty.tolist())
    parts = [data.subset(np.flatnonzero(assignments == a)) for a in range(n_agents)]
    return plan, parts


def add_gaussian_noise(data: LabeledDataset, sigma: float, seed: int) -> LabeledDataset:
    """Perturb features with i.i.d. N(0, sigma^2); targets are left alone."""
    if not sigma >= 0:
        raise InvalidParams(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return data
    rng = np.random.default_rng(seed)
    noisy = data.features + rng.normal(0.0, sigma, data.features.shape)
    return LabeledDataset(noisy, data.targets, data.feature_names)


def _parse_float(s: str) -> Optional[float]:
    try:
        return float(s)
    except ValueError:
        return None


def load_csv(path, target_column: str, normalize: bool = False, binary: bool = False) -> LabeledDataset:
    """Read a header-first CSV into a dataset.

    Columns whose every value parses as a number are numeric; the rest are
    one-hot encoded with categories in sorted order (named ``col=value``).
    With ``binary`` the target must take exactly two values, mapped in sorted
    order to -1 and +1.  Non-binary non-numeric targets become sorted class
    indices.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedRow("file is empty, header row expected", 0)
    header = [h.strip() for h in rows[0]]
    if target_column not in header:
        raise MissingColumn(f"target column {target_column!r} not in header {header}")
    body = rows[1:]
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise MalformedRow(f"expected {len(header)} fields, found {len(row)}", i)
        for name, v in zip(header, row):
            if v.strip() == "":
                raise MalformedRow(f"missing value in column {name!r}", i)
    if not body:
        raise MalformedRow("no data rows", 1)
    columns = {name: [r[j].strip() for r in body] for j, name in enumerate(header)}

    target_raw = columns[target_column]
    target_num = [_parse_float(v) for v in target_raw]
    numeric_target = all(v is not None for v in target_num)
    cats = sorted(set(target_raw), key=float) if numeric_target else sorted(set(target_raw))
    if binary:
        if len(cats) != 2:
            raise NonBinaryTarget(f"target {target_column!r} has {len(cats)} distinct values, need 2")
        y = np.array([-1.0 if v == cats[0] else 1.0 for v in target_raw])
    elif numeric_target:
        y = np.array(target_num, dtype=float)
    else:
        index = {c: k for k, c in enumerate(cats)}
        y = np.array([index[v] for v in target_raw], dtype=float)

    blocks, names = [], []
    for name in header:
        if name == target_column:
            continue
        vals = [_parse_float(v) for v in columns[name]]
        if all(v is not None for v in vals):
            col = np.array(vals, dtype=float)
            if normalize:
                col = col - col.mean()
                sd = col.std()
                if sd > 0:
                    col = col / sd
            blocks.append(col[:, None])
            names.append(name)
        else:
            levels = sorted(set(columns[name]))
            onehot = np.array([[1.0 if v == lev else 0.0 for lev in levels] for v in columns[name]])
            blocks.append(onehot)
            names.extend(f"{name}={lev}" for lev in levels)
    X = np.hstack(blocks) if blocks else np.zeros((len(body), 0))
    return LabeledDataset(X, y, tuple(names))


def save_dataset_csv(path, data: LabeledDataset, target_column: str = "target") -> None:
    """Write a dataset as CSV with full-precision floats (``repr`` round-trips)."""
    names = data.feature_names or tuple(f"x{j}" for j in range(data.dim))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names) + [target_column])
        for row, t in zip(data.features, data.targets):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def load_dataset_csv(path, target_column: str = "target") -> LabeledDataset:
    """Inverse of :func:`save_dataset_csv` (all columns numeric, no re-encoding)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if target_column not in header:
        raise MissingColumn(f"target column {target_column!r} not in {path}")
    t = header.index(target_column)
    try:
        arr = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, len(header))
    except ValueError as exc:
        raise MalformedRow(str(exc), 0) from exc
    feats = np.delete(arr, t, axis=1)
    names = tuple(h for j, h in enumerate(header) if j != t)
    return LabeledDataset(feats, arr[:, t], names)
