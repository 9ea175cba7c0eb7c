"""Embedding table, pairwise logistic loss, factorization machine, oracles.

Two loss surfaces live here. The dot-product logistic loss is the clean
theory model (symmetric in the two embedding rows); the factorization
machine adds a bias and per-token linear weights and is the experiment
model. Population quantities are computed by exact enumeration of the
joint support and are meant for small instances only.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tokenspace import JointDistribution

MAGIC = b"FQG1"

# Exact-enumeration oracles refuse supports larger than this.
ORACLE_SUPPORT_LIMIT = 200_000


class CapacityError(Exception):
    """Raised when an exact oracle is asked to enumerate too large a support."""


def softplus(x):
    """log(1 + exp(x)), stable for large |x|; works on scalars and arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def loss_dot(theta_i: np.ndarray, theta_j: np.ndarray, y: int) -> float:
    """Logistic loss of the pairwise dot-product model, log(1+exp(-y<u,v>))."""
    if y not in (-1, 1):
        raise ValueError(f"label must be -1 or +1, got {y}")
    return float(softplus(-y * float(np.dot(theta_i, theta_j))))


def grad_pair(theta_i: np.ndarray, theta_j: np.ndarray, y: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of loss_dot w.r.t. (theta_i, theta_j)."""
    if y not in (-1, 1):
        raise ValueError(f"label must be -1 or +1, got {y}")
    s = float(np.dot(theta_i, theta_j))
    c = -y * float(expit(-y * s))
    return c * np.asarray(theta_j, dtype=np.float64), c * np.asarray(theta_i, dtype=np.float64)


def smoothness_bound(radius: float) -> float:
    """Hessian-block bound 1 + R^2/4 for the logistic dot loss on the R-ball."""
    if not radius > 0.0:
        raise ValueError(f"radius must be positive, got {radius}")
    return 1.0 + radius * radius / 4.0


@dataclass
class EmbeddingTable:
    """Parameter matrix with one row per token; users first, then items."""

    n_users: int
    n_items: int
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-d matrix")
        if rows.shape[0] != self.n_users + self.n_items:
            raise ValueError(
                f"row count {rows.shape[0]} != n_users + n_items = {self.n_users + self.n_items}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("embedding entries must be finite")
        self.rows = rows

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def user_row(self, i: int) -> np.ndarray:
        return self.rows[i]

    def item_row(self, j: int) -> np.ndarray:
        return self.rows[self.n_users + j]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.n_users, self.n_items, self.rows.copy())


def init_embedding_table(n_users: int, n_items: int, dim: int,
                         rng: np.random.Generator, scale: float | None = None) -> EmbeddingTable:
    """Seeded init, entries i.i.d. uniform on [-scale, +scale], default 1/sqrt(dim)."""
    if scale is None:
        scale = 1.0 / math.sqrt(dim)
    rows = rng.uniform(-scale, scale, size=(n_users + n_items, dim))
    return EmbeddingTable(n_users, n_items, rows)


@dataclass
class SparseGradient:
    """Gradient supported on a few distinct rows of the embedding table."""

    rows: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if vectors.shape[0] != rows.size:
            raise ValueError("one vector per row index required")
        if rows.size != np.unique(rows).size:
            raise ValueError("row indices must be distinct")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("gradient entries must be finite")
        self.rows = rows
        self.vectors = vectors


def pair_gradient(table: EmbeddingTable, user: int, item: int, y: int) -> SparseGradient:
    """Stochastic gradient of loss_dot at one sampled pair, in global row ids."""
    g_i, g_j = grad_pair(table.user_row(user), table.item_row(item), y)
    return SparseGradient(np.array([user, table.n_users + item]), np.stack([g_i, g_j]))


@dataclass(frozen=True)
class Example:
    """One training interaction: the touched token ids and a +/-1 label."""

    tokens: tuple[int, ...]
    label: int

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.label}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token ids must be distinct")


@dataclass
class FmParams:
    """Factorization machine parameters: bias, linear weights, factor table."""

    bias: float
    linear: np.ndarray
    embeddings: EmbeddingTable

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=np.float64)
        n = self.embeddings.rows.shape[0]
        if self.linear.shape != (n,):
            raise ValueError(f"linear weights must have shape ({n},)")
        if not (np.isfinite(self.bias) and np.all(np.isfinite(self.linear))):
            raise ValueError("FM parameters must be finite")


def fm_predict(example: Example, params: FmParams) -> float:
    """FM logit: bias + sum of linear weights + sum of pairwise factor dots."""
    idx = list(example.tokens)
    vecs = params.embeddings.rows[idx]
    s = vecs.sum(axis=0)
    pairwise = 0.5 * (float(np.dot(s, s)) - float(np.sum(vecs * vecs)))
    return float(params.bias + params.linear[idx].sum() + pairwise)


def fm_grad(example: Example, params: FmParams) -> tuple[float, list[tuple[int, float]], SparseGradient]:
    """Gradient of log(1+exp(-y*logit)) w.r.t. the touched FM parameters."""
    logit = fm_predict(example, params)
    y = example.label
    c = -y * float(expit(-y * logit))
    idx = list(example.tokens)
    vecs = params.embeddings.rows[idx]
    s = vecs.sum(axis=0)
    emb = SparseGradient(np.array(idx), c * (s[None, :] - vecs))
    return c, [(k, c) for k in idx], emb


def _conditional_coeff(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d loss / d logit for every cell: -y * sigmoid(-y * score)."""
    y = labels.astype(np.float64)
    return -y * expit(-y * scores)


def _check_capacity(joint: JointDistribution):
    if joint.n_users * joint.n_items > ORACLE_SUPPORT_LIMIT:
        raise CapacityError(
            f"support {joint.n_users}x{joint.n_items} exceeds the exact-oracle "
            f"limit of {ORACLE_SUPPORT_LIMIT} cells")


def population_objective(theta: EmbeddingTable, joint: JointDistribution) -> float:
    """Exact expected loss: sum over support of mass * pairwise logistic loss."""
    _check_capacity(joint)
    u = theta.rows[: theta.n_users]
    v = theta.rows[theta.n_users:]
    scores = u @ v.T
    losses = softplus(-joint.labels * scores)
    # Compensated summation keeps the oracle deterministic to ~1e-16.
    return math.fsum((joint.mass * losses).ravel().tolist())


def population_gradient(theta: EmbeddingTable, joint: JointDistribution) -> np.ndarray:
    """Exact gradient of population_objective, one row per token."""
    _check_capacity(joint)
    u = theta.rows[: theta.n_users]
    v = theta.rows[theta.n_users:]
    scores = u @ v.T
    weighted = joint.mass * _conditional_coeff(scores, joint.labels)
    out = np.empty_like(theta.rows)
    out[: theta.n_users] = weighted @ v
    out[theta.n_users:] = weighted.T @ u
    return out


def write_embeddings(path, table: EmbeddingTable) -> None:
    """Binary dump: magic FQG1, u64 row count, u64 dim, row-major float64, all LE."""
    rows = np.ascontiguousarray(table.rows, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes())


def read_embeddings(path) -> np.ndarray:
    """Read back the FQG1 binary format; returns the raw (N, dim) matrix."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
        n, d = struct.unpack("<QQ", fh.read(16))
        data = np.frombuffer(fh.read(n * d * 8), dtype="<f8")
        if data.size != n * d:
            raise ValueError("truncated embedding file")
        return data.reshape(n, d).astype(np.float64)
