"""Exact small-instance diagnostics for the frequency-adaptive schedules.

Everything here enumerates the joint support directly (no sampling), in a
fixed row-major order with compensated summation, so repeated runs agree to
~1e-15. The quantities: unbiasedness of the sparse stochastic gradient, the
two-sided variance sandwich, per-block smoothness, the per-token rate-bound
improvement ratio, the tail-family speedup factors, and the second-moment /
frequency correlation of adaptive methods.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .models import EmbeddingTable, grad_pair, population_gradient, _check_capacity
from .optimizers import ScheduleSpec, run_pairwise
from .rng import stream
from .tokenspace import (JointDistribution, TokenCounter, TokenDistribution,
                         make_exp_tail, make_poly_tail)


@dataclass(frozen=True)
class VarianceReport:
    """Exact gradient variance and its two-sided frequency bounds."""

    exact_variance: float
    lower_bound: float
    upper_bound: float
    per_token_sigma2: np.ndarray

    def to_jsonable(self) -> dict:
        return {
            "exact_variance": self.exact_variance,
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "per_token_sigma2": [float(x) for x in self.per_token_sigma2],
        }


@dataclass(frozen=True)
class SpeedupReport:
    """Per-token rate-bound ratios and the tail-family speedup predictions."""

    per_token_ratio: np.ndarray
    tail_factor_bound: np.ndarray

    def to_jsonable(self) -> dict:
        return {
            "gamma": [float(x) for x in self.per_token_ratio],
            "tail_factor_bound": [float(x) for x in self.tail_factor_bound],
        }


def _cell_gradients(theta: EmbeddingTable, joint: JointDistribution):
    """Iterate support cells in row-major order with their sparse gradients."""
    for i in range(joint.n_users):
        for j in range(joint.n_items):
            m = float(joint.mass[i, j])
            if m == 0.0:
                continue
            g_i, g_j = grad_pair(theta.user_row(i), theta.item_row(j),
                                 int(joint.labels[i, j]))
            yield i, j, m, g_i, g_j


def check_unbiasedness(theta: EmbeddingTable, joint: JointDistribution) -> float:
    """Max deviation between enumerated E[g] and the exact population gradient.

    Also verifies the conditional form: the expected sampled-row gradient
    given that token k was drawn equals (population row k) / p_k, for every
    user and every item. Returns the largest absolute deviation seen.
    """
    _check_capacity(joint)
    n_u, n_v = joint.n_users, joint.n_items
    grad = population_gradient(theta, joint)
    expected = np.zeros_like(grad)
    cond_u = np.zeros((n_u, theta.dim))
    cond_v = np.zeros((n_v, theta.dim))
    for i, j, m, g_i, g_j in _cell_gradients(theta, joint):
        expected[i] += m * g_i
        expected[n_u + j] += m * g_j
        cond_u[i] += m * g_i
        cond_v[j] += m * g_j
    dev = float(np.max(np.abs(expected - grad)))
    p_u = joint.mass.sum(axis=1)
    p_v = joint.mass.sum(axis=0)
    dev = max(dev, float(np.max(np.abs(cond_u / p_u[:, None] - grad[:n_u] / p_u[:, None]))))
    dev = max(dev, float(np.max(np.abs(cond_v / p_v[:, None] - grad[n_u:] / p_v[:, None]))))
    return dev


def variance_report(theta: EmbeddingTable, joint: JointDistribution) -> VarianceReport:
    """Exact Var(g) with the frequency sandwich evaluated at this table.

    sigma_k^2 is the pointwise conditional variance of (population row k)/p_k
    minus the sampled row-k gradient, given that token k was drawn.
    """
    _check_capacity(joint)
    n_u, n_v = joint.n_users, joint.n_items
    grad = population_gradient(theta, joint)
    p = np.concatenate([joint.mass.sum(axis=1), joint.mass.sum(axis=0)])
    row_sq = np.einsum("nd,nd->n", grad, grad)
    total_sq = math.fsum(row_sq.tolist())

    exact_terms = []
    sigma_terms = [[] for _ in range(n_u + n_v)]
    for i, j, m, g_i, g_j in _cell_gradients(theta, joint):
        gi_dev = g_i - grad[i]
        gj_dev = g_j - grad[n_u + j]
        off_rows = total_sq - row_sq[i] - row_sq[n_u + j]
        exact_terms.append(m * (float(gi_dev @ gi_dev) + float(gj_dev @ gj_dev) + off_rows))
        cond_i = grad[i] / p[i] - g_i
        cond_j = grad[n_u + j] / p[n_u + j] - g_j
        sigma_terms[i].append((m / p[i]) * float(cond_i @ cond_i))
        sigma_terms[n_u + j].append((m / p[n_u + j]) * float(cond_j @ cond_j))

    exact = math.fsum(exact_terms)
    sigma2 = np.array([math.fsum(terms) for terms in sigma_terms])
    lower = math.fsum(((1.0 / p - 1.0) * row_sq).tolist())
    upper = lower + math.fsum((p * sigma2).tolist())
    return VarianceReport(exact, lower, upper, sigma2)


def block_smoothness(L: float, dist: TokenDistribution, k: int) -> float:
    """Per-token smoothness constant 2 * L * p_k for 1-based rank k."""
    if not 1 <= k <= dist.size:
        raise ValueError(f"rank {k} out of range 1..{dist.size}")
    return 2.0 * L * float(dist.probs[k - 1])


def improvement_ratio(dist_users: TokenDistribution, dist_items: TokenDistribution,
                      sigma2: np.ndarray, k: int) -> float:
    """Rate-bound ratio sqrt(p_k * sum p_l s_l^2) / sqrt(sum p_l^2 s_l^2).

    ``k`` is a 0-based storage index into the combined token set (users then
    items); ``sigma2`` has one entry per combined token.
    """
    p = np.concatenate([dist_users.probs, dist_items.probs])
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if sigma2.shape != p.shape:
        raise ValueError(f"sigma2 must have {p.size} entries, got {sigma2.size}")
    if np.any(sigma2 < 0.0):
        raise ValueError("sigma2 entries must be non-negative")
    if not np.any(sigma2 > 0.0):
        raise ValueError("sigma2 must not be all zero")
    if not 0 <= k < p.size:
        raise ValueError(f"token index {k} out of range 0..{p.size - 1}")
    num = math.sqrt(p[k] * math.fsum((p * sigma2).tolist()))
    den = math.sqrt(math.fsum((p * p * sigma2).tolist()))
    return num / den


def tail_top_size(kind: str, param: float, size: int) -> int:
    """Head-of-tail size used by the speedup factors.

    For the geometric tail the head is the ranks up to 1/tau (empty when
    tau > 1); for the power tail it is the ranks whose unnormalized weight
    n^-nu stays within the 16-factor of rank 1, i.e. floor(16^(1/nu)).
    """
    if kind == "exp":
        return min(size, int(math.floor(1.0 / param)))
    if kind == "poly":
        return min(size, int(math.floor(16.0 ** (1.0 / param))))
    raise ValueError(f"kind must be 'exp' or 'poly', got {kind!r}")


def tail_speedup_bound(dist: TokenDistribution, kind: str, param: float, rank: int) -> float:
    """Predicted rare-token speedup factor for 1-based ``rank``.

    exp kind: exp(tau * (rank - head)); poly kind: (rank / head)^nu. The
    distribution must actually be the claimed tail family.
    """
    if not 1 <= rank <= dist.size:
        raise ValueError(f"rank {rank} out of range 1..{dist.size}")
    if kind == "exp":
        reference = make_exp_tail(dist.size, param)
    elif kind == "poly":
        reference = make_poly_tail(dist.size, param)
    else:
        raise ValueError(f"kind must be 'exp' or 'poly', got {kind!r}")
    if not np.allclose(dist.probs, reference.probs, rtol=1e-9, atol=0.0):
        raise ValueError(f"distribution does not match the {kind} tail with parameter {param}")
    head = tail_top_size(kind, param, dist.size)
    if kind == "exp":
        return math.exp(param * (rank - head))
    return (rank / head) ** param


def make_random_instance(rng: np.random.Generator,
                         max_users: int = 8, max_items: int = 8,
                         max_dim: int = 4) -> tuple[EmbeddingTable, JointDistribution]:
    """Random fully-supported small instance for the exact diagnostics."""
    n_users = int(rng.integers(2, max_users + 1))
    n_items = int(rng.integers(2, max_items + 1))
    dim = int(rng.integers(1, max_dim + 1))
    mass = rng.dirichlet(np.ones(n_users * n_items)).reshape(n_users, n_items)
    labels = rng.choice(np.array([-1, 1], dtype=np.int8), size=(n_users, n_items))
    joint = JointDistribution(n_users, n_items, mass, labels)
    rows = rng.uniform(-1.0, 1.0, size=(n_users + n_items, dim))
    return EmbeddingTable(n_users, n_items, rows), joint


def make_paired_instance(rng: np.random.Generator,
                         n: int, dim: int = 3) -> tuple[EmbeddingTable, JointDistribution]:
    """Instance where each user pairs with exactly one item (a permutation).

    Conditioned on a token being drawn there is a single possible partner, so
    every conditional variance is zero and the exact gradient variance sits
    on the lower bound.
    """
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    perm = rng.permutation(n)
    probs = rng.dirichlet(np.ones(n))
    mass = np.zeros((n, n))
    mass[np.arange(n), perm] = probs
    labels = np.zeros((n, n), dtype=np.int8)
    labels[np.arange(n), perm] = rng.choice(np.array([-1, 1], dtype=np.int8), size=n)
    joint = JointDistribution(n, n, mass, labels)
    rows = rng.uniform(-1.0, 1.0, size=(2 * n, dim))
    return EmbeddingTable(n, n, rows), joint


def moment_frequency_correlation(accumulator_row_sums: np.ndarray,
                                 counter: TokenCounter) -> float:
    """Pearson r between adaptive second-moment row sums and token counts."""
    acc = np.asarray(accumulator_row_sums, dtype=np.float64)
    counts = counter.counts.astype(np.float64)
    if acc.shape != counts.shape:
        raise ValueError(f"accumulator has {acc.size} rows but counter has {counts.size} tokens")
    if np.ptp(acc) == 0.0 or np.ptp(counts) == 0.0:
        raise ValueError("degenerate input: both sequences need nonzero variance")
    r, _ = stats.pearsonr(acc, counts)
    return float(r)


def gradnorm_trajectory(joint: JointDistribution, theta0: EmbeddingTable,
                        schedule: ScheduleSpec, steps: int, stride: int, seed: int, *,
                        token_probs: np.ndarray | None = None,
                        project_radius: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-token squared population-gradient norms along one training stream.

    Returns (snapshot steps, matrix of shape (snapshots, n_tokens)). Snapshots
    land at step 0, every ``stride`` steps, and at the final step. The stream
    is the 'sampler' stream of ``seed``; identical seeds give identical series.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    _check_capacity(joint)
    steps_seen: list[int] = []
    norms: list[np.ndarray] = []

    def snapshot(t: int, table: EmbeddingTable):
        grad = population_gradient(table, joint)
        steps_seen.append(t)
        norms.append(np.einsum("nd,nd->n", grad, grad))

    theta = theta0.copy()
    run_pairwise(joint, theta, schedule, steps, stream(seed, "sampler"),
                 token_probs=token_probs, project_radius=project_radius,
                 snapshot_stride=stride, snapshot_fn=snapshot)
    return np.array(steps_seen), np.stack(norms)
