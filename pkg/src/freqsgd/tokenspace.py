"""Token frequency distributions, synthetic joints, alias sampling, counters.

Tokens are users and items. Each side carries a marginal distribution over
its own set (summing to 1 per side); a joint distribution over (user, item)
pairs ties the two sides together. Ranks in the tail families are 1-based,
matching the usual rank-frequency convention; storage indices are 0-based.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

PROB_SUM_TOL = 1e-12

# Numeric CSV fields are written with 17 significant digits so that parsing
# the file back recovers the exact double.
FLOAT_FMT = "%.17g"


def _fmt(x: float) -> str:
    return FLOAT_FMT % float(x)


@dataclass(frozen=True)
class TokenDistribution:
    """Marginal frequencies over one token set (users or items)."""

    probs: np.ndarray
    sorted_by_rank: bool = False

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 1:
            raise ValueError("probs must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(probs)):
            raise ValueError("probs must be finite")
        if np.any(probs <= 0.0) or np.any(probs > 1.0):
            raise ValueError("every probability must lie in (0, 1]")
        total = math.fsum(probs.tolist())
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"probabilities sum to {total!r}, expected 1 within {PROB_SUM_TOL}")
        if self.sorted_by_rank and np.any(np.diff(probs) > 0.0):
            raise ValueError("sorted-by-rank distribution must be non-increasing")
        probs = probs.copy()
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @property
    def size(self) -> int:
        return int(self.probs.size)


def make_exp_tail(size: int, tau: float) -> TokenDistribution:
    """Geometric rank-frequency law p_n proportional to exp(-tau*n), n = 1..size."""
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    a = math.exp(-tau)
    n = np.arange(size, dtype=np.float64)
    # Normalized closed form (1-a) a^(n-1) / (1-a^size); anchoring the
    # exponent at the top rank postpones underflow as long as possible.
    probs = np.exp(-tau * n) * ((1.0 - a) / (1.0 - a**size))
    if probs[-1] == 0.0:
        raise ValueError(
            f"exp tail underflows float64 at size={size}, tau={tau}; "
            f"the smallest probability is below the smallest subnormal double"
        )
    return TokenDistribution(probs, sorted_by_rank=True)


def make_poly_tail(size: int, nu: float) -> TokenDistribution:
    """Power-law rank-frequency p_n proportional to n^(-nu), requiring nu >= 2."""
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    if not nu >= 2.0:
        raise ValueError(f"nu must be >= 2, got {nu}")
    n = np.arange(1, size + 1, dtype=np.float64)
    w = n**-nu
    return TokenDistribution(w / math.fsum(w.tolist()), sorted_by_rank=True)


def make_uniform(size: int) -> TokenDistribution:
    """Uniform frequencies, every token at 1/size."""
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    return TokenDistribution(np.full(size, 1.0 / size), sorted_by_rank=True)


def top_set(dist: TokenDistribution, factor: float) -> set[int]:
    """1-based ranks whose frequency is within `factor` of the top frequency."""
    if not dist.sorted_by_rank:
        raise ValueError("top_set requires a sorted-by-rank distribution")
    if not factor > 1.0:
        raise ValueError(f"factor must be > 1, got {factor}")
    keep = dist.probs >= dist.probs[0] / factor
    return set(int(n) for n in np.nonzero(keep)[0] + 1)


@dataclass(frozen=True)
class JointDistribution:
    """Interaction distribution over user x item pairs with fixed labels.

    `mass` and `labels` are dense (n_users, n_items) arrays; cells with zero
    mass are outside the support and their label is ignored.
    """

    n_users: int
    n_items: int
    mass: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1:
            raise ValueError("n_users and n_items must be >= 1")
        mass = np.asarray(self.mass, dtype=np.float64)
        labels = np.asarray(self.labels)
        shape = (self.n_users, self.n_items)
        if mass.shape != shape or labels.shape != shape:
            raise ValueError(f"mass and labels must have shape {shape}")
        if np.any(mass < 0.0) or not np.all(np.isfinite(mass)):
            raise ValueError("masses must be finite and non-negative")
        total = math.fsum(mass.ravel().tolist())
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"masses sum to {total!r}, expected 1 within {PROB_SUM_TOL}")
        support = mass > 0.0
        if not np.all(np.isin(labels[support], (-1, 1))):
            raise ValueError("labels on the support must be -1 or +1")
        # Marginals must themselves be valid token distributions, which in
        # particular forces every user and item to carry positive mass.
        row = mass.sum(axis=1)
        col = mass.sum(axis=0)
        if np.any(row <= 0.0) or np.any(col <= 0.0):
            raise ValueError("every user and item must have positive marginal mass")
        mass = mass.copy()
        mass.flags.writeable = False
        labels = labels.astype(np.int8).copy()
        labels.flags.writeable = False
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "labels", labels)

    @property
    def n_tokens(self) -> int:
        return self.n_users + self.n_items

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.mass))

    def user_marginal(self) -> TokenDistribution:
        return TokenDistribution(self.mass.sum(axis=1))

    def item_marginal(self) -> TokenDistribution:
        return TokenDistribution(self.mass.sum(axis=0))

    def token_marginals(self) -> np.ndarray:
        """Per-token marginal p_k over X = users + items (each side sums to 1)."""
        return np.concatenate([self.mass.sum(axis=1), self.mass.sum(axis=0)])

    def sampler(self) -> "AliasSampler":
        """Alias table over support cells, built once and cached."""
        cached = getattr(self, "_sampler", None)
        if cached is None:
            cached = AliasSampler(self.mass.ravel())
            object.__setattr__(self, "_sampler", cached)
        return cached


def make_product_joint(user_dist: TokenDistribution, item_dist: TokenDistribution,
                       label_rule) -> JointDistribution:
    """Product joint: mass(i, j) = p_i * p_j, labels from label_rule(i, j)."""
    mass = np.outer(user_dist.probs, item_dist.probs)
    n_u, n_v = user_dist.size, item_dist.size
    labels = np.empty((n_u, n_v), dtype=np.int8)
    for i in range(n_u):
        for j in range(n_v):
            labels[i, j] = label_rule(i, j)
    return JointDistribution(n_u, n_v, mass, labels)


class AliasSampler:
    """O(1)-per-draw sampling from a fixed discrete distribution (alias method)."""

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64).ravel()
        k = probs.size
        if k < 1:
            raise ValueError("need at least one outcome")
        scaled = probs * k / probs.sum()
        self.accept = np.zeros(k, dtype=np.float64)
        self.alias = np.zeros(k, dtype=np.int64)
        small = [i for i in range(k) if scaled[i] < 1.0]
        large = [i for i in range(k) if scaled[i] >= 1.0]
        scaled = scaled.copy()
        while small and large:
            s = small.pop()
            g = large.pop()
            self.accept[s] = scaled[s]
            self.alias[s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            (small if scaled[g] < 1.0 else large).append(g)
        for rest in (large, small):
            while rest:
                self.accept[rest.pop()] = 1.0

    def draw(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray | int:
        n = 1 if size is None else int(size)
        cells = rng.integers(0, self.accept.size, size=n)
        keep = rng.random(n) < self.accept[cells]
        out = np.where(keep, cells, self.alias[cells])
        return int(out[0]) if size is None else out


def sample_pair(joint: JointDistribution, rng: np.random.Generator) -> tuple[int, int, int]:
    """Draw one (user, item, label) triple with probability equal to its mass."""
    cell = joint.sampler().draw(rng)
    i, j = divmod(cell, joint.n_items)
    return i, j, int(joint.labels[i, j])


def sample_pairs(joint: JointDistribution, rng: np.random.Generator,
                 size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized sample_pair: arrays (users, items, labels) of length `size`."""
    cells = joint.sampler().draw(rng, size)
    users, items = np.divmod(cells, joint.n_items)
    return users, items, joint.labels[users, items].astype(np.int64)


@dataclass
class TokenCounter:
    """Online occurrence counts over X = users + items; single-writer."""

    n_users: int
    n_items: int
    counts: np.ndarray = field(default=None)
    total: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.n_users + self.n_items, dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.n_users + self.n_items,):
                raise ValueError("counts length must equal n_users + n_items")
            if np.any(self.counts < 0):
                raise ValueError("counts must be non-negative")

    def estimate(self, token: int) -> float:
        """p-hat for one token; 0 when nothing has been counted yet."""
        if self.total == 0:
            return 0.0
        return float(self.counts[token]) / float(self.total)

    def estimates(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts / float(self.total)


def counter_update(counter: TokenCounter, user: int, item: int) -> TokenCounter:
    """Record one sampled pair: both touched tokens +1, total +1."""
    if not (0 <= user < counter.n_users):
        raise ValueError(f"user index {user} out of range [0, {counter.n_users})")
    if not (0 <= item < counter.n_items):
        raise ValueError(f"item index {item} out of range [0, {counter.n_items})")
    counter.counts[user] += 1
    counter.counts[counter.n_users + item] += 1
    counter.total += 1
    return counter


def distribution_to_csv(dist: TokenDistribution) -> str:
    out = io.StringIO()
    out.write("rank,prob\n")
    for n, p in enumerate(dist.probs, start=1):
        out.write(f"{n},{_fmt(p)}\n")
    return out.getvalue()


def distribution_from_csv(text: str, sorted_by_rank: bool = False) -> TokenDistribution:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "rank,prob":
        raise ValueError("expected header 'rank,prob'")
    probs = []
    for ln in lines[1:]:
        rank_s, prob_s = ln.split(",")
        if int(rank_s) != len(probs) + 1:
            raise ValueError(f"ranks must be contiguous from 1, got {rank_s}")
        probs.append(float(prob_s))
    return TokenDistribution(np.array(probs), sorted_by_rank=sorted_by_rank)


def joint_to_csv(joint: JointDistribution) -> str:
    out = io.StringIO()
    out.write("user,item,mass,label\n")
    for i in range(joint.n_users):
        for j in range(joint.n_items):
            m = joint.mass[i, j]
            if m > 0.0:
                out.write(f"{i},{j},{_fmt(m)},{int(joint.labels[i, j])}\n")
    return out.getvalue()


def joint_from_csv(text: str) -> JointDistribution:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "user,item,mass,label":
        raise ValueError("expected header 'user,item,mass,label'")
    rows = []
    for ln in lines[1:]:
        u_s, v_s, m_s, y_s = ln.split(",")
        rows.append((int(u_s), int(v_s), float(m_s), int(y_s)))
    if not rows:
        raise ValueError("joint CSV has no support cells")
    n_u = max(r[0] for r in rows) + 1
    n_v = max(r[1] for r in rows) + 1
    mass = np.zeros((n_u, n_v))
    labels = np.ones((n_u, n_v), dtype=np.int8)
    for u, v, m, y in rows:
        mass[u, v] = m
        labels[u, v] = y
    return JointDistribution(n_u, n_v, mass, labels)
