"""The five sparse update rules and their per-row learning-rate schedules.

Schedule semantics by kind:

- ``sgd-constant``: every row steps with the literal constant ``alpha``.
  Theory-mode callers put min(1/(4L), alpha/sqrt(T)) there via ``sgd_rate``.
- ``fa-frequency``: per-token rate min(1/(4L), alpha/sqrt(T * p_k)) from a
  known token distribution, constant over time.
- ``cf-counter``: same formula with p_k replaced by the online estimate
  c_k / t read from the counter *before* the step's own counter increment;
  an unseen token (or an empty counter) gets the cap 1/(4L).
- ``adagrad`` / ``adam``: per-coordinate accumulators that only ever grow on
  touched rows, so untouched rows stay bit-identical (lazy sparse variants;
  Adam bias correction uses a per-row step count).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .models import EmbeddingTable, SparseGradient
from .tokenspace import JointDistribution, TokenCounter, sample_pairs

KINDS = ("sgd-constant", "fa-frequency", "cf-counter", "adagrad", "adam")


@dataclass(frozen=True)
class ScheduleSpec:
    """Immutable description of one learning-rate policy."""

    kind: str
    alpha: float
    L: float = 1.0
    T: int = 1
    epsilon: float = 1e-10
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}; choose from {KINDS}")
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.L > 0.0:
            raise ValueError(f"L must be positive, got {self.L}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")

    @property
    def cap(self) -> float:
        """The smoothness-limited maximum rate 1/(4L)."""
        return 1.0 / (4.0 * self.L)

    def with_horizon(self, T: int) -> "ScheduleSpec":
        return replace(self, T=T)


def fa_rate(schedule: ScheduleSpec, p_k: float) -> float:
    """Frequency-aware rate min(1/(4L), alpha / sqrt(T * p_k)); constant in t."""
    if not 0.0 < p_k <= 1.0:
        raise ValueError(f"token probability must lie in (0, 1], got {p_k}")
    return min(schedule.cap, schedule.alpha / math.sqrt(schedule.T * p_k))


def sgd_rate(schedule: ScheduleSpec) -> float:
    """Frequency-oblivious theory rate min(1/(4L), alpha / sqrt(T))."""
    return min(schedule.cap, schedule.alpha / math.sqrt(schedule.T))


def cf_rate(schedule: ScheduleSpec, counter: TokenCounter, token: int) -> float:
    """Counter-based rate; the zero-count cold start returns the cap."""
    if counter.total == 0 or counter.counts[token] == 0:
        return schedule.cap
    p_hat = counter.counts[token] / counter.total
    return min(schedule.cap, schedule.alpha / math.sqrt(schedule.T * p_hat))


def theoretical_alpha(f0_minus_fstar: float, L: float, weighted_sigma2: float) -> float:
    """Oracle base scale sqrt((f0 - f*) / (L * sum_k p_k sigma_k^2))."""
    for name, val in (("f0_minus_fstar", f0_minus_fstar), ("L", L),
                      ("weighted_sigma2", weighted_sigma2)):
        if not val > 0.0:
            raise ValueError(f"{name} must be positive, got {val}")
    return math.sqrt(f0_minus_fstar / (L * weighted_sigma2))


def select_output_iterate(T: int, kind: str, rng: np.random.Generator | None = None,
                          last: bool = False) -> int:
    """Pick the reported iterate: uniform over {0..T} (fa) or {T/2..T} (cf)."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if kind not in ("fa", "cf"):
        raise ValueError(f"kind must be 'fa' or 'cf', got {kind!r}")
    if last:
        return T
    if rng is None:
        raise ValueError("rng required unless last=True")
    lo = 0 if kind == "fa" else T // 2
    return int(rng.integers(lo, T + 1))


@dataclass
class OptimizerState:
    """Mutable per-run optimizer state; single-writer."""

    schedule: ScheduleSpec
    counter: TokenCounter | None = None          # cf-counter only
    token_probs: np.ndarray | None = None        # fa-frequency only
    acc2: np.ndarray | None = None               # adagrad/adam second moment
    m1: np.ndarray | None = None                 # adam first moment
    row_steps: np.ndarray | None = None          # adam per-row step counts
    step_index: int = 0


def make_optimizer_state(schedule: ScheduleSpec, n_users: int, n_items: int, dim: int,
                         token_probs: np.ndarray | None = None) -> OptimizerState:
    """Allocate whatever per-row state the schedule kind needs."""
    n = n_users + n_items
    state = OptimizerState(schedule=schedule)
    if schedule.kind == "fa-frequency":
        if token_probs is None:
            raise ValueError("fa-frequency needs per-token probabilities")
        token_probs = np.asarray(token_probs, dtype=np.float64)
        if token_probs.shape != (n,):
            raise ValueError(f"token_probs must have shape ({n},)")
        if np.any(token_probs <= 0.0) or np.any(token_probs > 1.0):
            raise ValueError("token probabilities must lie in (0, 1]")
        state.token_probs = token_probs
    elif schedule.kind == "cf-counter":
        state.counter = TokenCounter(n_users, n_items)
    elif schedule.kind == "adagrad":
        state.acc2 = np.zeros((n, dim))
    elif schedule.kind == "adam":
        state.acc2 = np.zeros((n, dim))
        state.m1 = np.zeros((n, dim))
        state.row_steps = np.zeros(n, dtype=np.int64)
    return state


def row_rates(state: OptimizerState, rows: np.ndarray) -> np.ndarray:
    """Per-row scalar rates for the non-adaptive kinds (sgd/fa/cf)."""
    sched = state.schedule
    rows = np.asarray(rows, dtype=np.int64)
    if sched.kind == "sgd-constant":
        return np.full(rows.size, sched.alpha)
    if sched.kind == "fa-frequency":
        return np.minimum(sched.cap,
                          sched.alpha / np.sqrt(sched.T * state.token_probs[rows]))
    if sched.kind == "cf-counter":
        return np.array([cf_rate(sched, state.counter, int(r)) for r in rows])
    raise ValueError(f"{sched.kind} has no scalar per-row rate")


def _project_rows(rows_matrix: np.ndarray, idx, radius: float) -> None:
    """Scale the selected rows back onto the radius ball.

    Both the stepwise API and the streaming loops project through this one
    function: vector-norm and row-norm kernels differ in the last bit, and
    reruns are promised to agree exactly.
    """
    norms = np.linalg.norm(rows_matrix[idx], axis=1)
    over = norms > radius
    if np.any(over):
        scale = np.ones_like(norms)
        scale[over] = radius / norms[over]
        rows_matrix[idx] *= scale[:, None]


def apply_sparse_step(theta, grad: SparseGradient, state: OptimizerState, *,
                      occurrences: np.ndarray | None = None, batch: int = 1,
                      project_radius: float = 0.0, advance: bool = True):
    """One optimizer step touching exactly the rows named in the gradient.

    ``theta`` may be an EmbeddingTable or a bare (N, dim) array. For
    cf-counter, rates come from the counter state before this step's
    increments; counters then advance by one per occurrence with the total
    advancing by ``batch``. ``advance=False`` applies the update but leaves
    counters and the step index alone, for secondary tensors that share one
    logical step with a primary call.
    """
    rows_matrix = theta.rows if isinstance(theta, EmbeddingTable) else theta
    sched = state.schedule
    if state.step_index >= sched.T:
        raise ValueError(f"step index {state.step_index} has reached the horizon T={sched.T}")
    idx = grad.rows
    if np.any(idx < 0) or np.any(idx >= rows_matrix.shape[0]):
        raise ValueError(f"gradient row ids {idx} out of range for {rows_matrix.shape[0]} rows")

    if sched.kind in ("sgd-constant", "fa-frequency", "cf-counter"):
        rates = row_rates(state, idx)
        rows_matrix[idx] -= rates[:, None] * grad.vectors
    elif sched.kind == "adagrad":
        state.acc2[idx] += grad.vectors**2
        rows_matrix[idx] -= sched.alpha * grad.vectors / (np.sqrt(state.acc2[idx]) + sched.epsilon)
    elif sched.kind == "adam":
        state.row_steps[idx] += 1
        t_rows = state.row_steps[idx].astype(np.float64)[:, None]
        state.m1[idx] = sched.beta1 * state.m1[idx] + (1.0 - sched.beta1) * grad.vectors
        state.acc2[idx] = sched.beta2 * state.acc2[idx] + (1.0 - sched.beta2) * grad.vectors**2
        m_hat = state.m1[idx] / (1.0 - sched.beta1**t_rows)
        v_hat = state.acc2[idx] / (1.0 - sched.beta2**t_rows)
        rows_matrix[idx] -= sched.alpha * m_hat / (np.sqrt(v_hat) + sched.epsilon)

    if project_radius > 0.0:
        _project_rows(rows_matrix, idx, project_radius)

    if advance:
        if state.counter is not None:
            occ = np.ones(idx.size, dtype=np.int64) if occurrences is None \
                else np.asarray(occurrences, dtype=np.int64)
            state.counter.counts[idx] += occ
            state.counter.total += int(batch)
        state.step_index += 1
    return theta, state


def run_pairwise(joint: JointDistribution, theta: EmbeddingTable, schedule: ScheduleSpec,
                 steps: int, rng: np.random.Generator, *, token_probs: np.ndarray | None = None,
                 project_radius: float = 0.0, snapshot_stride: int = 0,
                 snapshot_fn=None) -> EmbeddingTable:
    """Single-sample training stream on the pairwise dot model.

    Draws ``steps`` pairs from the joint, applies one sparse step each, and
    optionally calls ``snapshot_fn(step, theta)`` at step 0, every
    ``snapshot_stride`` steps, and at the end. Mutates and returns ``theta``.
    """
    state = make_optimizer_state(schedule, joint.n_users, joint.n_items, theta.dim,
                                 token_probs=token_probs)
    users, items, labels = sample_pairs(joint, rng, steps)
    n_users = joint.n_users
    rows = theta.rows

    # Non-adaptive rates are constant in time; precompute them per token.
    rate_table = None
    if schedule.kind == "sgd-constant":
        rate_table = np.full(n_users + joint.n_items, schedule.alpha)
    elif schedule.kind == "fa-frequency":
        probs = state.token_probs
        rate_table = np.minimum(schedule.cap, schedule.alpha / np.sqrt(schedule.T * probs))

    counter = state.counter
    pair_idx = np.empty(2, dtype=np.int64)
    if snapshot_fn is not None:
        snapshot_fn(0, theta)
    for t in range(steps):
        i = int(users[t])
        gj = int(items[t])
        j = n_users + gj
        y = float(labels[t])
        u = rows[i]
        v = rows[j]
        s = float(u @ v)
        c = -y * float(expit(-y * s))
        g_i = c * v
        g_j = c * u
        if rate_table is not None:
            r_i = rate_table[i]
            r_j = rate_table[j]
        elif schedule.kind == "cf-counter":
            r_i = cf_rate(schedule, counter, i)
            r_j = cf_rate(schedule, counter, j)
        else:
            raise ValueError(f"run_pairwise supports sgd/fa/cf kinds, not {schedule.kind!r}")
        rows[i] = u - r_i * g_i
        rows[j] = v - r_j * g_j
        if project_radius > 0.0:
            pair_idx[0] = i
            pair_idx[1] = j
            _project_rows(rows, pair_idx, project_radius)
        if counter is not None:
            counter.counts[i] += 1
            counter.counts[j] += 1
            counter.total += 1
        if snapshot_fn is not None and (
                (snapshot_stride > 0 and (t + 1) % snapshot_stride == 0) or t + 1 == steps):
            snapshot_fn(t + 1, theta)
    state.step_index = steps
    return theta


def run_pairwise_many(joint: JointDistribution, thetas: np.ndarray, schedule: ScheduleSpec,
                      steps: int, rngs: list[np.random.Generator], *,
                      token_probs: np.ndarray | None = None,
                      project_radius: float = 0.0,
                      alphas: np.ndarray | None = None,
                      snapshot_stride: int = 0, snapshot_fn=None) -> np.ndarray:
    """Seed-vectorized run_pairwise for sgd/fa kinds.

    ``thetas`` has shape (runs, N, dim); each run consumes its own rng for
    the sample stream, and ``alphas`` (shape (runs,)) overrides the shared
    ``schedule.alpha`` per run. ``snapshot_fn(t, thetas)`` fires at step 0,
    every ``snapshot_stride`` steps, and at the end, mirroring run_pairwise.
    Results agree with run_pairwise to float rounding (summation order
    differs), not bit-exactly.
    """
    runs, n_rows, _ = thetas.shape
    alpha_vec = np.full(runs, schedule.alpha) if alphas is None \
        else np.asarray(alphas, dtype=np.float64)
    if alpha_vec.shape != (runs,):
        raise ValueError(f"alphas must have shape ({runs},)")
    if schedule.kind == "sgd-constant":
        rate_table = np.repeat(alpha_vec[:, None], joint.n_tokens, axis=1)
    elif schedule.kind == "fa-frequency":
        per_token = 1.0 / np.sqrt(schedule.T * np.asarray(token_probs, dtype=np.float64))
        rate_table = np.minimum(schedule.cap, alpha_vec[:, None] * per_token[None, :])
    else:
        raise ValueError("run_pairwise_many supports sgd-constant and fa-frequency only")

    drawn = [sample_pairs(joint, rng, steps) for rng in rngs]
    users = np.stack([d[0] for d in drawn])            # (runs, steps)
    items = np.stack([d[1] for d in drawn]) + joint.n_users
    labels = np.stack([d[2] for d in drawn]).astype(np.float64)
    run_ix = np.arange(runs)

    if snapshot_fn is not None:
        snapshot_fn(0, thetas)
    for t in range(steps):
        i = users[:, t]
        j = items[:, t]
        y = labels[:, t]
        u = thetas[run_ix, i]
        v = thetas[run_ix, j]
        s = np.einsum("rd,rd->r", u, v)
        c = -y * expit(-y * s)
        g_i = c[:, None] * v
        g_j = c[:, None] * u
        thetas[run_ix, i] = u - rate_table[run_ix, i][:, None] * g_i
        thetas[run_ix, j] = v - rate_table[run_ix, j][:, None] * g_j
        if project_radius > 0.0:
            for idx in (i, j):
                rows = thetas[run_ix, idx]
                norms = np.linalg.norm(rows, axis=1)
                over = norms > project_radius
                if np.any(over):
                    rows[over] *= (project_radius / norms[over])[:, None]
                    thetas[run_ix[over], idx[over]] = rows[over]
        if snapshot_fn is not None and (
                (snapshot_stride > 0 and (t + 1) % snapshot_stride == 0) or t + 1 == steps):
            snapshot_fn(t + 1, thetas)
    return thetas
