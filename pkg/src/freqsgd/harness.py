"""Config-driven experiment runner: training loop, metrics, early stopping.

One run is a pure function of (config, seed): data assembly, splits,
initialization, and batch order all draw from named streams of the single
run seed, and every output file is written with exact decimal formatting,
so reruns are byte-identical.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .config import SCHEMA, resolve
from .dataio import (EpochRecord, binarize, export_metrics, load_movielens,
                     split, write_manifest)
from .models import (EmbeddingTable, Example, SparseGradient,
                     init_embedding_table, population_gradient,
                     population_objective, smoothness_bound, softplus,
                     write_embeddings)
from .optimizers import (OptimizerState, ScheduleSpec, apply_sparse_step,
                         make_optimizer_state, run_pairwise_many, theoretical_alpha)
from .rng import stream
from .theory import tail_top_size, variance_report
from .tokenspace import (JointDistribution, TokenCounter, make_exp_tail,
                         make_poly_tail, make_uniform, sample_pairs)


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties 1/2.

    Computed from the rank-sum statistic; exactly equal to brute-force pair
    counting because tied ranks are half-integers.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores and labels must be matching non-empty 1-d sequences")
    if not np.all(np.isin(labels, (-1, 1))):
        raise ValueError("labels must be -1 or +1")
    pos = labels == 1
    n_pos = int(np.count_nonzero(pos))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate input: need at least one positive and one negative label")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    """Mean logistic loss log(1 + exp(-y * score)) over the examples."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("logloss needs at least one example")
    return float(np.mean(softplus(-labels * scores)))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; build from a config mapping via from_mapping."""

    data_kind: str
    data_path: str
    users: int
    items: int
    tail: str
    tau: float
    nu: float
    examples: int
    model_kind: str
    dim: int
    schedule: ScheduleSpec
    batch: int
    epochs: int
    seed: int
    patience: int
    stride: int
    out_dir: str

    def __post_init__(self):
        if self.data_kind not in ("synthetic", "movielens"):
            raise ValueError(f"data.kind must be synthetic or movielens, got {self.data_kind!r}")
        if self.tail not in ("exp", "poly", "uniform"):
            raise ValueError(f"data.tail must be exp, poly or uniform, got {self.tail!r}")
        if self.model_kind not in ("dot", "fm"):
            raise ValueError(f"model.kind must be dot or fm, got {self.model_kind!r}")
        if self.epochs < 1:
            raise ValueError(f"run.epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ValueError(f"opt.batch must be >= 1, got {self.batch}")
        if self.patience < 0:
            raise ValueError(f"run.patience must be >= 0, got {self.patience}")

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "ExperimentConfig":
        cfg = resolve(raw)
        # T = 0 means "derive from epochs x steps-per-epoch" once data is sized.
        schedule = ScheduleSpec(
            kind=cfg["opt.kind"], alpha=cfg["opt.alpha"], L=cfg["opt.L"],
            T=max(1, cfg["opt.T"]), epsilon=cfg["opt.eps"],
            beta1=cfg["opt.beta1"], beta2=cfg["opt.beta2"])
        obj = cls(
            data_kind=cfg["data.kind"], data_path=cfg["data.path"],
            users=cfg["data.users"], items=cfg["data.items"], tail=cfg["data.tail"],
            tau=cfg["data.tau"], nu=cfg["data.nu"], examples=cfg["data.examples"],
            model_kind=cfg["model.kind"], dim=cfg["model.dim"], schedule=schedule,
            batch=cfg["opt.batch"], epochs=cfg["run.epochs"], seed=cfg["run.seed"],
            patience=cfg["run.patience"], stride=cfg["run.stride"], out_dir=cfg["run.out"])
        object.__setattr__(obj, "_auto_T", cfg["opt.T"] == 0)
        object.__setattr__(obj, "_raw", dict(raw))
        return obj

    def to_mapping(self) -> dict[str, str]:
        """Config echo for the manifest: defaults filled in, values as written."""
        raw = getattr(self, "_raw", {})
        return {key: raw.get(key, default) for key, (_, default) in SCHEMA.items()}

    @property
    def project_radius(self) -> float:
        raw = getattr(self, "_raw", {})
        return float(raw.get("opt.project_radius", "0.0"))


def make_tail_distribution(tail: str, size: int, tau: float, nu: float):
    if tail == "exp":
        return make_exp_tail(size, tau)
    if tail == "poly":
        return make_poly_tail(size, nu)
    return make_uniform(size)


def planted_joint(users_dist, items_dist, dim: int, seed: int) -> JointDistribution:
    """Product joint with labels sign(<u*, v*>) under a hidden planted table."""
    rng = stream(seed, "planted")
    table = init_embedding_table(users_dist.size, items_dist.size, dim, rng)
    scores = table.rows[: users_dist.size] @ table.rows[users_dist.size:].T
    labels = np.where(scores >= 0.0, 1, -1).astype(np.int8)
    return JointDistribution(users_dist.size, items_dist.size,
                             np.outer(users_dist.probs, items_dist.probs), labels)


def tail_speedup_experiment(size: int = 100, nu: float = 2.0, dim: int = 8,
                            steps: int = 200_000, n_seeds: int = 20,
                            radius: float = 1.0, planted_seed: int = 123,
                            first_seed: int = 0) -> dict:
    """Paired frequency-aware vs constant-rate comparison on a planted instance.

    Both methods start from the same per-seed tables, consume the same sample
    streams, and use their own oracle base scale: the frequency-aware runs
    weight the per-token conditional variances by p_k, the constant-rate runs
    by p_k^2, each divided by L(f0 - f*) with f* taken as 0 (the loss is
    non-negative). Rates are clipped at 1/(4L) and iterates projected onto
    the radius ball, so L = smoothness_bound(radius) is valid throughout.

    Returns per-token terminal population-gradient norms averaged over seeds,
    the constant-over-frequency-aware ratio, the within-side ranks, the top-set
    cutoff, the tail tokens where the frequency-aware mean is larger, and the
    Kendall rank correlation of the ratio against rank.
    """
    from scipy.stats import kendalltau

    if radius <= 0.0:
        raise ValueError("radius must be positive; the rate cap needs a finite L")
    dist = make_poly_tail(size, nu)
    joint = planted_joint(dist, dist, dim, planted_seed)
    probs = joint.token_marginals()
    L = smoothness_bound(radius)
    cap = 1.0 / (4.0 * L)

    theta0 = np.empty((n_seeds, 2 * size, dim))
    alpha_fa = np.empty(n_seeds)
    rate_sgd = np.empty(n_seeds)
    for s in range(n_seeds):
        seed = first_seed + s
        table = init_embedding_table(size, size, dim, stream(seed, "init"))
        theta0[s] = table.rows
        f0 = population_objective(table, joint)
        sigma2 = np.asarray(variance_report(table, joint).per_token_sigma2)
        alpha_fa[s] = theoretical_alpha(f0, L, float(probs @ sigma2))
        a_sgd = theoretical_alpha(f0, L, float((probs**2) @ sigma2))
        rate_sgd[s] = min(cap, a_sgd / math.sqrt(steps))

    def final_norms(kind: str, alphas: np.ndarray) -> np.ndarray:
        sched = ScheduleSpec(kind=kind, alpha=1.0, L=L, T=steps)
        rngs = [stream(first_seed + s, "sampler") for s in range(n_seeds)]
        thetas = run_pairwise_many(
            joint, theta0.copy(), sched, steps, rngs,
            token_probs=probs if kind == "fa-frequency" else None,
            project_radius=radius, alphas=alphas)
        norms = np.empty((n_seeds, 2 * size))
        for s in range(n_seeds):
            grad = population_gradient(EmbeddingTable(size, size, thetas[s]), joint)
            norms[s] = np.einsum("nd,nd->n", grad, grad)
        return norms

    fa_mean = final_norms("fa-frequency", alpha_fa).mean(axis=0)
    sgd_mean = final_norms("sgd-constant", rate_sgd).mean(axis=0)

    ranks = np.concatenate([np.arange(1, size + 1), np.arange(1, size + 1)])
    top = tail_top_size("poly", nu, size)
    ratio = sgd_mean / fa_mean
    tail = ranks > top
    violations = [(int(k), int(ranks[k]), float(fa_mean[k] / sgd_mean[k]))
                  for k in np.nonzero(tail & (fa_mean > sgd_mean))[0]]
    tau, p_value = kendalltau(ranks, ratio)
    return {
        "ranks": ranks, "top_size": top,
        "fa_terminal": fa_mean, "sgd_terminal": sgd_mean, "ratio": ratio,
        "violations": violations,
        "kendall_tau": float(tau), "kendall_p": float(p_value),
        "alpha_fa": alpha_fa, "rate_sgd": rate_sgd,
    }


def build_dataset(config: ExperimentConfig) -> tuple[list[Example], int, int]:
    """Materialize the example list for either data source."""
    if config.data_kind == "movielens":
        if not config.data_path:
            raise ValueError("data.kind=movielens requires data.path")
        log = load_movielens(config.data_path)
        return binarize(log), log.n_users, log.n_items
    users_dist = make_tail_distribution(config.tail, config.users, config.tau, config.nu)
    items_dist = make_tail_distribution(config.tail, config.items, config.tau, config.nu)
    joint = planted_joint(users_dist, items_dist, config.dim, config.seed)
    u_ix, v_ix, labels = sample_pairs(joint, stream(config.seed, "sampler"), config.examples)
    n_users = config.users
    return ([Example((int(u), n_users + int(v)), int(y))
             for u, v, y in zip(u_ix, v_ix, labels)], config.users, config.items)


class _ScalarAdaptiveState:
    """Adagrad/Adam state for the FM bias term (a single always-touched scalar)."""

    def __init__(self):
        self.acc2 = 0.0
        self.m1 = 0.0
        self.steps = 0


def _bias_step(bias: float, grad: float, sched: ScheduleSpec,
               state: _ScalarAdaptiveState) -> float:
    kind = sched.kind
    if kind == "sgd-constant":
        return bias - sched.alpha * grad
    if kind in ("fa-frequency", "cf-counter"):
        # The bias is touched by every sample, so its frequency is exactly 1.
        rate = min(sched.cap, sched.alpha / math.sqrt(sched.T))
        return bias - rate * grad
    if kind == "adagrad":
        state.acc2 += grad * grad
        return bias - sched.alpha * grad / (math.sqrt(state.acc2) + sched.epsilon)
    state.steps += 1
    state.m1 = sched.beta1 * state.m1 + (1.0 - sched.beta1) * grad
    state.acc2 = sched.beta2 * state.acc2 + (1.0 - sched.beta2) * grad * grad
    m_hat = state.m1 / (1.0 - sched.beta1**state.steps)
    v_hat = state.acc2 / (1.0 - sched.beta2**state.steps)
    return bias - sched.alpha * m_hat / (math.sqrt(v_hat) + sched.epsilon)


def _batch_scores(tokens: np.ndarray, emb_rows: np.ndarray, linear: np.ndarray | None,
                  bias: float) -> np.ndarray:
    """Logits for (B, 2) token-id pairs under the dot or FM model."""
    v_a = emb_rows[tokens[:, 0]]
    v_b = emb_rows[tokens[:, 1]]
    scores = np.einsum("bd,bd->b", v_a, v_b)
    if linear is not None:
        scores = scores + bias + linear[tokens[:, 0]] + linear[tokens[:, 1]]
    return scores


def _empirical_token_gradnorms(tokens: np.ndarray, labels: np.ndarray,
                               emb_rows: np.ndarray, linear: np.ndarray | None,
                               bias: float, chunk: int = 65536) -> np.ndarray:
    """Squared norms of the train-split-average embedding gradient per token."""
    n_rows = emb_rows.shape[0]
    acc = np.zeros_like(emb_rows)
    n = tokens.shape[0]
    for lo in range(0, n, chunk):
        tok = tokens[lo:lo + chunk]
        y = labels[lo:lo + chunk].astype(np.float64)
        scores = _batch_scores(tok, emb_rows, linear, bias)
        c = -y * expit(-y * scores)
        np.add.at(acc, tok[:, 0], c[:, None] * emb_rows[tok[:, 1]])
        np.add.at(acc, tok[:, 1], c[:, None] * emb_rows[tok[:, 0]])
    acc /= n
    return np.einsum("nd,nd->n", acc, acc)


def run_experiment(config: ExperimentConfig) -> list[EpochRecord]:
    """Seeded end-to-end run; returns the per-epoch log and writes outputs.

    The optimizer horizon T is fixed up front as epochs x ceil(n_train/batch)
    when opt.T is left at 0; early stopping may finish sooner.
    """
    examples, n_users, n_items = build_dataset(config)
    train, val, _test = split(examples, config.seed)
    n_train = len(train)
    steps_per_epoch = (n_train + config.batch - 1) // config.batch
    horizon = config.epochs * steps_per_epoch if getattr(config, "_auto_T", True) \
        else config.schedule.T
    sched = config.schedule.with_horizon(horizon)

    train_tokens = np.array([ex.tokens for ex in train], dtype=np.int64)
    train_labels = np.array([ex.label for ex in train], dtype=np.int64)
    val_tokens = np.array([ex.tokens for ex in val], dtype=np.int64)
    val_labels = np.array([ex.label for ex in val], dtype=np.int64)

    # Empirical training-split frequencies stand in for the token distribution
    # when the frequency-aware schedule runs on data with unknown marginals.
    token_probs = None
    if sched.kind == "fa-frequency":
        counts = np.bincount(train_tokens.ravel(), minlength=n_users + n_items)
        probs = counts.astype(np.float64) / n_train
        probs[probs == 0.0] = 0.5 / n_train  # unseen tokens never step; keep rates defined
        token_probs = probs

    emb = init_embedding_table(n_users, n_items, config.dim, stream(config.seed, "init"))
    is_fm = config.model_kind == "fm"
    linear = np.zeros(n_users + n_items) if is_fm else None
    bias = 0.0
    emb_state = make_optimizer_state(sched, n_users, n_items, config.dim,
                                     token_probs=token_probs)
    lin_state = None
    if is_fm:
        lin_state = make_optimizer_state(sched, n_users, n_items, 1, token_probs=token_probs)
        lin_state.counter = emb_state.counter  # shared pre-step estimates for cf
    bias_state = _ScalarAdaptiveState()
    diagnostics = emb_state.counter if emb_state.counter is not None \
        else TokenCounter(n_users, n_items)

    shuffle_rng = stream(config.seed, "data-shuffle")
    records: list[EpochRecord] = []
    best_auc = -np.inf
    stale = 0
    step = 0
    out_dir = config.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n_train)
        loss_sum = 0.0
        for lo in range(0, n_train, config.batch):
            pick = order[lo:lo + config.batch]
            tok = train_tokens[pick]
            y = train_labels[pick].astype(np.float64)
            b = pick.size
            scores = _batch_scores(tok, emb.rows, linear, bias)
            batch_loss = float(np.sum(softplus(-y * scores)))
            if not np.isfinite(batch_loss):
                _dump_diagnostics(out_dir, config, epoch, step, scores)
                raise RuntimeError(f"non-finite training loss at epoch {epoch}, step {step}")
            loss_sum += batch_loss
            c = -y * expit(-y * scores)

            all_rows = tok.T.ravel()  # users of the batch, then items
            all_grads = np.concatenate([c[:, None] * emb.rows[tok[:, 1]],
                                        c[:, None] * emb.rows[tok[:, 0]]])
            uniq, inv = np.unique(all_rows, return_inverse=True)
            sums = np.zeros((uniq.size, config.dim))
            np.add.at(sums, inv, all_grads)
            occurrences = np.bincount(inv, minlength=uniq.size)
            emb_grad = SparseGradient(uniq, sums / b)

            if is_fm:
                lin_sums = np.bincount(inv, weights=np.concatenate([c, c]),
                                       minlength=uniq.size)
                lin_grad = SparseGradient(uniq, (lin_sums / b)[:, None])
                # Secondary tensors step first so cf rates on all tensors see
                # the same pre-increment counter.
                apply_sparse_step(linear[:, None], lin_grad, lin_state, advance=False)
                bias = _bias_step(bias, float(np.sum(c)) / b, sched, bias_state)
            apply_sparse_step(emb, emb_grad, emb_state, occurrences=occurrences,
                              batch=b, project_radius=config.project_radius)
            if emb_state.counter is None:
                diagnostics.counts[uniq] += occurrences
                diagnostics.total += b
            step += 1

        val_scores = _batch_scores(val_tokens, emb.rows, linear, bias)
        epoch_auc = auc(val_scores, val_labels)
        records.append(EpochRecord(epoch, step, loss_sum / n_train, epoch_auc))
        if epoch_auc > best_auc:
            best_auc = epoch_auc
            stale = 0
        else:
            stale += 1
        if config.patience > 0 and stale >= config.patience:
            break

    if out_dir:
        tokens_rows = _token_rows(diagnostics, emb_state, train_tokens, train_labels,
                                  emb.rows, linear, bias)
        export_metrics(records, os.path.join(out_dir, "metrics.csv"), tokens=tokens_rows)
        write_manifest(os.path.join(out_dir, "manifest.json"),
                       config.to_mapping(), config.seed)
        write_embeddings(os.path.join(out_dir, "embeddings.bin"), emb)
    return records


def _token_rows(diagnostics: TokenCounter, emb_state: OptimizerState,
                train_tokens, train_labels, emb_rows, linear, bias) -> list[dict]:
    counts = diagnostics.counts
    total = max(1, diagnostics.total)
    order = np.argsort(-counts, kind="stable")
    ranks = np.empty_like(order)
    ranks[order] = np.arange(1, counts.size + 1)
    gradnorms = _empirical_token_gradnorms(train_tokens, train_labels, emb_rows,
                                           linear, bias)
    acc_sums = emb_state.acc2.sum(axis=1) if emb_state.acc2 is not None \
        else np.zeros(counts.size)
    return [{"token": int(k), "rank": int(ranks[k]), "p_hat": counts[k] / total,
             "grad_norm_sq": float(gradnorms[k]), "accumulator_sum": float(acc_sums[k])}
            for k in range(counts.size)]


def _dump_diagnostics(out_dir: str, config: ExperimentConfig, epoch: int, step: int,
                      scores: np.ndarray) -> None:
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    finite = scores[np.isfinite(scores)]
    payload = {
        "error": "non-finite training loss",
        "epoch": epoch, "step": step,
        "score_min": float(finite.min()) if finite.size else None,
        "score_max": float(finite.max()) if finite.size else None,
        "config": config.to_mapping(),
    }
    with open(os.path.join(out_dir, "diagnostics.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
