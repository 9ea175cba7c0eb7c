"""Acceptance gate: twelve end-to-end claims, one test and one verdict line each.

Every test prints a single [PASS]/[FAIL] line with the measured quantities
(shown by pytest for failures, and with -s/-rA for passes) and then asserts
the claim at its stated tolerance. Nothing here tunes itself to pass: the
instances, seeds, and tolerances are fixed.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import pearsonr

from freqsgd.cli import cli_dispatch
from freqsgd.dataio import read_tokens_csv
from freqsgd.harness import (ExperimentConfig, auc, planted_joint, run_experiment,
                             tail_speedup_experiment)
from freqsgd.models import (Example, FmParams, fm_grad, fm_predict, grad_pair,
                            init_embedding_table, loss_dot, softplus)
from freqsgd.optimizers import ScheduleSpec, cf_rate, fa_rate, run_pairwise
from freqsgd.rng import stream
from freqsgd.theory import (check_unbiasedness, make_paired_instance,
                            make_random_instance, variance_report)
from freqsgd.tokenspace import (TokenCounter, counter_update, make_exp_tail,
                                make_poly_tail, make_product_joint, make_uniform,
                                sample_pairs)


def _report(num: int, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {detail}")


# --------------------------------------------------------------- criterion 1

def _fd_rel_error_dot(rng) -> float:
    dim = int(rng.integers(1, 9))
    u = rng.uniform(-1.0, 1.0, dim)
    v = rng.uniform(-1.0, 1.0, dim)
    y = int(rng.choice((-1, 1)))
    analytic = np.concatenate(grad_pair(u, v, y))
    h = 1e-5
    fd = np.empty(2 * dim)
    x = np.concatenate([u, v])
    for k in range(2 * dim):
        x[k] += h
        hi = loss_dot(x[:dim], x[dim:], y)
        x[k] -= 2 * h
        lo = loss_dot(x[:dim], x[dim:], y)
        x[k] += h
        fd[k] = (hi - lo) / (2 * h)
    return float(np.linalg.norm(analytic - fd) / np.linalg.norm(fd))


def _fd_rel_error_fm(rng) -> float:
    n_users = int(rng.integers(2, 5))
    n_items = int(rng.integers(2, 5))
    dim = int(rng.integers(1, 5))
    table = init_embedding_table(n_users, n_items, dim, rng)
    params = FmParams(float(rng.normal()), rng.normal(size=n_users + n_items), table)
    i = int(rng.integers(0, n_users))
    j = int(rng.integers(0, n_items))
    ex = Example((i, n_users + j), int(rng.choice((-1, 1))))

    def loss() -> float:
        return float(softplus(-ex.label * fm_predict(ex, params)))

    h = 1e-5
    bias_g, linear_g, emb_g = fm_grad(ex, params)
    analytic = np.concatenate([[bias_g], [g for _, g in linear_g],
                               emb_g.vectors.ravel()])
    fd = []
    params.bias += h
    hi = loss()
    params.bias -= 2 * h
    lo = loss()
    params.bias += h
    fd.append((hi - lo) / (2 * h))
    for token, _ in linear_g:
        params.linear[token] += h
        hi = loss()
        params.linear[token] -= 2 * h
        lo = loss()
        params.linear[token] += h
        fd.append((hi - lo) / (2 * h))
    for token in emb_g.rows:
        for k in range(dim):
            table.rows[token, k] += h
            hi = loss()
            table.rows[token, k] -= 2 * h
            lo = loss()
            table.rows[token, k] += h
            fd.append((hi - lo) / (2 * h))
    fd = np.asarray(fd)
    return float(np.linalg.norm(analytic - fd) / np.linalg.norm(fd))


def test_criterion_01_analytic_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_dot = max(_fd_rel_error_dot(rng) for _ in range(1000))
    worst_fm = max(_fd_rel_error_fm(rng) for _ in range(1000))
    elapsed = time.perf_counter() - t0
    ok = worst_dot < 1e-5 and worst_fm < 1e-5 and elapsed < 10.0
    _report(1, ok, f"max FD relative error dot={worst_dot:.3g} fm={worst_fm:.3g} "
                   f"over 1000 configurations each ({elapsed:.1f}s)")
    assert worst_dot < 1e-5 and worst_fm < 1e-5
    assert elapsed < 10.0


# --------------------------------------------------------------- criterion 2

def test_criterion_02_sparse_gradient_unbiasedness_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(20):
        theta, joint = make_random_instance(rng)
        worst = max(worst, check_unbiasedness(theta, joint))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 5.0
    _report(2, ok, f"max deviation {worst:.3g} over 20 exact-enumeration instances, "
                   f"marginal and per-token conditional forms ({elapsed:.1f}s)")
    assert worst < 1e-10
    assert elapsed < 5.0


# --------------------------------------------------------------- criterion 3

def test_criterion_03_variance_sandwich_and_collapse():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)          # the same 20 instances as criterion 2
    worst_slack = -np.inf
    for _ in range(20):
        theta, joint = make_random_instance(rng)
        rep = variance_report(theta, joint)
        worst_slack = max(worst_slack, rep.lower_bound - rep.exact_variance,
                          rep.exact_variance - rep.upper_bound)
    pair_rng = np.random.default_rng(303)
    gap = 0.0
    for _ in range(5):
        theta, joint = make_paired_instance(pair_rng, 6)
        rep = variance_report(theta, joint)
        gap = max(gap, abs(rep.exact_variance - rep.lower_bound))
    elapsed = time.perf_counter() - t0
    ok = worst_slack <= 1e-12 and gap < 1e-10 and elapsed < 5.0
    _report(3, ok, f"sandwich violation {worst_slack:.3g} (allowed 1e-12); "
                   f"one-partner collapse gap {gap:.3g} ({elapsed:.1f}s)")
    assert worst_slack <= 1e-12
    assert gap < 1e-10
    assert elapsed < 5.0


# --------------------------------------------------------------- criterion 4

def test_criterion_04_uniform_marginals_make_fa_equal_sgd():
    uni = make_uniform(50)
    joint = planted_joint(uni, uni, 8, seed=404)
    probs = joint.token_marginals()
    steps = 10_000
    fa = ScheduleSpec("fa-frequency", alpha=1.0, L=1.0, T=steps)
    rates = {fa_rate(fa, float(p)) for p in probs}
    assert len(rates) == 1                     # uniform marginals: one shared rate
    sgd = ScheduleSpec("sgd-constant", alpha=rates.pop(), L=1.0, T=steps)
    theta_fa = init_embedding_table(50, 50, 8, stream(44, "init"))
    theta_sgd = theta_fa.copy()
    run_pairwise(joint, theta_fa, fa, steps, stream(44, "sampler"), token_probs=probs)
    run_pairwise(joint, theta_sgd, sgd, steps, stream(44, "sampler"))
    ok = np.array_equal(theta_fa.rows, theta_sgd.rows)
    _report(4, ok, "frequency-aware and matched constant-rate trajectories "
                   f"bit-identical over {steps} shared-stream steps: {ok}")
    assert ok


# --------------------------------------------------------------- criterion 5

def test_criterion_05_tail_rate_bound_inequalities():
    t0 = time.perf_counter()
    cap_const = 2.0 / (1.0 - math.exp(-1.0))
    built = 0
    geo_ok = True
    for tau in (0.1, 0.5, 1.0, 2.0):
        a = math.exp(-tau)
        for size in (10, 100, 1000):
            assert size >= 1.0 / tau           # the constant-cap premise
            # Exact coefficient of e^{-tau(n-1)} in 2 p_n / sum_X p_l^2; the
            # rank-1 weight is normalized to 1, so the decay reads from n=1.
            coef = (1.0 + a) / (1.0 + a**size)
            geo_ok &= coef <= (1.0 + a) / (1.0 - a) and coef <= cap_const
            try:
                dist = make_exp_tail(size, tau)
            except ValueError:
                continue                       # weights below double-precision range
            built += 1
            n = np.arange(1, size + 1, dtype=np.float64)
            lhs = 2.0 * dist.probs / (2.0 * float(np.sum(dist.probs**2)))
            geo_ok &= bool(np.all(lhs <= cap_const * np.exp(-tau * (n - 1.0)) * (1 + 1e-12)))
    poly_ok = True
    for nu in (2.0, 3.0, 4.0):
        for size in (10, 100, 1000):
            dist = make_poly_tail(size, nu)
            n = np.arange(1, size + 1, dtype=np.float64)
            lhs = 2.0 * dist.probs / (2.0 * float(np.sum(dist.probs**2)))
            poly_ok &= bool(np.all(lhs <= 16.0 * n**-nu * (1 + 1e-12)))
    elapsed = time.perf_counter() - t0
    ok = geo_ok and poly_ok and built == 10 and elapsed < 5.0
    _report(5, ok, f"geometric bound (coefficient and per-rank, {built}/12 grid points "
                   f"within double range): {geo_ok}; power-law 16-factor: {poly_ok} "
                   f"({elapsed:.1f}s)")
    assert geo_ok
    assert poly_ok
    assert built == 10                         # (tau=1, 1000) and (tau=2, 1000) underflow
    assert elapsed < 5.0


# --------------------------------------------------------------- criterion 6

def test_criterion_06_tail_speedup_at_terminal_iterate():
    t0 = time.perf_counter()
    res = tail_speedup_experiment()
    elapsed = time.perf_counter() - t0
    trend_ok = res["kendall_tau"] > 0.0 and res["kendall_p"] < 0.05
    dom_ok = len(res["violations"]) == 0
    worst = max((r for _, _, r in res["violations"]), default=0.0)
    _report(6, trend_ok and dom_ok,
            f"ratio-vs-rank Kendall tau={res['kendall_tau']:.4f} "
            f"(p={res['kendall_p']:.2e}): {trend_ok}; tail domination "
            f"({len(res['violations'])} violations, worst fa/sgd={worst:.2f}): "
            f"{dom_ok} ({elapsed:.0f}s)")
    assert elapsed < 600.0
    assert trend_ok
    assert dom_ok, (
        f"{len(res['violations'])} tail tokens finish with a larger frequency-aware "
        f"terminal gradient norm (ranks {sorted({r for _, r, _ in res['violations']})}, "
        f"worst fa/sgd ratio {worst:.2f}). These tokens have already converged to "
        "their optimizer noise floors within the horizon, and the frequency-aware "
        "floor (rate proportional to 1/sqrt(p_k)) sits above the constant-rate "
        "floor there, so at the terminal iterate the comparison inverts on the "
        "mid-tail while the trend clause still holds. Measured deterministically "
        "over 20 paired seeds; analysis and attempted configurations: "
        "/root/notes/decisions.md (criterion 6).")


# --------------------------------------------------------------- criterion 7

def _tail_stream_counts(joint, n_samples: int, seed: int) -> np.ndarray:
    u, v, _ = sample_pairs(joint, stream(seed, "sampler"), n_samples)
    counts = np.zeros(joint.n_users + joint.n_items, dtype=np.int64)
    np.add.at(counts, u, 1)
    np.add.at(counts, joint.n_users + v, 1)
    return counts


def test_criterion_07_counter_estimates_concentrate():
    t0 = time.perf_counter()
    dist = make_exp_tail(50, 0.2)
    joint = make_product_joint(dist, dist, lambda i, j: 1 if (i + j) % 2 else -1)
    p = joint.token_marginals()
    eligible = p >= 1e-3
    n_samples = 100_000
    good = 0
    for seed in range(20):
        p_hat = _tail_stream_counts(joint, n_samples, seed) / float(n_samples)
        good += bool(np.all(np.abs(p_hat - p)[eligible] <= p[eligible] / 2.0))
    # The vectorized tally above matches the streaming counter exactly.
    counter = TokenCounter(50, 50)
    u, v, _ = sample_pairs(joint, stream(0, "sampler"), n_samples)
    for uu, vv in zip(u.tolist(), v.tolist()):
        counter_update(counter, uu, vv)
    stream_matches = (np.array_equal(counter.counts, _tail_stream_counts(joint, n_samples, 0))
                      and counter.total == n_samples)
    elapsed = time.perf_counter() - t0
    ok = good >= 18 and stream_matches and elapsed < 30.0
    _report(7, ok, f"half-relative-width concentration held in {good}/20 seeds "
                   f"(need 18) for all tokens with p >= 1e-3; streaming counter "
                   f"matches the tally: {stream_matches} ({elapsed:.1f}s)")
    assert good >= 18
    assert stream_matches
    assert elapsed < 30.0


# --------------------------------------------------------------- criterion 8

def test_criterion_08_counter_rates_match_frequency_rates():
    dist = make_exp_tail(50, 0.2)
    joint = make_product_joint(dist, dist, lambda i, j: 1 if (i + j) % 2 else -1)
    p = joint.token_marginals()
    eligible = np.nonzero(p >= 1e-3)[0]
    n_samples = 100_000
    horizon = 133
    fa = ScheduleSpec("fa-frequency", alpha=1.0, L=1.0, T=horizon)
    cf = ScheduleSpec("cf-counter", alpha=1.0, L=1.0, T=horizon)
    worst = 0.0
    for seed in range(20):
        counts = _tail_stream_counts(joint, n_samples, seed)
        counter = TokenCounter(50, 50, counts=counts, total=n_samples)
        for k in eligible:
            want = fa_rate(fa, float(p[k]))
            got = cf_rate(cf, counter, int(k))
            worst = max(worst, abs(got - want) / want)
    ok = worst <= 0.02
    _report(8, ok, f"max relative rate gap {worst:.4f} (allowed 0.02) over "
                   f"{eligible.size} tokens x 20 streamed seeds at T={horizon}")
    assert worst <= 0.02


# --------------------------------------------------------------- criterion 9

def test_criterion_09_accumulators_track_token_frequency(tmp_path):
    t0 = time.perf_counter()
    raw = {
        "data.kind": "synthetic", "data.tail": "poly", "data.nu": "2.0",
        "data.users": "1000", "data.items": "1000", "data.examples": "100000",
        "model.kind": "fm", "model.dim": "16",
        "opt.kind": "adagrad", "opt.alpha": "2e-2", "opt.batch": "64",
        "run.epochs": "1", "run.seed": "7", "run.patience": "0",
        "run.out": str(tmp_path / "corr"),
    }
    run_experiment(ExperimentConfig.from_mapping(raw))
    tokens = read_tokens_csv(tmp_path / "corr" / "tokens.csv")
    acc = np.array([t["accumulator_sum"] for t in tokens])
    freq = np.array([t["p_hat"] for t in tokens])
    r = float(pearsonr(acc, freq)[0])
    elapsed = time.perf_counter() - t0
    ok = r >= 0.9 and elapsed < 60.0
    _report(9, ok, f"Pearson r={r:.4f} between per-row squared-gradient "
                   f"accumulator sums and token frequencies after one epoch "
                   f"({elapsed:.0f}s)")
    assert r >= 0.9
    assert elapsed < 60.0


# -------------------------------------------------------------- criterion 10

ML1M_CANDIDATES = (
    Path("/root/pkg/data/ml-1m/ratings.dat"),
    Path(__file__).resolve().parent.parent / "data" / "ml-1m" / "ratings.dat",
)

ML1M_RUNS = (
    ("sgd-constant", "1e1"),
    ("cf-counter", "1e0"),
    ("adagrad", "2e-2"),
    ("adam", "1e-3"),
)


def test_criterion_10_movielens_end_to_end(tmp_path):
    ratings = next((p for p in ML1M_CANDIDATES if p.exists()), None)
    if ratings is None:
        print("[SKIP] criterion 10: MovieLens-1M ratings.dat not present under "
              "data/ml-1m/ and this environment has no way to download it; "
              "criterion not verifiable here")
        pytest.skip("MovieLens-1M ratings.dat not present and not downloadable "
                    "in this environment; place it under data/ml-1m/ to run")
    peaks = {}
    reach_epoch = {}
    for kind, alpha in ML1M_RUNS:
        raw = {
            "data.kind": "movielens", "data.path": str(ratings),
            "model.kind": "fm", "model.dim": "64",
            "opt.kind": kind, "opt.alpha": alpha, "opt.batch": "1024",
            "run.epochs": "20", "run.seed": "0", "run.patience": "2",
            "run.out": str(tmp_path / kind),
        }
        records = run_experiment(ExperimentConfig.from_mapping(raw))
        peaks[kind] = max(r.val_auc for r in records)
        reach_epoch[kind] = next((r.epoch for r in records if r.val_auc >= 0.79),
                                 None)
    band_ok = all(0.79 <= peak <= 0.83 for peak in peaks.values())
    race_ok = (reach_epoch["cf-counter"] is not None
               and (reach_epoch["sgd-constant"] is None
                    or reach_epoch["cf-counter"] <= reach_epoch["sgd-constant"]))
    ok = band_ok and race_ok
    _report(10, ok, f"peak AUC {', '.join(f'{k}={v:.4f}' for k, v in peaks.items())}; "
                    f"epochs to 0.80-band: cf={reach_epoch['cf-counter']} "
                    f"sgd={reach_epoch['sgd-constant']}")
    assert band_ok
    assert race_ok


# -------------------------------------------------------------- criterion 11

def test_criterion_11_auc_equals_pair_counting_exactly():
    rng = np.random.default_rng(111)
    mismatches = 0
    for case in range(1000):
        n = int(rng.integers(2, 201))
        if case % 2:
            scores = rng.integers(0, 8, n).astype(np.float64)   # forced ties
        else:
            scores = rng.normal(size=n)
        labels = rng.choice(np.array([-1, 1]), n)
        if np.all(labels == labels[0]):
            labels[0] = -labels[0]
        pos = scores[labels == 1][:, None]
        neg = scores[labels == -1][None, :]
        wins = float(np.sum(pos > neg)) + 0.5 * float(np.sum(pos == neg))
        brute = wins / (pos.size * neg.size)
        mismatches += auc(scores, labels) != brute
    ok = mismatches == 0
    _report(11, ok, f"rank-statistic AUC equal to pair counting on "
                    f"{1000 - mismatches}/1000 random instances (exact equality)")
    assert mismatches == 0


# -------------------------------------------------------------- criterion 12

TRAIN_CFG_12 = """\
data.kind = synthetic
data.tail = exp
data.tau = 0.3
data.users = 30
data.items = 30
data.examples = 3000
model.kind = fm
model.dim = 8
opt.kind = cf-counter
opt.alpha = 0.5
opt.batch = 32
run.epochs = 3
run.patience = 0
"""


def test_criterion_12_reruns_are_byte_identical(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    run_dir = tmp_path / "out"
    cfg.write_text(TRAIN_CFG_12 + f"run.out = {run_dir}\n", encoding="utf-8")
    names = ("metrics.csv", "tokens.csv", "manifest.json", "embeddings.bin")
    assert cli_dispatch(["train", "--config", str(cfg)]) == 0
    first = {name: (run_dir / name).read_bytes() for name in names}
    assert cli_dispatch(["train", "--config", str(cfg)]) == 0
    train_ok = all((run_dir / name).read_bytes() == first[name] for name in names)

    verify_dir = tmp_path / "verify"
    assert cli_dispatch(["verify", "--seed", "5", "--out", str(verify_dir)]) == 0
    report_first = (verify_dir / "report.json").read_bytes()
    assert cli_dispatch(["verify", "--seed", "5", "--out", str(verify_dir)]) == 0
    verify_ok = (verify_dir / "report.json").read_bytes() == report_first
    capsys.readouterr()

    ok = train_ok and verify_ok
    _report(12, ok, f"train outputs byte-identical across reruns: {train_ok}; "
                    f"verify report byte-identical: {verify_ok}")
    assert train_ok
    assert verify_ok
