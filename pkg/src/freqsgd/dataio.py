"""MovieLens-format ingestion, binarization, splits, and result export.

Item tokens are offset by the user-vocab size so one embedding table indexes
the union of both token sets. All numeric CSV fields carry 17 significant
digits so re-parsing recovers the exact doubles.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from . import __version__
from .models import Example
from .rng import stream

FLOAT_FMT = "%.17g"


def _fmt(x: float) -> str:
    return FLOAT_FMT % float(x)


@dataclass
class InteractionLog:
    """Parsed rating records plus opaque-id <-> dense-index vocabularies."""

    records: list[tuple[str, str, int, int]]
    user_vocab: dict[str, int] = field(default_factory=dict)
    item_vocab: dict[str, int] = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.user_vocab)

    @property
    def n_items(self) -> int:
        return len(self.item_vocab)


def load_movielens(path) -> InteractionLog:
    """Parse a ratings file of `UserID::MovieID::Rating::Timestamp` lines.

    Vocabularies are assigned in first-appearance order. Malformed lines
    raise with their 1-based line number.
    """
    records = []
    user_vocab: dict[str, int] = {}
    item_vocab: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 '::'-separated fields")
            user_id, item_id, rating_s, ts_s = parts
            try:
                rating = int(rating_s)
                ts = int(ts_s)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: rating and timestamp must be integers")
            if not 1 <= rating <= 5:
                raise ValueError(f"{path}:{lineno}: rating {rating} outside 1..5")
            if user_id not in user_vocab:
                user_vocab[user_id] = len(user_vocab)
            if item_id not in item_vocab:
                item_vocab[item_id] = len(item_vocab)
            records.append((user_id, item_id, rating, ts))
    if not records:
        raise ValueError(f"{path}: no rating records found")
    return InteractionLog(records, user_vocab, item_vocab)


def binarize(log: InteractionLog) -> list[Example]:
    """Ratings <= 3 become label -1, ratings > 3 become +1; one Example each."""
    n_users = log.n_users
    out = []
    for user_id, item_id, rating, _ in log.records:
        label = -1 if rating <= 3 else 1
        out.append(Example((log.user_vocab[user_id], n_users + log.item_vocab[item_id]), label))
    return out


def split(examples: list, seed: int) -> tuple[list, list, list]:
    """Seeded random 80/10/10 split: floor(.8n) / floor(.1n) / remainder."""
    n = len(examples)
    if n < 10:
        raise ValueError(f"need at least 10 examples to split, got {n}")
    order = stream(seed, "data-shuffle").permutation(n)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    train = [examples[k] for k in order[:n_train]]
    val = [examples[k] for k in order[n_train:n_train + n_val]]
    test = [examples[k] for k in order[n_train + n_val:]]
    return train, val, test


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    val_auc: float


def export_metrics(records: list[EpochRecord], path, tokens: list[dict] | None = None) -> None:
    """Write the per-epoch metrics CSV, plus a companion tokens.csv if given.

    Token rows need keys token, rank, p_hat, grad_norm_sq, accumulator_sum.
    """
    if not records:
        raise ValueError("metrics log is empty; nothing to export")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,step,train_loss,val_auc\n")
        for r in records:
            fh.write(f"{r.epoch},{r.step},{_fmt(r.train_loss)},{_fmt(r.val_auc)}\n")
    if tokens is not None:
        tokens_path = os.path.join(os.path.dirname(os.path.abspath(path)), "tokens.csv")
        with open(tokens_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("token,rank,p_hat,grad_norm_sq,accumulator_sum\n")
            for row in tokens:
                fh.write(f"{row['token']},{row['rank']},{_fmt(row['p_hat'])},"
                         f"{_fmt(row['grad_norm_sq'])},{_fmt(row['accumulator_sum'])}\n")


def write_manifest(path, config_mapping: dict, seed: int) -> None:
    """Run manifest: config echo, library version string, and the seed."""
    manifest = {
        "config": {k: config_mapping[k] for k in sorted(config_mapping)},
        "version": f"freqsgd-{__version__}",
        "seed": int(seed),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_metrics_csv(path) -> list[EpochRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "epoch,step,train_loss,val_auc":
        raise ValueError(f"{path}: expected header 'epoch,step,train_loss,val_auc'")
    out = []
    for ln in lines[1:]:
        e, s, tl, va = ln.split(",")
        out.append(EpochRecord(int(e), int(s), float(tl), float(va)))
    return out


def read_tokens_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = "token,rank,p_hat,grad_norm_sq,accumulator_sum"
    if not lines or lines[0] != header:
        raise ValueError(f"{path}: expected header {header!r}")
    out = []
    for ln in lines[1:]:
        t, r, p, g, a = ln.split(",")
        out.append({"token": int(t), "rank": int(r), "p_hat": float(p),
                    "grad_norm_sq": float(g), "accumulator_sum": float(a)})
    return out
