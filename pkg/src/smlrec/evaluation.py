"""Sampled top-K evaluation: one held-out positive ranked against sampled non-interacted items."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .mf import Embeddings, Observed

KS = (5, 10, 20)
TYPES = ("OU-OI", "OU-NI", "NU-OI", "NU-NI")


def recall_at_k(rank: int, k: int) -> int:
    if rank < 1:
        raise ContractError(f"rank must be >= 1, got {rank}")
    return 1 if rank <= k else 0


def ndcg_at_k(rank: int, k: int) -> float:
    """Single-relevant-item NDCG: ``1 / log2(rank + 1)`` inside the cutoff."""
    if rank < 1:
        raise ContractError(f"rank must be >= 1, got {rank}")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def sample_candidates(user, positive_item, observed: Observed, n_items: int, rng, n_negatives=999):
    """The positive first, then up to ``n_negatives`` distinct items the user never touched.

    Returns ``(candidates, shortfall)``; ``shortfall`` counts missing negatives when
    the user has fewer than ``n_negatives`` non-interacted items.
    """
    mask = np.ones(n_items, dtype=bool)
    mask[observed.items_of(user)] = False
    mask[positive_item] = False
    pool = np.flatnonzero(mask)
    if len(pool) >= n_negatives:
        negs = rng.choice(pool, size=n_negatives, replace=False)
        shortfall = 0
    else:
        negs = pool
        shortfall = n_negatives - len(pool)
    assert positive_item not in negs
    return np.concatenate([[positive_item], negs]).astype(np.int64), shortfall


def rank_of_first(scores: np.ndarray, ids: np.ndarray) -> int:
    """1-based rank of entry 0 under descending score, ties broken by ascending id."""
    s0, i0 = scores[0], ids[0]
    return 1 + int(np.sum(scores > s0)) + int(np.sum((scores == s0) & (ids < i0)))


@dataclass
class PeriodReport:
    period: int
    method: str = ""
    n_cases: int = 0
    metrics: dict[str, float] = field(default_factory=dict)
    type_counts: dict[str, int] = field(default_factory=dict)
    type_metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    shortfall: int = 0
    examples_touched: int = 0

    def record(self) -> dict:
        rec = {"method": self.method, "period": self.period, "n_cases": self.n_cases, **self.metrics,
               "shortfall": self.shortfall, "examples_touched": self.examples_touched}
        for t in TYPES:
            rec[f"n_{t}"] = self.type_counts.get(t, 0)
            for k, v in self.type_metrics.get(t, {}).items():
                rec[f"{t}:{k}"] = v
        return rec


def metric_names(ks=KS) -> list[str]:
    return [f"recall@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]


def evaluate_period(
    emb: Embeddings,
    users,
    items,
    observed: Observed,
    n_items: int,
    rng,
    n_old_users: int,
    n_old_items: int,
    period: int = -1,
    ks=KS,
    n_negatives: int = 999,
) -> PeriodReport:
    """Score every test interaction against its sampled candidates.

    ``observed`` holds interactions up to and including the test period.
    Entities with id >= ``n_old_users`` / ``n_old_items`` first appear in the
    test period and are counted as new.
    """
    if emb.n_items < n_items:
        raise ContractError(f"embeddings cover {emb.n_items} items, candidates need {n_items}")
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    rep = PeriodReport(period=period)
    names = metric_names(ks)
    if len(users) == 0:
        return rep
    rows = np.zeros((len(users), len(names)))
    kinds = []
    for c, (u, i) in enumerate(zip(users, items)):
        cand, short = sample_candidates(u, i, observed, n_items, rng, n_negatives)
        rep.shortfall += short
        scores = emb.Q[cand] @ emb.P[u]
        rank = rank_of_first(scores, cand)
        rows[c] = [recall_at_k(rank, k) for k in ks] + [ndcg_at_k(rank, k) for k in ks]
        kinds.append(("NU" if u >= n_old_users else "OU") + "-" + ("NI" if i >= n_old_items else "OI"))
    rep.n_cases = len(users)
    rep.metrics = dict(zip(names, rows.mean(axis=0).tolist()))
    kinds = np.asarray(kinds)
    for t in TYPES:
        sel = kinds == t
        rep.type_counts[t] = int(sel.sum())
        if sel.any():
            rep.type_metrics[t] = dict(zip(names, rows[sel].mean(axis=0).tolist()))
    return rep


def average(reports: list[PeriodReport], ks=KS) -> dict[str, float]:
    """Unweighted mean over periods."""
    names = metric_names(ks)
    if not reports:
        return {n: float("nan") for n in names}
    return {n: float(np.mean([r.metrics[n] for r in reports])) for n in names}


# -- report files -----------------------------------------------------------


def write_reports(out_dir, reports: list[PeriodReport], averages: dict[str, dict[str, float]], ks=KS) -> None:
    """``report.ndjson`` (per-period and average records) plus ``report.tsv``
    (one row per period per method) and ``summary.tsv`` (averages)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.ndjson").open("w") as fh:
        for r in reports:
            fh.write(json.dumps(r.record(), sort_keys=True) + "\n")
        for method, avg in averages.items():
            fh.write(json.dumps({"method": method, "period": "average", **avg}, sort_keys=True) + "\n")
    cols = ["method", "period", "n_cases", *metric_names(ks), "examples_touched", "shortfall",
            *[f"n_{t}" for t in TYPES]]
    with (out / "report.tsv").open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for r in reports:
            rec = r.record()
            w.writerow([_fmt(rec.get(c, "")) for c in cols])
    with (out / "summary.tsv").open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["method", *metric_names(ks)])
        for method, avg in averages.items():
            w.writerow([method, *[_fmt(avg[n]) for n in metric_names(ks)]])


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def read_report_tsv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))
