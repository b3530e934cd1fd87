"""Interaction logs, period splitting and a synthetic drifting-preference generator."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError
from .mf import Observed
from .numerics import rng_stream

log = logging.getLogger(__name__)

ROLES = ("train", "valid", "test")


class Interaction(NamedTuple):
    user: int
    item: int
    timestamp: int


@dataclass
class Log:
    """A parsed interaction log with dense ids and the raw ids they came from."""

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: list[str] = field(default_factory=list)  # dense -> raw
    item_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.users)

    def interactions(self) -> list[Interaction]:
        return [Interaction(int(u), int(i), int(t))
                for u, i, t in zip(self.users, self.items, self.timestamps)]

    def select(self, mask) -> "Log":
        return Log(self.users[mask], self.items[mask], self.timestamps[mask], self.user_ids, self.item_ids)


def _densify(raw):
    mapping: dict[str, int] = {}
    dense = np.empty(len(raw), dtype=np.int64)
    for k, r in enumerate(raw):
        dense[k] = mapping.setdefault(r, len(mapping))
    return dense, list(mapping)


def parse_interactions(path) -> Log:
    """Read ``user<TAB>item<TAB>unix_timestamp`` lines.

    User and item ids may be any token; they are densified to 0..n-1 in order
    of first appearance in the file. Timestamps must be non-negative integers.
    """
    path = Path(path)
    raw_u, raw_i, ts = [], [], []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"expected 3 tab-separated fields, got {len(parts)}", line=lineno)
            u, i, t = (p.strip() for p in parts)
            if not u or not i:
                raise DataError("empty id", line=lineno)
            try:
                stamp = int(t)
            except ValueError:
                raise DataError(f"timestamp {t!r} is not an integer", line=lineno) from None
            if stamp < 0:
                raise DataError("negative timestamp", line=lineno)
            raw_u.append(u)
            raw_i.append(i)
            ts.append(stamp)
    if not ts:
        raise DataError(f"{path}: no interactions")
    users, user_ids = _densify(raw_u)
    items, item_ids = _densify(raw_i)
    return Log(users, items, np.asarray(ts, dtype=np.int64), user_ids, item_ids)


def write_interactions(path, log_: Log) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i, t in zip(log_.users, log_.items, log_.timestamps):
            uid = log_.user_ids[u] if log_.user_ids else str(u)
            iid = log_.item_ids[i] if log_.item_ids else str(i)
            fh.write(f"{uid}\t{iid}\t{int(t)}\n")


def filter_inactive(log_: Log, min_user: int = 0, min_item: int = 0) -> Log:
    """Drop interactions of users with fewer than ``min_user`` and items with
    fewer than ``min_item`` interactions (one pass over the original counts)."""
    ucount = np.bincount(log_.users)
    icount = np.bincount(log_.items)
    keep = (ucount[log_.users] >= min_user) & (icount[log_.items] >= min_item)
    return log_.select(keep)


# -- periodized dataset -----------------------------------------------------


@dataclass
class Period:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return len(self.users)

    @property
    def pairs(self) -> np.ndarray:
        return np.stack([self.users, self.items], axis=1)


class PeriodizedDataset:
    """Chronologically ordered periods with train/valid/test roles.

    Ids are dense and numbered in order of first appearance over time, so the
    entities known after period ``t`` are exactly ``0..n_users_upto(t)-1``.
    """

    def __init__(self, periods, roles=None, user_ids=None, item_ids=None, meta=None):
        self._periods = list(periods)
        self.roles = list(roles) if roles is not None else ["train"] * len(self._periods)
        self.user_ids = user_ids
        self.item_ids = item_ids
        self.meta = dict(meta or {})
        self._observed: list[Observed] | None = None
        nu = np.zeros(len(self._periods), dtype=np.int64)
        ni = np.zeros(len(self._periods), dtype=np.int64)
        cu = ci = 0
        for t, p in enumerate(self._periods):
            if len(p):
                cu = max(cu, int(p.users.max()) + 1)
                ci = max(ci, int(p.items.max()) + 1)
            nu[t], ni[t] = cu, ci
        self._nu, self._ni = nu, ni

    def __len__(self):
        return len(self._periods)

    def period(self, t: int) -> Period:
        return self._periods[t]

    @property
    def n_users(self) -> int:
        return int(self._nu[-1]) if len(self) else 0

    @property
    def n_items(self) -> int:
        return int(self._ni[-1]) if len(self) else 0

    def n_users_upto(self, t: int) -> int:
        return int(self._nu[t]) if t >= 0 else 0

    def n_items_upto(self, t: int) -> int:
        return int(self._ni[t]) if t >= 0 else 0

    def observed(self, t: int) -> Observed:
        """Pairs interacted in any period up to and including ``t``."""
        if self._observed is None:
            obs, acc = [], Observed()
            for p in self._periods:
                acc = acc.union(p.users, p.items)
                obs.append(acc)
            self._observed = obs
        return self._observed[t] if t >= 0 else Observed()

    def indices(self, role: str) -> list[int]:
        return [t for t, r in enumerate(self.roles) if r == role]

    def sizes(self) -> list[int]:
        return [len(p) for p in self._periods]

    def validate(self) -> None:
        last = -np.inf
        for t, p in enumerate(self._periods):
            if len(p.users) != len(p.items) or len(p.users) != len(p.timestamps):
                raise DataError(f"period {t}: column lengths differ")
            if len(p):
                if p.timestamps.min() < last:
                    raise DataError(f"period {t} starts before period {t - 1} ends")
                if np.any(np.diff(p.timestamps) < 0):
                    raise DataError(f"period {t} is not sorted by time")
                last = p.timestamps.max()
                if p.users.min() < 0 or p.items.min() < 0:
                    raise DataError(f"period {t}: negative id")
        if len(self.roles) != len(self._periods):
            raise DataError("role map length differs from period count")
        rank = {r: k for k, r in enumerate(ROLES)}
        for r in self.roles:
            if r not in rank:
                raise DataError(f"unknown role {r!r}")
        order = [rank[r] for r in self.roles]
        if order != sorted(order):
            raise DataError("roles must run train < valid < test")
        # ids are numbered by first appearance over time
        seen_u = seen_i = 0
        for t, p in enumerate(self._periods):
            for ids, seen, what in ((p.users, seen_u, "user"), (p.items, seen_i, "item")):
                fresh = ids[ids >= seen]
                if len(fresh):
                    first = np.unique(fresh, return_index=True)
                    order_ = first[0][np.argsort(first[1])]
                    if not np.array_equal(order_, np.arange(seen, seen + len(order_))):
                        raise DataError(f"period {t}: {what} ids not in first-appearance order")
            seen_u, seen_i = self.n_users_upto(t), self.n_items_upto(t)


def assign_roles(n_periods: int, n_valid: int, n_test: int) -> list[str]:
    if n_valid < 0 or n_test < 0 or n_valid + n_test >= n_periods:
        raise ConfigError(f"{n_valid} valid + {n_test} test periods leave no training periods of {n_periods}")
    n_train = n_periods - n_valid - n_test
    return ["train"] * n_train + ["valid"] * n_valid + ["test"] * n_test


def default_roles(n_periods: int, scheme: str) -> list[str]:
    """Role split scaled from 30/3/7 (count scheme) or 48/5/10 (window scheme)."""
    valid_frac, test_frac = (3 / 40, 7 / 40) if scheme == "count" else (5 / 63, 10 / 63)
    n_valid = max(1, round(n_periods * valid_frac))
    n_test = max(1, round(n_periods * test_frac))
    return assign_roles(n_periods, n_valid, n_test)


def _build(users, items, ts, period_of, n_periods, roles, log_, meta):
    """Sort chronologically, renumber ids by first appearance and cut periods."""
    order = np.lexsort((np.arange(len(ts)), ts))
    users, items, ts, period_of = users[order], items[order], ts[order], period_of[order]
    # period_of is non-decreasing after a time sort except across ties; make it stable
    order = np.argsort(period_of, kind="stable")
    users, items, ts, period_of = users[order], items[order], ts[order], period_of[order]
    u_new, u_old = _densify(users.tolist())
    i_new, i_old = _densify(items.tolist())
    user_ids = [log_.user_ids[int(k)] if log_.user_ids else str(k) for k in u_old]
    item_ids = [log_.item_ids[int(k)] if log_.item_ids else str(k) for k in i_old]
    bounds = np.searchsorted(period_of, np.arange(n_periods + 1))
    periods = [Period(u_new[a:b], i_new[a:b], ts[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    return PeriodizedDataset(periods, roles, user_ids, item_ids, meta)


def split_by_count(log_: Log, n_periods: int, roles=None) -> PeriodizedDataset:
    """Equal-size chronological periods; the remainder goes one each to the earliest."""
    n = len(log_)
    if n_periods <= 0 or n_periods > n:
        raise DataError(f"cannot split {n} interactions into {n_periods} periods")
    base, extra = divmod(n, n_periods)
    sizes = np.full(n_periods, base)
    sizes[:extra] += 1
    period_of = np.repeat(np.arange(n_periods), sizes)
    order = np.lexsort((np.arange(n), log_.timestamps))
    inv = np.empty(n, dtype=np.int64)
    inv[order] = period_of
    roles = roles or default_roles(n_periods, "count")
    meta = {"scheme": "count", "periods": n_periods}
    return _build(log_.users, log_.items, log_.timestamps, inv, n_periods, roles, log_, meta)


def split_by_window(log_: Log, cuts, tz_offset_hours: float = 0.0, roles=None) -> PeriodizedDataset:
    """One period per (day, time-of-day window). ``cuts`` are window start hours.

    Hours before the first cut belong to the previous day's last window. Empty
    windows are kept as empty periods.
    """
    cuts = [float(c) for c in cuts]
    if not cuts or any(not 0 <= c < 24 for c in cuts) or any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise ConfigError(f"window cuts must be strictly increasing within [0, 24): {cuts}")
    local = log_.timestamps.astype(np.float64) + tz_offset_hours * 3600.0
    # shift so the first cut sits at local midnight
    shifted = local - cuts[0] * 3600.0
    day = np.floor(shifted / 86400.0).astype(np.int64)
    hour = (shifted - day * 86400.0) / 3600.0 + cuts[0]
    window = np.searchsorted(np.asarray(cuts), hour, side="right") - 1
    w = len(cuts)
    day0 = day.min()
    n_days = int(day.max() - day0 + 1)
    period_of = (day - day0) * w + window
    n_periods = n_days * w
    roles = roles or default_roles(n_periods, "window")
    meta = {"scheme": "window", "cuts": ",".join(f"{c:g}" for c in cuts),
            "tz_offset_hours": tz_offset_hours, "periods": n_periods}
    return _build(log_.users, log_.items, log_.timestamps, period_of, n_periods, roles, log_, meta)


# -- synthetic data ---------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_users: int = 500
    n_items: int = 300
    periods: int = 15
    interactions_per_period: int = 2000
    factor_dim: int = 8
    drift_rate: float = 0.5
    arrival_rate: float = 0.0
    seed: int = 0
    # scale of the long-term and initial short-term preference vectors
    long_term_scale: float = 1.0
    short_term_scale: float = 1.0
    temperature: float = 2.0
    # let a user interact with the same item again in a later draw
    repeat_interactions: bool = True

    def __post_init__(self):
        for name in ("n_users", "n_items", "periods", "interactions_per_period", "factor_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.drift_rate < 0 or not 0 <= self.arrival_rate < 1:
            raise ConfigError("drift_rate must be >= 0 and arrival_rate in [0, 1)")


def _arrivals(rng, n, rate, periods):
    when = np.zeros(n, dtype=np.int64)
    if rate > 0 and periods > 1:
        late = rng.random(n) < rate
        when[late] = rng.integers(1, periods, size=int(late.sum()))
    return when


def generate_synthetic(spec: SyntheticSpec, roles=None) -> PeriodizedDataset:
    """Users carry a fixed long-term taste plus a short-term taste that random-walks
    from period to period; each interaction picks an item by softmax over
    ``temperature * (long + short) . item_factor`` among arrived items."""
    rng = rng_stream(spec.seed, "synthetic")
    k = spec.factor_dim
    item_f = rng.normal(0.0, 1.0 / np.sqrt(k), size=(spec.n_items, k))
    long_t = rng.normal(0.0, spec.long_term_scale, size=(spec.n_users, k))
    short_t = rng.normal(0.0, spec.short_term_scale, size=(spec.n_users, k))
    u_arrive = _arrivals(rng, spec.n_users, spec.arrival_rate, spec.periods)
    i_arrive = _arrivals(rng, spec.n_items, spec.arrival_rate, spec.periods)
    # guarantee someone to sample in period 0
    u_arrive[0] = 0
    i_arrive[0] = 0

    users_all, items_all, ts_all, per_all = [], [], [], []
    seen: set[tuple[int, int]] = set()
    for t in range(spec.periods):
        if t > 0:
            short_t = short_t + spec.drift_rate * rng.normal(size=short_t.shape)
        act_u = np.flatnonzero(u_arrive <= t)
        act_i = np.flatnonzero(i_arrive <= t)
        n = spec.interactions_per_period
        us = rng.choice(act_u, size=n)
        logits = spec.temperature * (long_t[us] + short_t[us]) @ item_f[act_i].T
        logits -= logits.max(axis=1, keepdims=True)
        prob = np.exp(logits)
        if not spec.repeat_interactions:
            for row, u in enumerate(us):
                for col, i in enumerate(act_i):
                    if (int(u), int(i)) in seen:
                        prob[row, col] = 0.0
        prob /= prob.sum(axis=1, keepdims=True)
        cdf = np.cumsum(prob, axis=1)
        draw = rng.random(n)[:, None]
        picks = act_i[np.minimum((cdf < draw).sum(axis=1), len(act_i) - 1)]
        if not spec.repeat_interactions:
            seen.update(zip(us.tolist(), picks.tolist()))
        ts = t * 86400 + np.sort(rng.integers(0, 86400, size=n))
        users_all.append(us)
        items_all.append(picks)
        ts_all.append(ts)
        per_all.append(np.full(n, t))
    users = np.concatenate(users_all)
    items = np.concatenate(items_all)
    ts = np.concatenate(ts_all)
    per = np.concatenate(per_all)
    raw = Log(users, items, ts)
    roles = roles or default_roles(spec.periods, "count")
    meta = {"scheme": "synthetic", "periods": spec.periods, "seed": spec.seed,
            "drift_rate": spec.drift_rate, "arrival_rate": spec.arrival_rate}
    return _build(users, items, ts, per, spec.periods, roles, raw, meta)


# -- dataset directories ----------------------------------------------------


def write_kv(path, data: dict) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for k, v in data.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            fh.write(f"{k} = {v}\n")


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_dataset(ds: PeriodizedDataset, out_dir, extra_meta=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "interactions.tsv").open("w", encoding="utf-8") as fh:
        for t in range(len(ds)):
            p = ds.period(t)
            for u, i, s in zip(p.users, p.items, p.timestamps):
                fh.write(f"{u}\t{i}\t{s}\t{t}\n")
    for name, ids in (("user_map.tsv", ds.user_ids), ("item_map.tsv", ds.item_ids)):
        with (out / name).open("w", encoding="utf-8") as fh:
            for k, raw in enumerate(ids or []):
                fh.write(f"{k}\t{raw}\n")
    manifest = {
        "n_interactions": sum(ds.sizes()),
        "n_users": ds.n_users,
        "n_items": ds.n_items,
        "n_periods": len(ds),
        "period_sizes": ds.sizes(),
        "roles": ds.roles,
        **ds.meta,
        **(extra_meta or {}),
    }
    write_kv(out / "manifest.txt", manifest)
    return out / "manifest.txt"


def load_dataset(path) -> PeriodizedDataset:
    """Load a directory written by :func:`save_dataset` (or its manifest path)."""
    path = Path(path)
    root = path.parent if path.is_file() else path
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    meta = read_kv(manifest)
    n_periods = int(meta["n_periods"])
    raw = np.loadtxt(root / "interactions.tsv", dtype=np.int64, ndmin=2)
    if raw.size == 0:
        raw = np.zeros((0, 4), dtype=np.int64)
    bounds = np.searchsorted(raw[:, 3], np.arange(n_periods + 1))
    periods = [Period(raw[a:b, 0], raw[a:b, 1], raw[a:b, 2]) for a, b in zip(bounds[:-1], bounds[1:])]

    def _ids(name):
        f = root / name
        if not f.exists():
            return None
        return [line.split("\t", 1)[1] for line in f.read_text(encoding="utf-8").splitlines()]

    roles = meta["roles"].split(",")
    keep = {k: v for k, v in meta.items()
            if k not in {"n_interactions", "n_users", "n_items", "n_periods", "period_sizes", "roles"}}
    return PeriodizedDataset(periods, roles, _ids("user_map.tsv"), _ids("item_map.tsv"), keep)
