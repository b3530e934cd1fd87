"""Strategy runners: pretrain, retrain through the training periods, then walk the
validation/test periods testing each served model before updating it."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, checkpoint
from .config import TrainConfig
from .data import PeriodizedDataset
from .errors import ConfigError
from .evaluation import PeriodReport, average, evaluate_period
from .fitting import fit_embeddings
from .mf import Embeddings, grow_entities
from .numerics import ParamOptimizer, rng_stream
from .trainer import (TaskState, evaluate_and_update, state_from_tensors, state_to_tensors,
                      train_sequential)

log = logging.getLogger(__name__)


def pretrain(dataset: PeriodizedDataset, cfg: TrainConfig) -> Embeddings:
    """Initial model shared by every strategy: MF on periods before ``pretrain_periods``."""
    k = cfg.pretrain_periods
    empty = Embeddings(np.zeros((0, cfg.d)), np.zeros((0, cfg.d)))
    W = grow_entities(empty, dataset.n_users_upto(k - 1), dataset.n_items_upto(k - 1), cfg.seed)
    if k > 0:
        ps = [dataset.period(m) for m in range(k)]
        users = np.concatenate([p.users for p in ps])
        items = np.concatenate([p.items for p in ps])
        opt = ParamOptimizer(cfg.optimizer, cfg.lr_mf)
        fit_embeddings(W, users, items, dataset.observed(k - 1), dataset.n_items_upto(k - 1),
                       epochs=cfg.epochs_pretrain, lam=cfg.lambda_mf, batch_size=cfg.batch_size,
                       seed=cfg.seed, label="pretrain", opt=opt)
    W.P, W.Q = checkpoint.quantize(W.P), checkpoint.quantize(W.Q)
    return W


def evaluate_model(W: Embeddings, dataset: PeriodizedDataset, s: int, cfg: TrainConfig, method="") -> PeriodReport:
    """Test ``W`` on period ``s``. Candidates depend only on (seed, s), never on the method."""
    W = grow_entities(W, max(W.n_users, dataset.n_users_upto(s)), max(W.n_items, dataset.n_items_upto(s)), cfg.seed)
    D = dataset.period(s)
    rep = evaluate_period(
        W, D.users, D.items, dataset.observed(s), dataset.n_items_upto(s),
        rng_stream(cfg.seed, f"candidates/{s}"),
        n_old_users=dataset.n_users_upto(s - 1), n_old_items=dataset.n_items_upto(s - 1),
        period=s, ks=cfg.ks, n_negatives=cfg.eval_negatives,
    )
    rep.method = method
    return rep


# -- strategies -------------------------------------------------------------


class BaselineStrategy:
    def __init__(self, kind: str, cfg: TrainConfig, W: Embeddings):
        if kind not in ("full", "finetune", "reservoir"):
            raise ConfigError(f"unknown baseline {kind!r}")
        self.kind = kind
        self.cfg = cfg
        self.W = W.copy()
        self.reservoir = baselines.Reservoir(cfg.reservoir_capacity)
        self.t = cfg.pretrain_periods - 1

    @property
    def model(self) -> Embeddings:
        return self.W

    def retrain(self, dataset: PeriodizedDataset, t: int) -> int:
        cfg = self.cfg
        W = grow_entities(self.W, max(self.W.n_users, dataset.n_users_upto(t)),
                          max(self.W.n_items, dataset.n_items_upto(t)), cfg.seed)
        obs, n_items = dataset.observed(t), dataset.n_items_upto(t)
        if self.kind == "finetune":
            D = dataset.period(t)
            W = baselines.fine_tune(W, D.users, D.items, obs, n_items, cfg, f"fit/{t}")
            touched = 2 * len(D)
        elif self.kind == "full":
            ps = [dataset.period(m) for m in range(t + 1)]
            users = np.concatenate([p.users for p in ps])
            items = np.concatenate([p.items for p in ps])
            W = baselines.full_retrain(W, users, items, obs, n_items, cfg, f"full/{t}")
            touched = 2 * len(users)
        else:
            D = dataset.period(t)
            touched = 2 * (len(D) + len(self.reservoir))
            W = baselines.reservoir_retrain(W, D.users, D.items, self.reservoir, obs, n_items, cfg,
                                            f"fit/{t}", rng_stream(cfg.seed, f"reservoir/{t}"))
        W.P, W.Q = checkpoint.quantize(W.P), checkpoint.quantize(W.Q)
        self.W = W
        self.t = t
        return touched

    def serve(self, dataset, s, method):
        rep = evaluate_model(self.W, dataset, s, self.cfg, method)
        tic = time.perf_counter()
        rep.examples_touched = self.retrain(dataset, s)
        return rep, time.perf_counter() - tic

    def to_tensors(self) -> dict[str, np.ndarray]:
        ru, ri = self.reservoir.arrays()
        return {"P": self.W.P, "Q": self.W.Q, "meta.period": np.array([[float(self.t)]]),
                "reservoir.pairs": np.stack([ru, ri], axis=1).astype(np.float64).reshape(-1, 2),
                "reservoir.seen": np.array([[float(self.reservoir.seen)]])}

    @classmethod
    def from_tensors(cls, kind, cfg, tensors):
        out = cls(kind, cfg, Embeddings(tensors["P"], tensors["Q"]))
        out.t = int(tensors["meta.period"][0, 0])
        pairs = tensors["reservoir.pairs"].astype(np.int64)
        out.reservoir.users = pairs[:, 0].tolist()
        out.reservoir.items = pairs[:, 1].tolist()
        out.reservoir.seen = int(tensors["reservoir.seen"][0, 0])
        return out


class SMLStrategy:
    kind = "sml"

    def __init__(self, cfg: TrainConfig, W: Embeddings | None = None, state: TaskState | None = None):
        self.cfg = cfg
        self.W_init = W
        self.state = state

    @property
    def model(self) -> Embeddings:
        return self.state.W if self.state is not None else self.W_init

    def train(self, dataset, periods, on_period=None, validator=None):
        self.state = train_sequential(dataset, self.cfg, self.W_init, periods=periods,
                                      on_period=on_period, validator=validator)
        return self.state

    def serve(self, dataset, s, method):
        # wall time covers the update only, like the baselines
        eval_time = 0.0

        def evaluator(W, p):
            nonlocal eval_time
            t0 = time.perf_counter()
            rep = evaluate_model(W, dataset, p, self.cfg, method)
            eval_time += time.perf_counter() - t0
            return rep

        tic = time.perf_counter()
        rep, _ = evaluate_and_update(self.state, dataset, self.cfg, evaluator)
        rep.examples_touched = 2 * len(dataset.period(s))
        return rep, time.perf_counter() - tic - eval_time

    def to_tensors(self):
        return state_to_tensors(self.state)

    @classmethod
    def from_tensors(cls, cfg, tensors):
        return cls(cfg, state=state_from_tensors(tensors, cfg))


def make_strategy(kind: str, cfg: TrainConfig, W: Embeddings):
    return SMLStrategy(cfg, W) if kind == "sml" else BaselineStrategy(kind, cfg, W)


def load_strategy(kind: str, cfg: TrainConfig, tensors):
    if kind == "sml":
        return SMLStrategy.from_tensors(cfg, tensors)
    return BaselineStrategy.from_tensors(kind, cfg, tensors)


# -- whole runs -------------------------------------------------------------


@dataclass
class RunResult:
    method: str
    reports: list[PeriodReport] = field(default_factory=list)
    costs: list[dict] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    strategy: object = None

    def test_reports(self, dataset) -> list[PeriodReport]:
        test = set(dataset.indices("test"))
        return [r for r in self.reports if r.period in test]

    def valid_reports(self, dataset) -> list[PeriodReport]:
        valid = set(dataset.indices("valid"))
        return [r for r in self.reports if r.period in valid]

    def test_average(self, dataset) -> dict[str, float]:
        return average(self.test_reports(dataset))


def training_periods(dataset: PeriodizedDataset, cfg: TrainConfig) -> list[int]:
    periods = [t for t in dataset.indices("train") if t >= cfg.pretrain_periods]
    if not periods:
        raise ConfigError("pretrain_periods leaves no training periods")
    return periods


def run_training(dataset, cfg: TrainConfig, kind: str, method: str | None = None, checkpoint_dir=None,
                 W_init: Embeddings | None = None):
    """Pretrain (unless ``W_init`` is given) and retrain through every training period."""
    method = method or kind
    W0 = pretrain(dataset, cfg) if W_init is None else W_init
    strat = make_strategy(kind, cfg, W0)
    periods = training_periods(dataset, cfg)
    result = RunResult(method, strategy=strat)
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    if kind == "sml":
        def on_period(state):
            rec = [r for r in state.records if r["period"] == state.t]
            result.costs.append({"method": method, "period": state.t, "phase": "train",
                                 "examples_touched": rec[-1]["examples_touched"],
                                 "wall_time": rec[-1]["wall_time"]})
            if ckdir:
                checkpoint.save(ckdir / f"period_{state.t}.smlc", state_to_tensors(state))

        strat.train(dataset, periods, on_period=on_period)
        result.records = strat.state.records
    else:
        for t in periods:
            tic = time.perf_counter()
            touched = strat.retrain(dataset, t)
            wall = time.perf_counter() - tic
            result.costs.append({"method": method, "period": t, "phase": "train",
                                 "examples_touched": touched, "wall_time": wall})
            result.records.append({"period": t, "iter": 0, "examples_touched": touched, "wall_time": wall})
            if ckdir:
                checkpoint.save(ckdir / f"period_{t}.smlc", strat.to_tensors())
    return result


def run_serving(dataset, strat, cfg: TrainConfig, method: str, result: RunResult | None = None,
                checkpoint_dir=None, periods=None) -> RunResult:
    """Test-then-update over the validation and test periods."""
    result = result or RunResult(method, strategy=strat)
    if periods is None:
        periods = dataset.indices("valid") + dataset.indices("test")
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    for s in periods:
        rep, wall = strat.serve(dataset, s, method)
        result.reports.append(rep)
        result.costs.append({"method": method, "period": s, "phase": "serve",
                             "examples_touched": rep.examples_touched, "wall_time": wall})
        if ckdir:
            checkpoint.save(ckdir / f"period_{s}.smlc", strat.to_tensors())
    return result


def run_strategy(dataset, cfg: TrainConfig, kind: str, method: str | None = None, W_init=None) -> RunResult:
    result = run_training(dataset, cfg, kind, method, W_init=W_init)
    return run_serving(dataset, result.strategy, cfg, result.method, result)


def write_log(path, records) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
