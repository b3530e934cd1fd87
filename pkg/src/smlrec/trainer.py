"""Sequential meta-learning of the transfer network (offline training and serving-time updates)."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import checkpoint
from .config import TrainConfig
from .data import PeriodizedDataset
from .errors import ConfigError
from .fitting import fit_embeddings, fit_transfer, frozen_negatives
from .mf import Embeddings, grow_entities
from .numerics import OptimizerState, ParamOptimizer, rng_stream
from .transfer import Transfer, build, from_tensors

log = logging.getLogger(__name__)

GROUPS = ("user", "item")


@dataclass
class TaskState:
    """Everything needed to continue from task ``t``.

    ``W_prev`` is the model the task started from, ``W_hat`` the parameters
    fitted on the task's own period, ``W`` the served output f(W_prev, W_hat).
    """

    t: int
    W_prev: Embeddings
    W_hat: Embeddings
    W: Embeddings
    thetas: dict[str, Transfer]
    opt_hat: ParamOptimizer
    opt_theta: dict[str, ParamOptimizer]
    hat_epochs: int = 0
    meta_epochs: int = 0
    records: list[dict] = field(default_factory=list)


def init_thetas(cfg: TrainConfig) -> dict[str, Transfer]:
    out = {}
    for g in GROUPS:
        rng = rng_stream(cfg.seed, f"theta/{g}")
        out[g] = build(cfg.variant, cfg.d, rng, n1=cfg.n1, n2=cfg.n2, df=cfg.df, hidden=cfg.mlp_hidden,
                       alpha=cfg.alpha, alpha_trainable=cfg.alpha_trainable,
                       use_conv=cfg.use_conv, use_fc=cfg.use_fc)
    return out


def new_state(cfg: TrainConfig, W_init: Embeddings, t: int, thetas=None) -> TaskState:
    W_prev = W_init.copy()
    return TaskState(
        t=t,
        W_prev=W_prev,
        W_hat=W_prev.copy(),
        W=W_prev.copy(),
        thetas=thetas if thetas is not None else init_thetas(cfg),
        opt_hat=ParamOptimizer(cfg.optimizer, cfg.lr_hat),
        opt_theta={g: ParamOptimizer(cfg.optimizer, cfg.lr_theta) for g in GROUPS},
    )


def _grow_task(state: TaskState, n_users: int, n_items: int, seed: int) -> None:
    """Give new entities identical fresh rows in W_prev and W_hat."""
    prev = state.W_prev
    if n_users <= prev.n_users and n_items <= prev.n_items:
        return
    n_users, n_items = max(n_users, prev.n_users), max(n_items, prev.n_items)
    grown = grow_entities(prev, n_users, n_items, seed)
    nu, ni = prev.n_users, prev.n_items
    state.W_hat = Embeddings(np.vstack([state.W_hat.P, grown.P[nu:]]), np.vstack([state.W_hat.Q, grown.Q[ni:]]))
    state.W_prev = grown
    state.opt_hat.grow("P", n_users)
    state.opt_hat.grow("Q", n_items)


def _through(state: TaskState, cfg: TrainConfig):
    if cfg.direct_fit:
        return None
    return state.W_prev, state.thetas["user"], state.thetas["item"]


def step1_update_w_hat(state: TaskState, dataset: PeriodizedDataset, cfg: TrainConfig, epochs=None) -> float:
    """Fit W_hat on the task's own period through the frozen transfer."""
    t = state.t
    D = dataset.period(t)
    if len(D) == 0:
        log.warning("period %d is empty; skipping the W_hat update", t)
        return 0.0
    epochs = cfg.step1_epochs if epochs is None else epochs
    label = f"fit/{t}"
    obs = dataset.observed(t)
    n_items = dataset.n_items_upto(t)
    negs = frozen_negatives(cfg.seed, label, D.users, obs, n_items) if cfg.freeze_negatives else None
    loss = fit_embeddings(
        state.W_hat, D.users, D.items, obs, n_items,
        epochs=epochs, lam=cfg.lambda1, batch_size=cfg.batch_size, seed=cfg.seed, label=label,
        opt=state.opt_hat, epoch_offset=state.hat_epochs, through=_through(state, cfg), negatives=negs,
    )
    state.hat_epochs += epochs
    return loss


def meta_period(t: int, cfg: TrainConfig) -> int:
    """Period whose data trains the transfer for task ``t``."""
    return t + 1 if cfg.next_period_meta else t


def step2_update_theta(state: TaskState, dataset: PeriodizedDataset, cfg: TrainConfig, epochs=None) -> float:
    """Fit both transfer networks on the meta period, holding W_hat constant."""
    s = meta_period(state.t, cfg)
    D = dataset.period(s)
    if len(D) == 0:
        log.warning("period %d is empty; skipping the transfer update", s)
        return 0.0
    _grow_task(state, dataset.n_users_upto(s), dataset.n_items_upto(s), cfg.seed)
    epochs = cfg.step2_epochs if epochs is None else epochs
    label = f"meta/{state.t}"
    obs = dataset.observed(s)
    n_items = dataset.n_items_upto(s)
    negs = frozen_negatives(cfg.seed, label, D.users, obs, n_items) if cfg.freeze_negatives else None
    loss = fit_transfer(
        state.thetas, state.opt_theta, state.W_prev, state.W_hat, D.users, D.items, obs, n_items,
        epochs=epochs, lam=cfg.lambda2, batch_size=cfg.batch_size, seed=cfg.seed, label=label,
        epoch_offset=state.meta_epochs, negatives=negs,
    )
    state.meta_epochs += epochs
    return loss


def transfer_output(state: TaskState) -> Embeddings:
    return Embeddings(
        state.thetas["user"].apply(state.W_prev.P, state.W_hat.P),
        state.thetas["item"].apply(state.W_prev.Q, state.W_hat.Q),
    )


def _quantize_state(state: TaskState) -> None:
    """Round all carried state to float32 so checkpoints restore it exactly."""
    q = checkpoint.quantize
    for emb in (state.W_prev, state.W_hat, state.W):
        emb.P, emb.Q = q(emb.P), q(emb.Q)
    for th in state.thetas.values():
        for k in th.params:
            th.params[k] = q(th.params[k])
    for opt in (state.opt_hat, *state.opt_theta.values()):
        for st in opt.states.values():
            if st.m is not None:
                st.m, st.v = q(st.m), q(st.v)


def start_task(state: TaskState, dataset: PeriodizedDataset, t: int, W_prev: Embeddings,
               cfg: TrainConfig, last: bool) -> None:
    """Begin task ``t``: W_hat <- W_prev, fresh W_hat optimizer, rows for new entities."""
    state.t = t
    state.W_prev = W_prev.copy()
    state.W_hat = W_prev.copy()
    state.opt_hat = ParamOptimizer(cfg.optimizer, cfg.lr_hat)
    state.hat_epochs = 0
    state.meta_epochs = 0
    _grow_task(state, dataset.n_users_upto(t), dataset.n_items_upto(t), cfg.seed)
    if not last and cfg.next_period_meta:
        _grow_task(state, dataset.n_users_upto(t + 1), dataset.n_items_upto(t + 1), cfg.seed)


def train_sequential(
    dataset: PeriodizedDataset,
    cfg: TrainConfig,
    W_init: Embeddings,
    periods: list[int] | None = None,
    thetas: dict[str, Transfer] | None = None,
    validator: Callable[[Embeddings], float] | None = None,
    on_period: Callable[[TaskState], None] | None = None,
) -> TaskState:
    """One chronological pass of tasks over ``periods`` (default: every training period).

    For each task: W_hat <- W_prev, then alternate the W_hat update on D_t and the
    transfer update on D_{t+1} for ``cfg.max_outer`` rounds (the last period
    stops after its first W_hat update), then W_t = f(W_prev, W_hat).
    """
    if periods is None:
        periods = [t for t in dataset.indices("train") if t >= cfg.pretrain_periods]
    if len(periods) == 0:
        raise ConfigError("no training periods to run")
    if any(b != a + 1 for a, b in zip(periods, periods[1:])):
        raise ConfigError(f"training periods must be consecutive and chronological: {periods}")
    state = new_state(cfg, W_init, periods[0], thetas)
    T = periods[-1]
    for t in periods:
        tic = time.perf_counter()
        start_task(state, dataset, t, state.W if t != periods[0] else W_init, cfg, last=(t == T))
        best, stale = -np.inf, 0
        for it in range(cfg.max_outer):
            loss_r = step1_update_w_hat(state, dataset, cfg)
            rec = {"period": t, "iter": it, "loss_r": loss_r}
            if t == T:
                state.records.append(rec)
                break
            rec["loss_s"] = step2_update_theta(state, dataset, cfg)
            if validator is not None and cfg.early_stop_patience > 0:
                score = validator(transfer_output(state))
                rec["valid_recall@20"] = score
                if score > best:
                    best, stale = score, 0
                else:
                    stale += 1
            state.records.append(rec)
            if validator is not None and cfg.early_stop_patience > 0 and stale >= cfg.early_stop_patience:
                break
        state.W = transfer_output(state)
        _quantize_state(state)
        wall = time.perf_counter() - tic
        touched = 2 * len(dataset.period(t))
        for rec in state.records:
            if rec["period"] == t:
                rec["examples_touched"] = touched
                rec["wall_time"] = wall
        if on_period is not None:
            on_period(state)
    return state


def evaluate_and_update(
    state: TaskState,
    dataset: PeriodizedDataset,
    cfg: TrainConfig,
    evaluator: Callable[[Embeddings, int], object] | None = None,
):
    """Serve-time step for the period after ``state.t``.

    Tests the current ``W`` on the new period first, then refreshes the
    transfer on the new data interleaved with W_hat on the old, recomputes
    ``W``, and opens the next task: fits W_hat for the new period and serves
    f(W, W_hat). Returns ``(report, state)``; ``state`` is advanced in place.
    """
    t = state.t
    s = t + 1
    if s >= len(dataset):
        raise ConfigError(f"no period after {t} to evaluate on")
    report = evaluator(state.W, s) if evaluator is not None else None
    tic = time.perf_counter()

    if not cfg.freeze_transfer_at_test:
        for it in range(cfg.max_outer):
            loss_s = step2_update_theta(state, dataset, cfg)
            loss_r = step1_update_w_hat(state, dataset, cfg)
            state.records.append({"period": t, "iter": it, "phase": "refresh", "loss_s": loss_s, "loss_r": loss_r})
        step2_update_theta(state, dataset, cfg)
    W_t = transfer_output(state)

    start_task(state, dataset, s, W_t, cfg, last=True)
    loss_r = step1_update_w_hat(state, dataset, cfg, epochs=cfg.step1_epochs * cfg.max_outer)
    state.W = transfer_output(state)
    _quantize_state(state)
    wall = time.perf_counter() - tic
    state.records.append({"period": s, "iter": 0, "phase": "serve", "loss_r": loss_r,
                          "examples_touched": 2 * len(dataset.period(s)), "wall_time": wall})
    return report, state


# -- checkpoint mapping -----------------------------------------------------


def _opt_tensors(prefix: str, opt: ParamOptimizer) -> dict[str, np.ndarray]:
    out = {}
    for name, st in opt.states.items():
        out[f"{prefix}.{name}.step"] = np.array([[float(st.step)]])
        if st.m is not None:
            out[f"{prefix}.{name}.m"] = st.m
            out[f"{prefix}.{name}.v"] = st.v
    return out


def _opt_from(tensors, prefix: str, kind: str, lr: float, vectors=()) -> ParamOptimizer:
    opt = ParamOptimizer(kind, lr)
    pre = prefix + "."
    names = {k[len(pre):].rsplit(".", 1)[0] for k in tensors if k.startswith(pre)}
    for name in sorted(names):
        st = OptimizerState(kind, lr, step=int(tensors[f"{pre}{name}.step"][0, 0]))
        if f"{pre}{name}.m" in tensors:
            m, v = tensors[f"{pre}{name}.m"], tensors[f"{pre}{name}.v"]
            if name in vectors:
                m, v = m.ravel(), v.ravel()
            st.m, st.v = m, v
        opt.states[name] = st
    return opt


def state_to_tensors(state: TaskState) -> dict[str, np.ndarray]:
    out = {
        "P": state.W.P, "Q": state.W.Q,
        "prev.P": state.W_prev.P, "prev.Q": state.W_prev.Q,
        "hat.P": state.W_hat.P, "hat.Q": state.W_hat.Q,
        "meta.period": np.array([[float(state.t)]]),
        "meta.epochs": np.array([[float(state.hat_epochs), float(state.meta_epochs)]]),
    }
    for g in GROUPS:
        out.update(state.thetas[g].to_tensors(g))
        out.update(_opt_tensors(f"opt.{g}", state.opt_theta[g]))
    out.update(_opt_tensors("opt.hat", state.opt_hat))
    return out


def state_from_tensors(tensors: dict[str, np.ndarray], cfg: TrainConfig) -> TaskState:
    d = tensors["P"].shape[1]
    thetas = {g: from_tensors(tensors, g, d) for g in GROUPS}
    opt_theta = {}
    for g in GROUPS:
        vec = {k for k, v in thetas[g].params.items() if v.ndim == 1}
        opt_theta[g] = _opt_from(tensors, f"opt.{g}", cfg.optimizer, cfg.lr_theta, vec)
    epochs = tensors["meta.epochs"].ravel()
    return TaskState(
        t=int(tensors["meta.period"][0, 0]),
        W_prev=Embeddings(tensors["prev.P"], tensors["prev.Q"]),
        W_hat=Embeddings(tensors["hat.P"], tensors["hat.Q"]),
        W=Embeddings(tensors["P"], tensors["Q"]),
        thetas=thetas,
        opt_hat=_opt_from(tensors, "opt.hat", cfg.optimizer, cfg.lr_hat),
        opt_theta=opt_theta,
        hat_epochs=int(epochs[0]),
        meta_epochs=int(epochs[1]),
    )
