import logging

import numpy as np
import pytest

from oracles import central_gradient, naive_forward, naive_log_loss
from smlrec import checkpoint, trainer
from smlrec.config import TrainConfig
from smlrec.data import Period, PeriodizedDataset, SyntheticSpec, assign_roles, generate_synthetic
from smlrec.errors import ConfigError
from smlrec.fitting import hat_objective, theta_objective
from smlrec.mf import Embeddings, log_loss_grad, make_batch, pointwise_loss_grad
from smlrec.transfer import PARAM_ORDER, CNNTransfer, WeightedSumTransfer
from smlrec.trainer import (evaluate_and_update, init_thetas, state_from_tensors, state_to_tensors,
                            step1_update_w_hat, step2_update_theta, train_sequential)

q32 = checkpoint.quantize


class LoggingDataset(PeriodizedDataset):
    """Records every period whose interactions are read."""

    def __init__(self, base: PeriodizedDataset):
        self.__dict__.update(base.__dict__)
        self.reads: list[int] = []

    def period(self, t):
        self.reads.append(t)
        return super().period(t)


# -- the hand-traced toy -----------------------------------------------------

# every user has seen exactly two of the three items, so each negative is forced
D0 = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2)]
D1 = [(0, 1), (1, 2), (2, 0)]
D2 = [(0, 0), (1, 1), (2, 2)]
FORCED = {0: 2, 1: 0, 2: 1}


def toy_dataset():
    periods = []
    for t, D in enumerate((D0, D1, D2)):
        u = np.array([p[0] for p in D])
        i = np.array([p[1] for p in D])
        periods.append(Period(u, i, t * 100 + np.arange(len(D))))
    ds = PeriodizedDataset(periods, ["train"] * 3)
    ds.validate()
    return ds


def toy_cfg(**kw):
    base = dict(d=2, n1=2, n2=2, df=3, optimizer="sgd", batch_size=0, lr_hat=0.5, lr_theta=0.2,
                lambda1=0.01, lambda2=0.01, max_outer=2, step1_epochs=1, step2_epochs=1, seed=0)
    return TrainConfig(**{**base, **kw})


def toy_init():
    rng = np.random.default_rng(42)
    return Embeddings(0.5 * rng.normal(size=(3, 2)), 0.5 * rng.normal(size=(3, 2)))


class Oracle:
    """Scripted step-by-step run: naive forward, central-difference gradients, plain SGD."""

    def __init__(self, cfg, thetas):
        self.cfg = cfg
        self.th = {g: {k: v.copy() for k, v in thetas[g].params.items()} for g in ("user", "item")}

    @staticmethod
    def examples(D):
        return [(u, i, 1) for u, i in D] + [(u, FORCED[u], 0) for u, _ in D]

    def outputs(self, prev, hat, th=None):
        th = th or self.th
        P = [naive_forward(th["user"], prev[0][r], hat[0][r]) for r in range(3)]
        Q = [naive_forward(th["item"], prev[1][r], hat[1][r]) for r in range(3)]
        return np.array(P), np.array(Q)

    def step1(self, prev, hat, D, epochs):
        lam, lr, ex = self.cfg.lambda1, self.cfg.lr_hat, self.examples(D)
        P, Q = hat[0].copy(), hat[1].copy()
        for _ in range(epochs):
            gP = central_gradient(
                lambda x: naive_log_loss(*self.outputs(prev, (x, Q)), ex) + lam * (np.sum(x * x) + np.sum(Q * Q)), P)
            gQ = central_gradient(
                lambda x: naive_log_loss(*self.outputs(prev, (P, x)), ex) + lam * (np.sum(P * P) + np.sum(x * x)), Q)
            P, Q = P - lr * gP, Q - lr * gQ
        return P, Q

    def step2(self, prev, hat, D):
        lam, lr, ex = self.cfg.lambda2, self.cfg.lr_theta, self.examples(D)

        def total(th):
            reg = sum(np.sum(v * v) for g in th for v in th[g].values())
            return naive_log_loss(*self.outputs(prev, hat, th), ex) + lam * reg

        grads = {}
        for g in self.th:
            for k in PARAM_ORDER:
                def f(x, g=g, k=k):
                    th = {gg: dict(v) for gg, v in self.th.items()}
                    th[g][k] = x
                    return total(th)

                grads[(g, k)] = central_gradient(f, self.th[g][k])
        for (g, k), gr in grads.items():
            self.th[g][k] = self.th[g][k] - lr * gr

    def quantize(self, *embs):
        self.th = {g: {k: q32(v) for k, v in p.items()} for g, p in self.th.items()}
        return [tuple(q32(a) for a in e) for e in embs]


def oracle_alg1(cfg, W_init, thetas):
    o = Oracle(cfg, thetas)
    prev = (W_init.P.copy(), W_init.Q.copy())
    hat = prev
    for _ in range(cfg.max_outer):
        hat = o.step1(prev, hat, D0, cfg.step1_epochs)
        o.step2(prev, hat, D1)
    W0 = o.outputs(prev, hat)
    prev, hat, W0 = o.quantize(prev, hat, W0)
    # last task: one W_hat update, no transfer update
    prev1 = W0
    hat1 = o.step1(prev1, W0, D1, cfg.step1_epochs)
    W1 = o.outputs(prev1, hat1)
    prev1, hat1, W1 = o.quantize(prev1, hat1, W1)
    return o, prev1, hat1, W1


def assert_close(a, b, atol=1e-6):
    assert np.max(np.abs(np.asarray(a) - np.asarray(b))) < atol


@pytest.fixture(scope="module")
def alg1_run():
    cfg = toy_cfg()
    W_init = toy_init()
    thetas = init_thetas(cfg)
    o, prev1, hat1, W1 = oracle_alg1(cfg, W_init, thetas)
    state = train_sequential(toy_dataset(), cfg, W_init, periods=[0, 1])
    return cfg, o, (prev1, hat1, W1), state


def test_alg1_matches_hand_traced_oracle(alg1_run):
    cfg, o, (prev1, hat1, W1), state = alg1_run
    assert state.t == 1
    assert_close(state.W.P, W1[0])
    assert_close(state.W.Q, W1[1])
    assert_close(state.W_hat.P, hat1[0])
    for g in ("user", "item"):
        for k in PARAM_ORDER:
            assert_close(state.thetas[g].params[k], o.th[g][k])


def test_alg2_matches_hand_traced_oracle(alg1_run):
    cfg, o, (prev1, hat1, _), _ = alg1_run
    # fresh copy of the state after the first algorithm
    state = train_sequential(toy_dataset(), cfg, toy_init(), periods=[0, 1])
    evaluate_and_update(state, toy_dataset(), cfg)

    hat = hat1
    for _ in range(cfg.max_outer):
        o.step2(prev1, hat, D2)
        hat = o.step1(prev1, hat, D1, cfg.step1_epochs)
    o.step2(prev1, hat, D2)
    Wt = o.outputs(prev1, hat)
    hat2 = o.step1(Wt, Wt, D2, cfg.step1_epochs * cfg.max_outer)
    W2 = o.outputs(Wt, hat2)
    _, W2 = o.quantize(Wt, W2)

    assert state.t == 2
    assert_close(state.W.P, W2[0])
    assert_close(state.W.Q, W2[1])
    for g in ("user", "item"):
        for k in PARAM_ORDER:
            assert_close(state.thetas[g].params[k], o.th[g][k])


# -- loop structure ----------------------------------------------------------


@pytest.fixture(scope="module")
def drift_data():
    spec = SyntheticSpec(n_users=40, n_items=30, periods=7, interactions_per_period=80, seed=2, arrival_rate=0.3)
    return generate_synthetic(spec, roles=assign_roles(7, 1, 1))


def small_cfg(**kw):
    base = dict(d=4, n1=2, n2=2, df=4, max_outer=2, batch_size=32, lr_theta=0.01)
    return TrainConfig(**{**base, **kw})


def W_start(ds, cfg):
    rng = np.random.default_rng(0)
    return Embeddings(0.1 * rng.normal(size=(ds.n_users_upto(0), cfg.d)),
                      0.1 * rng.normal(size=(ds.n_items_upto(0), cfg.d)))


def _task_reads(ds, cfg, periods):
    lds = LoggingDataset(ds)
    spans = []

    def on_period(state):
        spans.append((state.t, set(lds.reads)))
        lds.reads.clear()

    train_sequential(lds, cfg, W_start(ds, cfg), periods=periods, on_period=on_period)
    return spans


def test_training_reads_only_current_and_next_period(drift_data):
    for t, reads in _task_reads(drift_data, small_cfg(), [0, 1, 2, 3, 4]):
        assert reads <= {t, t + 1}, (t, reads)
        assert t in reads


def test_no_future_variant_reads_only_the_current_period(drift_data):
    for t, reads in _task_reads(drift_data, small_cfg(next_period_meta=False), [0, 1, 2, 3]):
        assert reads == {t}


def test_serving_reads_only_current_and_next_period(drift_data):
    cfg = small_cfg()
    lds = LoggingDataset(drift_data)
    state = train_sequential(lds, cfg, W_start(drift_data, cfg), periods=[0, 1, 2, 3, 4])
    for t in (4, 5):
        lds.reads.clear()
        evaluate_and_update(state, lds, cfg)
        assert set(lds.reads) <= {t, t + 1}


def test_w_prev_is_untouched_within_a_task(drift_data, monkeypatch):
    cfg = small_cfg()
    seen = []

    def guard(fn):
        def wrapped(state, *a, **kw):
            P, Q = state.W_prev.P.copy(), state.W_prev.Q.copy()
            out = fn(state, *a, **kw)
            # the transfer update may append rows for new entities, never rewrite old ones
            assert np.array_equal(state.W_prev.P[:len(P)], P)
            assert np.array_equal(state.W_prev.Q[:len(Q)], Q)
            seen.append(fn.__name__)
            return out
        return wrapped

    monkeypatch.setattr(trainer, "step1_update_w_hat", guard(trainer.step1_update_w_hat))
    monkeypatch.setattr(trainer, "step2_update_theta", guard(trainer.step2_update_theta))
    state = train_sequential(drift_data, cfg, W_start(drift_data, cfg), periods=[0, 1, 2])
    evaluate_and_update(state, drift_data, cfg)
    assert "step1_update_w_hat" in seen and "step2_update_theta" in seen


def test_single_period_leaves_transfer_at_init(drift_data):
    cfg = small_cfg()
    init = init_thetas(cfg)
    state = train_sequential(drift_data, cfg, W_start(drift_data, cfg), periods=[0])
    for g in ("user", "item"):
        for k in PARAM_ORDER:
            assert np.array_equal(state.thetas[g].params[k], q32(init[g].params[k]))
    assert [r["iter"] for r in state.records] == [0]
    assert "loss_s" not in state.records[0]


def test_examples_touched_is_per_period(drift_data):
    cfg = small_cfg()
    state = train_sequential(drift_data, cfg, W_start(drift_data, cfg), periods=[0, 1, 2, 3])
    for rec in state.records:
        assert rec["examples_touched"] == 2 * len(drift_data.period(rec["period"]))


@pytest.mark.parametrize("periods", [[1, 0], [0, 2], []])
def test_periods_must_be_consecutive(drift_data, periods):
    with pytest.raises(ConfigError):
        train_sequential(drift_data, small_cfg(), W_start(drift_data, small_cfg()), periods=periods)


def test_report_comes_before_any_update(drift_data):
    cfg = small_cfg()
    state = train_sequential(drift_data, cfg, W_start(drift_data, cfg), periods=[0, 1, 2, 3, 4])
    before = checkpoint.digest(state_to_tensors(state))
    at_eval = []

    def evaluator(W, s):
        at_eval.append(checkpoint.digest(state_to_tensors(state)))
        return s

    rep, _ = evaluate_and_update(state, drift_data, cfg, evaluator)
    assert rep == 5
    assert at_eval == [before]
    assert checkpoint.digest(state_to_tensors(state)) != before


def test_frozen_transfer_skips_the_refresh(drift_data):
    cfg = small_cfg(freeze_transfer_at_test=True)
    state = train_sequential(drift_data, cfg, W_start(drift_data, cfg), periods=[0, 1, 2, 3, 4])
    before = {g: {k: v.copy() for k, v in state.thetas[g].params.items()} for g in ("user", "item")}
    evaluate_and_update(state, drift_data, cfg)
    for g in before:
        for k in before[g]:
            assert np.array_equal(state.thetas[g].params[k], before[g][k])
    assert not any(r.get("phase") == "refresh" for r in state.records)
    assert state.t == 5


def test_state_checkpoint_round_trip(drift_data):
    cfg = small_cfg()
    state = train_sequential(drift_data, cfg, W_start(drift_data, cfg), periods=[0, 1, 2])
    tensors = state_to_tensors(state)
    back = state_from_tensors(checkpoint.loads(checkpoint.dumps(tensors)), cfg)
    assert checkpoint.digest(state_to_tensors(back)) == checkpoint.digest(tensors)
    # continuing from the restored state is bitwise identical
    evaluate_and_update(state, drift_data, cfg)
    evaluate_and_update(back, drift_data, cfg)
    assert checkpoint.digest(state_to_tensors(back)) == checkpoint.digest(state_to_tensors(state))


def test_empty_period_is_a_warned_no_op(caplog):
    p = Period(np.array([0, 1]), np.array([0, 1]), np.array([0, 1]))
    empty = Period(np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
    ds = PeriodizedDataset([p, empty], ["train", "train"])
    cfg = small_cfg(d=2)
    state = trainer.new_state(cfg, Embeddings(np.ones((2, 2)), np.ones((2, 2))), 0)
    before = {k: v.copy() for k, v in state.thetas["user"].params.items()}
    with caplog.at_level(logging.WARNING):
        assert step2_update_theta(state, ds, cfg) == 0.0
    assert "empty" in caplog.text
    for k in before:
        assert np.array_equal(state.thetas["user"].params[k], before[k])
    state.t = 1
    hat = state.W_hat.P.copy()
    assert step1_update_w_hat(state, ds, cfg) == 0.0
    assert np.array_equal(state.W_hat.P, hat)


# -- the two objectives ------------------------------------------------------


def rand_setup(seed, d=4):
    rng = np.random.default_rng(seed)
    W_prev = Embeddings(rng.normal(size=(3, d)), rng.normal(size=(4, d)))
    W_hat = Embeddings(W_prev.P + 0.2 * rng.normal(size=(3, d)), W_prev.Q + 0.2 * rng.normal(size=(4, d)))
    b = make_batch(np.array([0, 1, 2, 0]), np.array([1, 3, 0, 2]), np.array([1.0, 0.0, 1.0, 0.0]))
    thetas = {g: CNNTransfer.init(d, 3, 2, 5, rng) for g in ("user", "item")}
    return W_prev, W_hat, b, thetas


def test_weighted_sum_step_is_scaled_mf_gradient():
    W_prev, W_hat, b, _ = rand_setup(0)
    a = 0.3
    th = {g: WeightedSumTransfer(4, alpha=a, trainable=False) for g in ("user", "item")}
    _, _, gu, gi = hat_objective(W_hat, b, 0.0, (W_prev, th["user"], th["item"]))
    X = Embeddings(a * W_prev.P + (1 - a) * W_hat.P, a * W_prev.Q + (1 - a) * W_hat.Q)
    pos = [(u, i) for u, i, y in zip(b.users[b.iu], b.items[b.ii], b.labels) if y == 1]
    neg = [(u, i) for u, i, y in zip(b.users[b.iu], b.items[b.ii], b.labels) if y == 0]
    gP, gQ = log_loss_grad(X, pos, neg)
    assert np.allclose(gu, (1 - a) * gP[b.users], rtol=0, atol=1e-14)
    assert np.allclose(gi, (1 - a) * gQ[b.items], rtol=0, atol=1e-14)


def test_b2_gradient_sums_routed_upstream():
    W_prev, W_hat, b, thetas = rand_setup(1)
    _, _, grads = theta_objective(thetas, W_prev, W_hat, b, 0.0)
    xu = thetas["user"].apply(W_prev.P[b.users], W_hat.P[b.users])
    xi = thetas["item"].apply(W_prev.Q[b.items], W_hat.Q[b.items])
    _, gxu, gxi = pointwise_loss_grad(xu, xi, b.iu, b.ii, b.labels)
    assert np.allclose(grads["user"]["b2"], gxu.sum(axis=0), rtol=0, atol=1e-14)
    assert np.allclose(grads["item"]["b2"], gxi.sum(axis=0), rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_hat_objective_descends(seed):
    W_prev, W_hat, b, thetas = rand_setup(seed)
    through = (W_prev, thetas["user"], thetas["item"])
    W = W_hat.copy()
    losses = []
    for _ in range(6):
        loss, pen, gu, gi = hat_objective(W, b, 0.01, through)
        losses.append(loss + pen)
        W.P[b.users] -= 1e-2 * gu
        W.Q[b.items] -= 1e-2 * gi
    assert all(x > y for x, y in zip(losses, losses[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_theta_objective_descends(seed):
    W_prev, W_hat, b, thetas = rand_setup(seed)
    losses = []
    for _ in range(6):
        loss, pen, grads = theta_objective(thetas, W_prev, W_hat, b, 0.01)
        losses.append(loss + pen)
        for g, gr in grads.items():
            for k, v in gr.items():
                thetas[g].params[k] = thetas[g].params[k] - 1e-2 * v
    assert all(x > y for x, y in zip(losses, losses[1:]))
