import math

import numpy as np
import pytest

from smlrec.baselines import Reservoir, fine_tune, full_retrain, reservoir_offer, reservoir_retrain
from smlrec.config import TrainConfig
from smlrec.data import SyntheticSpec, assign_roles, generate_synthetic
from smlrec.experiment import BaselineStrategy
from smlrec.mf import Embeddings, Observed


def small_cfg(**kw):
    base = dict(d=4, epochs_finetune=3, epochs_full=3, epochs_reservoir=3, batch_size=8)
    return TrainConfig(**{**base, **kw})


def rand_emb(seed, nu=6, ni=6, d=4):
    rng = np.random.default_rng(seed)
    return Embeddings(0.1 * rng.normal(size=(nu, d)), 0.1 * rng.normal(size=(ni, d)))


def test_empty_period_returns_previous():
    W = rand_emb(0)
    out = fine_tune(W, np.zeros(0, int), np.zeros(0, int), Observed(), 6, small_cfg(), "fit/0")
    assert np.array_equal(out.P, W.P) and np.array_equal(out.Q, W.Q)
    assert out is not W


def test_untouched_users_keep_their_rows():
    W = rand_emb(1)
    users, items = np.array([3, 4, 5]), np.array([0, 1, 2])
    obs = Observed.from_pairs(users, items)
    out = fine_tune(W, users, items, obs, 6, small_cfg(), "fit/1")
    assert np.array_equal(out.P[:3], W.P[:3])
    assert not np.array_equal(out.P[3:], W.P[3:])


def test_full_equals_finetune_with_one_period():
    W = rand_emb(2)
    users, items = np.array([0, 1, 2, 3]), np.array([1, 2, 3, 4])
    obs = Observed.from_pairs(users, items)
    cfg = small_cfg()
    a = fine_tune(W, users, items, obs, 6, cfg, "fit/0")
    b = full_retrain(W, users, items, obs, 6, cfg, "fit/0")
    assert np.array_equal(a.P, b.P) and np.array_equal(a.Q, b.Q)


def test_one_sgd_step_matches_hand_update():
    # each user has exactly one unobserved item, so the negatives are forced
    P0 = np.array([[0.3, -0.2], [0.1, 0.4]])
    Q0 = np.array([[0.5, 0.2], [-0.3, 0.6]])
    users, items = np.array([0, 1]), np.array([0, 1])
    obs = Observed.from_pairs(users, items)
    lr = 0.1
    cfg = small_cfg(d=2, optimizer="sgd", lr_mf=lr, epochs_full=1, batch_size=0)
    out = full_retrain(Embeddings(P0, Q0), users, items, obs, 2, cfg, "full/0")

    def sig(x):
        return 1.0 / (1.0 + math.exp(-x))

    # examples: (0,0,+), (0,1,-), (1,1,+), (1,0,-)
    e00 = sig(P0[0] @ Q0[0]) - 1.0
    e01 = sig(P0[0] @ Q0[1])
    e11 = sig(P0[1] @ Q0[1]) - 1.0
    e10 = sig(P0[1] @ Q0[0])
    gP = np.array([e00 * Q0[0] + e01 * Q0[1], e11 * Q0[1] + e10 * Q0[0]])
    gQ = np.array([e00 * P0[0] + e10 * P0[1], e01 * P0[0] + e11 * P0[1]])
    assert np.allclose(out.P, P0 - lr * gP, rtol=0, atol=1e-15)
    assert np.allclose(out.Q, Q0 - lr * gQ, rtol=0, atol=1e-15)


def test_reservoir_keeps_first_capacity_offers():
    res = Reservoir(5)
    rng = np.random.default_rng(0)
    for k in range(5):
        reservoir_offer(res, (k, k), rng)
    assert res.users == [0, 1, 2, 3, 4] and res.seen == 5
    for k in range(5, 100):
        reservoir_offer(res, (k, k), rng)
    assert len(res) == 5 and res.seen == 100


def test_reservoir_is_deterministic():
    def fill(seed):
        res, rng = Reservoir(3), np.random.default_rng(seed)
        for k in range(50):
            reservoir_offer(res, (k, 0), rng)
        return res.users

    assert fill(7) == fill(7)


def test_reservoir_inclusion_is_uniform():
    capacity, n, trials = 5, 50, 1000
    counts = np.zeros(n)
    rng = np.random.default_rng(12)
    for _ in range(trials):
        res = Reservoir(capacity)
        for k in range(n):
            reservoir_offer(res, (k, 0), rng)
        counts[res.users] += 1
    p = capacity / n
    sigma = math.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) <= 3 * sigma)


def test_capacity_zero_is_fine_tune():
    W = rand_emb(3)
    users, items = np.array([0, 2, 4]), np.array([1, 3, 5])
    obs = Observed.from_pairs(users, items)
    cfg = small_cfg()
    a = fine_tune(W, users, items, obs, 6, cfg, "fit/2")
    res = Reservoir(0)
    b = reservoir_retrain(W, users, items, res, obs, 6, cfg, "fit/2", np.random.default_rng(0))
    assert np.array_equal(a.P, b.P) and np.array_equal(a.Q, b.Q)
    assert len(res) == 0 and res.seen == 3


def test_large_reservoir_holds_the_whole_history():
    res = Reservoir(100)
    cfg = small_cfg()
    W = rand_emb(4)
    history = []
    for t in range(3):
        users, items = np.array([t, t + 1]), np.array([t + 2, t])
        history += list(zip(users.tolist(), items.tolist()))
        reservoir_retrain(W, users, items, res, Observed.from_pairs(users, items), 6, cfg, f"fit/{t}",
                          np.random.default_rng(t))
    assert list(zip(res.users, res.items)) == history


@pytest.fixture(scope="module")
def six_periods():
    spec = SyntheticSpec(n_users=60, n_items=40, periods=6, interactions_per_period=50, seed=1)
    return generate_synthetic(spec, roles=assign_roles(6, 0, 1))


def test_examples_touched(six_periods):
    ds = six_periods
    cfg = small_cfg(epochs_full=1, epochs_finetune=1, epochs_reservoir=1, reservoir_capacity=30)
    W0 = Embeddings(np.zeros((0, 4)), np.zeros((0, 4)))
    full = BaselineStrategy("full", cfg, W0)
    ft = BaselineStrategy("finetune", cfg, W0)
    rs = BaselineStrategy("reservoir", cfg, W0)
    costs = {"full": [], "ft": [], "rs": []}
    for t in range(5):
        costs["full"].append(full.retrain(ds, t))
        costs["ft"].append(ft.retrain(ds, t))
        costs["rs"].append(rs.retrain(ds, t))
    assert costs["full"] == [2 * 50 * (t + 1) for t in range(5)]
    assert costs["ft"] == [100] * 5
    assert costs["rs"] == [100, 160, 160, 160, 160]
    assert all(c <= 2 * (50 + 30) for c in costs["rs"])
