"""Matrix factorization scorer with pointwise log loss and 1:1 negative sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError
from .numerics import log_sigmoid, rng_stream, sigmoid

INIT_STD = 0.01


@dataclass
class Embeddings:
    P: np.ndarray  # users x d
    Q: np.ndarray  # items x d

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.Q = np.asarray(self.Q, dtype=np.float64)
        if self.P.ndim != 2 or self.Q.ndim != 2 or self.P.shape[1] != self.Q.shape[1]:
            raise ContractError(f"embedding shapes {self.P.shape} and {self.Q.shape} disagree")

    @property
    def d(self) -> int:
        return self.P.shape[1]

    @property
    def n_users(self) -> int:
        return self.P.shape[0]

    @property
    def n_items(self) -> int:
        return self.Q.shape[0]

    def copy(self) -> "Embeddings":
        return Embeddings(self.P.copy(), self.Q.copy())

    def group(self, name: str) -> np.ndarray:
        return {"user": self.P, "item": self.Q}[name]

    @classmethod
    def random(cls, n_users: int, n_items: int, d: int, rng: np.random.Generator) -> "Embeddings":
        return grow(cls(np.zeros((0, d)), np.zeros((0, d))), n_users, n_items, rng)


def score(emb: Embeddings, user: int, item: int) -> float:
    if not 0 <= user < emb.n_users:
        raise ContractError(f"user {user} out of range [0, {emb.n_users})")
    if not 0 <= item < emb.n_items:
        raise ContractError(f"item {item} out of range [0, {emb.n_items})")
    return float(emb.P[user] @ emb.Q[item])


def grow(emb: Embeddings, n_users: int, n_items: int, rng: np.random.Generator) -> Embeddings:
    """Append Gaussian(0, 0.01^2) rows so there are ``n_users`` / ``n_items`` rows.

    User rows are drawn before item rows. Existing rows are kept bit-for-bit.
    """
    if n_users < emb.n_users or n_items < emb.n_items:
        raise ContractError(
            f"cannot shrink embeddings from ({emb.n_users}, {emb.n_items}) to ({n_users}, {n_items})"
        )
    d = emb.d
    new_p = rng.normal(0.0, INIT_STD, size=(n_users - emb.n_users, d))
    new_q = rng.normal(0.0, INIT_STD, size=(n_items - emb.n_items, d))
    return Embeddings(np.vstack([emb.P, new_p]), np.vstack([emb.Q, new_q]))


def entity_rows(seed: int, group: str, ids, d: int) -> np.ndarray:
    """Initial rows for entity ids, each from its own ``init/<group>/<id>`` stream.

    An entity gets the same row no matter when or by which strategy it is grown.
    Values are rounded to float32 so they survive a checkpoint round trip.
    """
    out = np.empty((len(ids), d))
    for k, e in enumerate(ids):
        out[k] = rng_stream(seed, f"init/{group}/{int(e)}").normal(0.0, INIT_STD, size=d)
    return out.astype(np.float32).astype(np.float64)


def grow_entities(emb: Embeddings, n_users: int, n_items: int, seed: int) -> Embeddings:
    """Like :func:`grow`, with per-entity streams (see :func:`entity_rows`)."""
    if n_users < emb.n_users or n_items < emb.n_items:
        raise ContractError(
            f"cannot shrink embeddings from ({emb.n_users}, {emb.n_items}) to ({n_users}, {n_items})"
        )
    new_p = entity_rows(seed, "user", range(emb.n_users, n_users), emb.d)
    new_q = entity_rows(seed, "item", range(emb.n_items, n_items), emb.d)
    return Embeddings(np.vstack([emb.P, new_p]), np.vstack([emb.Q, new_q]))


# -- observed interactions --------------------------------------------------


def _keys(users, items) -> np.ndarray:
    return (np.asarray(users, dtype=np.int64) << 32) | np.asarray(items, dtype=np.int64)


class Observed:
    """Set of observed (user, item) pairs, stored as sorted packed int64 keys."""

    def __init__(self, keys: np.ndarray | None = None):
        self.keys = np.unique(keys) if keys is not None else np.zeros(0, dtype=np.int64)

    @classmethod
    def from_pairs(cls, users, items) -> "Observed":
        return cls(_keys(users, items))

    def union(self, users, items) -> "Observed":
        out = Observed.__new__(Observed)
        out.keys = np.union1d(self.keys, _keys(users, items))
        return out

    def contains(self, users, items) -> np.ndarray:
        k = _keys(users, items)
        if len(self.keys) == 0:
            return np.zeros(k.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self.keys, k), len(self.keys) - 1)
        return self.keys[pos] == k

    def count(self, users) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        lo = np.searchsorted(self.keys, users << 32)
        hi = np.searchsorted(self.keys, (users + 1) << 32)
        return hi - lo

    def items_of(self, user: int) -> np.ndarray:
        lo = np.searchsorted(self.keys, np.int64(user) << 32)
        hi = np.searchsorted(self.keys, np.int64(user + 1) << 32)
        return (self.keys[lo:hi] & 0xFFFFFFFF).astype(np.int64)

    def __len__(self) -> int:
        return len(self.keys)


def sample_negatives(users, observed: Observed, n_items: int, rng: np.random.Generator) -> np.ndarray:
    """One item per entry of ``users``, uniform over items that user has not interacted with."""
    users = np.asarray(users, dtype=np.int64)
    if len(users) == 0:
        return np.zeros(0, dtype=np.int64)
    uniq = np.unique(users)
    full = uniq[observed.count(uniq) >= n_items]
    if len(full):
        raise DataError(f"user {int(full[0])} has interacted with every item; no negative exists")
    items = rng.integers(0, n_items, size=len(users))
    bad = observed.contains(users, items)
    while bad.any():
        idx = np.flatnonzero(bad)
        items[idx] = rng.integers(0, n_items, size=len(idx))
        bad[idx] = observed.contains(users[idx], items[idx])
    return items


# -- loss -------------------------------------------------------------------


def pointwise_loss_grad(Xu, Xi, iu, ii, labels, with_grad=True):
    """Summed log loss over examples ``(Xu[iu[k]], Xi[ii[k]], labels[k])``.

    Returns ``(loss, gXu, gXi)`` where the gradients are w.r.t. the rows of
    ``Xu`` and ``Xi``. Accumulation is in example order.
    """
    eu = Xu[iu]
    ei = Xi[ii]
    s = np.einsum("ij,ij->i", eu, ei)
    y = np.asarray(labels, dtype=np.float64)
    loss = -float(np.sum(y * log_sigmoid(s) + (1.0 - y) * log_sigmoid(-s)))
    if not with_grad:
        return loss, None, None
    g = sigmoid(s) - y
    gXu = np.zeros_like(Xu)
    gXi = np.zeros_like(Xi)
    np.add.at(gXu, iu, g[:, None] * ei)
    np.add.at(gXi, ii, g[:, None] * eu)
    return loss, gXu, gXi


def _examples(positives, negatives):
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
    pairs = np.vstack([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return pairs[:, 0], pairs[:, 1], labels


def log_loss(emb: Embeddings, positives, negatives) -> float:
    """``-sum log sig(y_pos) - sum log(1 - sig(y_neg))`` over (user, item) pair arrays."""
    users, items, labels = _examples(positives, negatives)
    if len(users) == 0:
        raise ContractError("log_loss needs at least one example")
    loss, _, _ = pointwise_loss_grad(emb.P, emb.Q, users, items, labels, with_grad=False)
    return loss


def log_loss_grad(emb: Embeddings, positives, negatives) -> tuple[np.ndarray, np.ndarray]:
    """Dense gradients ``(dL/dP, dL/dQ)``; rows without examples are zero."""
    users, items, labels = _examples(positives, negatives)
    _, gP, gQ = pointwise_loss_grad(emb.P, emb.Q, users, items, labels)
    return gP, gQ


# -- minibatching -----------------------------------------------------------


@dataclass
class Batch:
    users: np.ndarray  # unique user ids touched
    items: np.ndarray  # unique item ids touched
    iu: np.ndarray  # per-example index into ``users``
    ii: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def make_batch(users, items, labels) -> Batch:
    uu, iu = np.unique(users, return_inverse=True)
    ui, ii = np.unique(items, return_inverse=True)
    return Batch(uu, ui, iu.ravel(), ii.ravel(), np.asarray(labels, dtype=np.float64))


def epoch_examples(pos_users, pos_items, observed: Observed, n_items: int, rng, negatives=None):
    """Positives plus one sampled negative each, shuffled.

    Returns ``(users, items, labels)``. Passing ``negatives`` reuses a frozen
    negative set instead of drawing a fresh one.
    """
    pos_users = np.asarray(pos_users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    if negatives is None:
        negatives = sample_negatives(pos_users, observed, n_items, rng)
    users = np.concatenate([pos_users, pos_users])
    items = np.concatenate([pos_items, negatives])
    labels = np.concatenate([np.ones(len(pos_users)), np.zeros(len(pos_users))])
    perm = rng.permutation(len(users))
    return users[perm], items[perm], labels[perm]


def iter_batches(users, items, labels, batch_size: int):
    n = len(users)
    step = n if batch_size <= 0 else batch_size
    for lo in range(0, n, step):
        sl = slice(lo, lo + step)
        yield make_batch(users[sl], items[sl], labels[sl])
