"""Reference retraining strategies: full retrain, fine-tune, reservoir-sampled retrain.

All three use the same log loss, negative sampling and optimizer as the
meta-learned strategy. The reservoir is plain uniform reservoir sampling
(algorithm R), standing in for the heuristic of published streaming MF.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .fitting import fit_embeddings, frozen_negatives
from .mf import Embeddings, Observed
from .numerics import ParamOptimizer


def _fit(W_prev, users, items, observed, n_items, cfg: TrainConfig, label, epochs):
    W = W_prev.copy()
    if len(users) == 0 or epochs == 0:
        return W
    negs = frozen_negatives(cfg.seed, label, users, observed, n_items) if cfg.freeze_negatives else None
    opt = ParamOptimizer(cfg.optimizer, cfg.lr_mf)
    fit_embeddings(W, users, items, observed, n_items, epochs=epochs, lam=cfg.lambda_mf,
                   batch_size=cfg.batch_size, seed=cfg.seed, label=label, opt=opt, negatives=negs)
    return W


def fine_tune(W_prev: Embeddings, users, items, observed: Observed, n_items: int, cfg: TrainConfig,
              label: str, epochs: int | None = None) -> Embeddings:
    """Train on the newest period only, starting from ``W_prev``."""
    epochs = cfg.epochs_finetune if epochs is None else epochs
    return _fit(W_prev, users, items, observed, n_items, cfg, label, epochs)


def full_retrain(W_prev: Embeddings, users, items, observed: Observed, n_items: int, cfg: TrainConfig,
                 label: str) -> Embeddings:
    """Train on every interaction so far (``users``/``items`` hold the union), from ``W_prev``."""
    return _fit(W_prev, users, items, observed, n_items, cfg, label, cfg.epochs_full)


@dataclass
class Reservoir:
    capacity: int
    users: list[int] = field(default_factory=list)
    items: list[int] = field(default_factory=list)
    seen: int = 0

    def __len__(self):
        return len(self.users)

    def arrays(self):
        return np.asarray(self.users, dtype=np.int64), np.asarray(self.items, dtype=np.int64)


def reservoir_offer(res: Reservoir, interaction, rng) -> Reservoir:
    """Algorithm R: keep the first ``capacity`` offers, then replace a random
    slot with probability ``capacity / k`` on the k-th offer."""
    u, i = int(interaction[0]), int(interaction[1])
    res.seen += 1
    if len(res) < res.capacity:
        res.users.append(u)
        res.items.append(i)
    elif res.capacity > 0:
        j = int(rng.integers(res.seen))
        if j < res.capacity:
            res.users[j] = u
            res.items[j] = i
    return res


def reservoir_retrain(W_prev: Embeddings, users, items, res: Reservoir, observed: Observed, n_items: int,
                      cfg: TrainConfig, label: str, rng) -> Embeddings:
    """Fine-tune on the new period plus the reservoir, then offer the new period to the reservoir."""
    ru, ri = res.arrays()
    W = _fit(W_prev, np.concatenate([users, ru]), np.concatenate([items, ri]), observed, n_items, cfg,
             label, cfg.epochs_reservoir)
    for u, i in zip(users, items):
        reservoir_offer(res, (u, i), rng)
    return W
