"""Minibatch loops shared by the baselines and the meta-learning trainer."""
from __future__ import annotations

import numpy as np

from .mf import Batch, Embeddings, Observed, epoch_examples, iter_batches, pointwise_loss_grad, sample_negatives
from .numerics import ParamOptimizer, rng_stream
from .transfer import Transfer


def frozen_negatives(seed, label, pos_users, observed, n_items):
    return sample_negatives(pos_users, observed, n_items, rng_stream(seed, f"{label}/negatives"))


def hat_objective(W: Embeddings, b: Batch, lam: float, through=None):
    """Log loss of one batch plus ``lam`` times the squared norm of the rows it touches.

    Scores come from ``W`` directly, or from ``f(W_prev, W)`` when
    ``through=(W_prev, theta_user, theta_item)``. Returns
    ``(data_loss, penalty, g_users, g_items)``; the gradients are for the rows
    ``W.P[b.users]`` and ``W.Q[b.items]`` and include the penalty.
    """
    hu, hi = W.P[b.users], W.Q[b.items]
    if through is None:
        loss, gu, gi = pointwise_loss_grad(hu, hi, b.iu, b.ii, b.labels)
    else:
        prev, th_u, th_i = through
        xu, cu = th_u.forward(prev.P[b.users], hu)
        xi, ci = th_i.forward(prev.Q[b.items], hi)
        loss, gxu, gxi = pointwise_loss_grad(xu, xi, b.iu, b.ii, b.labels)
        gu = th_u.backward_input(cu, gxu)
        gi = th_i.backward_input(ci, gxi)
    penalty = lam * (float(np.sum(hu * hu)) + float(np.sum(hi * hi)))
    return loss, penalty, gu + 2.0 * lam * hu, gi + 2.0 * lam * hi


def theta_objective(thetas: dict[str, Transfer], W_prev: Embeddings, W_hat: Embeddings, b: Batch, lam: float):
    """Log loss of ``f(W_prev, W_hat)`` on one batch plus ``lam * ||theta||^2``.

    ``W_hat`` is a constant here. Returns ``(data_loss, penalty, grads)`` with
    ``grads[group][name]`` for every trainable network.
    """
    th_u, th_i = thetas["user"], thetas["item"]
    xu, cu = th_u.forward(W_prev.P[b.users], W_hat.P[b.users])
    xi, ci = th_i.forward(W_prev.Q[b.items], W_hat.Q[b.items])
    loss, gxu, gxi = pointwise_loss_grad(xu, xi, b.iu, b.ii, b.labels)
    penalty, grads = 0.0, {}
    for group, th, cache, g in (("user", th_u, cu, gxu), ("item", th_i, ci, gxi)):
        if not th.trainable:
            continue
        gr = th.backward_params(cache, g)
        for k in gr:
            penalty += lam * float(np.sum(th.params[k] ** 2))
            gr[k] = gr[k] + 2.0 * lam * th.params[k]
        grads[group] = gr
    return loss, penalty, grads


def fit_embeddings(
    W: Embeddings,
    pos_users,
    pos_items,
    observed: Observed,
    n_items: int,
    *,
    epochs: int,
    lam: float,
    batch_size: int,
    seed: int,
    label: str,
    opt: ParamOptimizer,
    epoch_offset: int = 0,
    through: tuple[Embeddings, Transfer, Transfer] | None = None,
    negatives=None,
) -> float:
    """Minimize log loss (+ ``lam`` * squared norm of touched rows) over ``W`` in place.

    With ``through=(W_prev, theta_user, theta_item)`` the loss is taken on the
    transfer outputs ``f(W_prev, W)`` and gradients flow back into ``W`` only.
    Each epoch draws its negatives and order from stream ``label/<epoch>``.
    Returns the data loss summed over the last epoch.
    """
    last = 0.0
    for e in range(epochs):
        rng = rng_stream(seed, f"{label}/{epoch_offset + e}")
        users, items, labels = epoch_examples(pos_users, pos_items, observed, n_items, rng, negatives)
        last = 0.0
        for b in iter_batches(users, items, labels, batch_size):
            loss, _, gu, gi = hat_objective(W, b, lam, through)
            gP = np.zeros_like(W.P)
            gQ = np.zeros_like(W.Q)
            gP[b.users] = gu
            gQ[b.items] = gi
            params = {"P": W.P, "Q": W.Q}
            opt.step(params, {"P": gP, "Q": gQ})
            W.P, W.Q = params["P"], params["Q"]
            last += loss
    return last


def fit_transfer(
    thetas: dict[str, Transfer],
    opts: dict[str, ParamOptimizer],
    W_prev: Embeddings,
    W_hat: Embeddings,
    pos_users,
    pos_items,
    observed: Observed,
    n_items: int,
    *,
    epochs: int,
    lam: float,
    batch_size: int,
    seed: int,
    label: str,
    epoch_offset: int = 0,
    negatives=None,
) -> float:
    """Minimize log loss of ``f(W_prev, W_hat)`` (+ ``lam`` * ||theta||^2) over
    both transfer networks, holding ``W_hat`` fixed."""
    last = 0.0
    for e in range(epochs):
        rng = rng_stream(seed, f"{label}/{epoch_offset + e}")
        users, items, labels = epoch_examples(pos_users, pos_items, observed, n_items, rng, negatives)
        last = 0.0
        for b in iter_batches(users, items, labels, batch_size):
            loss, _, grads = theta_objective(thetas, W_prev, W_hat, b, lam)
            for group, g in grads.items():
                opts[group].step(thetas[group].params, g)
            last += loss
    return last
