"""Finite-difference checks of the two meta-learning gradients on small random instances.

``dL_r / dW_hat`` routes the log loss back through the transfer input;
``dL_s / dTheta`` covers all six tensors of each transfer network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fitting import hat_objective, theta_objective
from .mf import Embeddings, make_batch
from .numerics import GradCheckReport, finite_diff_check, rng_stream
from .transfer import PARAM_ORDER, CNNTransfer


@dataclass
class Instance:
    W_prev: Embeddings
    W_hat: Embeddings
    thetas: dict
    batch: object
    lam_hat: float
    lam_theta: float


def random_instance(rng, d_max=8, n1_max=4, n2_max=3, df_max=6, max_interactions=5) -> Instance:
    """Random sizes within the bounds, random weights, a few labelled pairs."""
    d = int(rng.integers(2, d_max + 1))
    n1 = int(rng.integers(1, n1_max + 1))
    n2 = int(rng.integers(1, n2_max + 1))
    df = int(rng.integers(1, df_max + 1))
    n_users, n_items = 3, 4
    W_prev = Embeddings(rng.normal(size=(n_users, d)), rng.normal(size=(n_items, d)))
    W_hat = Embeddings(W_prev.P + 0.3 * rng.normal(size=(n_users, d)),
                       W_prev.Q + 0.3 * rng.normal(size=(n_items, d)))
    thetas = {}
    for g in ("user", "item"):
        th = CNNTransfer.init(d, n1, n2, df, rng)
        # nonzero biases so their gradients are exercised too
        th.params["b1"] = 0.1 * rng.normal(size=df)
        th.params["b2"] = 0.1 * rng.normal(size=d)
        thetas[g] = th
    n = int(rng.integers(1, max_interactions + 1))
    users = rng.integers(0, n_users, size=n)
    items = rng.integers(0, n_items, size=n)
    labels = rng.integers(0, 2, size=n).astype(np.float64)
    return Instance(W_prev, W_hat, thetas, make_batch(users, items, labels),
                    lam_hat=float(rng.uniform(0, 0.1)), lam_theta=float(rng.uniform(0, 0.1)))


def check_instance(inst: Instance, tol=1e-4, h=1e-5, perturb=0.0) -> list[tuple[str, GradCheckReport]]:
    """One report per checked tensor. ``perturb`` scales every analytic
    gradient by ``1 + perturb`` (a deliberate fault for exercising the check)."""
    b = inst.batch
    through = (inst.W_prev, inst.thetas["user"], inst.thetas["item"])
    scale = 1.0 + perturb
    out = []

    # dL_r / dW_hat for the touched user rows, then item rows
    _, _, gu, gi = hat_objective(inst.W_hat, b, inst.lam_hat, through)
    for group, rows, grad in (("user", b.users, gu), ("item", b.items, gi)):
        def f(x, group=group, rows=rows):
            W = inst.W_hat.copy()
            W.group(group)[rows] = x
            loss, pen, _, _ = hat_objective(W, b, inst.lam_hat, through)
            return loss + pen

        x0 = inst.W_hat.group(group)[rows].copy()
        out.append((f"hat.{group}", finite_diff_check(f, x0, grad * scale, h=h, tol=tol)))

    # dL_s / dTheta, every tensor of both networks
    _, _, grads = theta_objective(inst.thetas, inst.W_prev, inst.W_hat, b, inst.lam_theta)
    for group in ("user", "item"):
        th = inst.thetas[group]
        for name in PARAM_ORDER:
            def f(x, th=th, name=name):
                saved = th.params[name]
                th.params[name] = x
                try:
                    loss, pen, _ = theta_objective(inst.thetas, inst.W_prev, inst.W_hat, b, inst.lam_theta)
                finally:
                    th.params[name] = saved
                return loss + pen

            x0 = th.params[name].copy()
            out.append((f"theta.{group}.{name}",
                        finite_diff_check(f, x0, grads[group][name] * scale, h=h, tol=tol)))
    return out


def run_suite(trials=10, tol=1e-4, seed=0, h=1e-5, perturb=0.0) -> list[tuple[int, str, GradCheckReport]]:
    rows = []
    for k in range(trials):
        inst = random_instance(rng_stream(seed, f"gradcheck/{k}"))
        rows.extend((k, name, rep) for name, rep in check_instance(inst, tol=tol, h=h, perturb=perturb))
    return rows
