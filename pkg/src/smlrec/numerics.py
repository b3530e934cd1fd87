"""Shared numeric primitives: activations, optimizers, seeded streams and a
finite-difference gradient checker."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy.special import ndtr

from .errors import ContractError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF.

    Phi comes from ``ndtr`` (erf near zero, erfc in the tails), which keeps
    full relative precision for large negative x where ``(1 + erf)/2`` cancels.
    """
    x = np.asarray(x, dtype=np.float64)
    return x * ndtr(x)


def gelu_with_cdf(x):
    """GELU plus the ``Phi(x)`` it was built from, for reuse in ``gelu_grad``."""
    x = np.asarray(x, dtype=np.float64)
    cdf = ndtr(x)
    return x * cdf, cdf


def gelu_grad(x, cdf=None):
    """``Phi(x) + x * phi(x)``; pass ``cdf`` to skip recomputing Phi."""
    x = np.asarray(x, dtype=np.float64)
    if cdf is None:
        cdf = ndtr(x)
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def sigmoid(x):
    """Logistic function evaluated without overflow for any finite input."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def log_sigmoid(x):
    """``log(sigmoid(x))`` in the stable form ``-log1p(exp(-|x|)) + min(x, 0)``."""
    x = np.asarray(x, dtype=np.float64)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


# -- seeded streams ---------------------------------------------------------


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Generator keyed by ``(seed, label)``.

    The label is hashed into the seed sequence's spawn key, so distinct labels
    give statistically independent streams and equal pairs replay bitwise.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    key = tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.Generator(np.random.PCG64(seq))


# -- optimizers -------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: Literal["sgd", "adam"]
    learning_rate: float
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ContractError("learning rate must be positive")


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState) -> np.ndarray:
    """Return updated parameters; ``state`` is advanced in place."""
    params = np.asarray(params)
    grads = np.asarray(grads)
    if params.shape != grads.shape:
        raise ContractError(f"param shape {params.shape} != grad shape {grads.shape}")
    if state.kind == "sgd":
        state.step += 1
        return params - state.learning_rate * grads

    if state.m is None:
        state.m = np.zeros_like(params, dtype=np.float64)
        state.v = np.zeros_like(params, dtype=np.float64)
    elif state.m.shape != params.shape:
        raise ContractError(f"adam moments {state.m.shape} do not match params {params.shape}")
    state.step += 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads * grads
    m_hat = state.m / (1.0 - ADAM_BETA1 ** state.step)
    v_hat = state.v / (1.0 - ADAM_BETA2 ** state.step)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class ParamOptimizer:
    """One :class:`OptimizerState` per named tensor."""

    kind: Literal["sgd", "adam"]
    learning_rate: float
    states: dict[str, OptimizerState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name in sorted(grads):
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = OptimizerState(self.kind, self.learning_rate)
            params[name] = optimizer_step(params[name], grads[name], st)

    def grow(self, name: str, rows: int) -> None:
        """Pad the moment accumulators of ``name`` with zero rows."""
        st = self.states.get(name)
        if st is None or st.m is None or st.m.shape[0] >= rows:
            return
        pad = ((0, rows - st.m.shape[0]),) + ((0, 0),) * (st.m.ndim - 1)
        st.m = np.pad(st.m, pad)
        st.v = np.pad(st.v, pad)


# -- gradient checking ------------------------------------------------------


class NonFiniteEvaluation(FloatingPointError):
    def __init__(self, index):
        super().__init__(f"objective is not finite when perturbing coordinate {index}")
        self.index = index


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple
    tol: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare ``analytic_grad`` with central differences of ``f`` at ``params``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ContractError(f"step h={h} outside [1e-6, 1e-3]")
    x = np.array(params, dtype=np.float64, copy=True)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != x.shape:
        raise ContractError("analytic gradient shape does not match params")
    worst, worst_idx = 0.0, ()
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteEvaluation(idx)
        num = (fp - fm) / (2.0 * h)
        a = analytic_grad[idx]
        rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
        if rel > worst or not worst_idx:
            worst, worst_idx = rel, idx
    return GradCheckReport(float(worst), worst_idx, tol, x.size)
