"""Transfer networks that fuse the previous embedding row with a freshly fitted one.

Every variant maps ``(w_prev, w_hat) -> w_out`` row by row with weights shared
across rows, and exposes hand-written backward passes:

* ``backward_input`` returns d(G . w_out)/d(w_hat); ``w_prev`` is a constant.
* ``backward_params`` returns d(G . w_out)/d(params) with ``w_hat`` constant.

All methods accept a single row (1-d) or a stack of rows (n x d).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numerics import gelu, gelu_grad, gelu_with_cdf, sigmoid

EPSILON = 1e-15
PARAM_ORDER = ("F1", "F2", "Wf", "b1", "Wo", "b2")


def stack(w_prev, w_hat, epsilon: float = EPSILON) -> np.ndarray:
    """Rows ``[w_prev, w_hat, (w_prev * w_hat) / (||w_prev||_2 + eps)]``.

    Works on single vectors (returns 3 x d) or row stacks (returns n x 3 x d).
    """
    w_prev = np.asarray(w_prev, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w_prev.shape != w_hat.shape:
        raise ContractError(f"w_prev {w_prev.shape} and w_hat {w_hat.shape} differ")
    scale = 1.0 / (np.linalg.norm(w_prev, axis=-1, keepdims=True) + epsilon)
    return np.stack([w_prev, w_hat, w_prev * w_hat * scale], axis=-2)


def _rows(w_prev, w_hat, d):
    w_prev = np.asarray(w_prev, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    single = w_prev.ndim == 1
    if single:
        w_prev, w_hat = w_prev[None, :], w_hat[None, :]
    if w_prev.shape != w_hat.shape:
        raise ContractError(f"w_prev {w_prev.shape} and w_hat {w_hat.shape} differ")
    if w_prev.ndim != 2 or w_prev.shape[1] != d:
        raise ContractError(f"rows of width {w_prev.shape[-1]} given to a transfer built for d={d}")
    return w_prev, w_hat, single


def _he(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class TransferCache:
    """Intermediates of one forward call, consumed by the backward passes."""

    owner: int
    single: bool
    w_prev: np.ndarray
    w_hat: np.ndarray
    scale: np.ndarray | None = None  # 1 / (||w_prev|| + eps), per row
    H0: np.ndarray | None = None  # n x 3 x d
    A1: np.ndarray | None = None  # conv pre-activations
    H1: np.ndarray | None = None
    A2: np.ndarray | None = None
    H2: np.ndarray | None = None
    flat: np.ndarray | None = None  # n x (rows * d), row-major flatten
    a3: np.ndarray | None = None  # fc pre-activation
    z: np.ndarray | None = None
    cdf: dict = field(default_factory=dict)  # Phi of each GELU input, keyed by layer
    extra: dict = field(default_factory=dict)


class Transfer:
    kind = "base"

    def __init__(self, d: int, params: dict[str, np.ndarray]):
        self.d = d
        self.params = params

    # subclasses implement _forward/_backward_input/_backward_params on row stacks

    def forward(self, w_prev, w_hat):
        w_prev, w_hat, single = _rows(w_prev, w_hat, self.d)
        out, cache = self._forward(w_prev, w_hat)
        cache.single = single
        return (out[0] if single else out), cache

    def _check(self, cache, upstream):
        if cache.owner != id(self):
            raise ContractError("cache was produced by a different transfer instance")
        g = np.asarray(upstream, dtype=np.float64)
        if cache.single:
            g = g[None, :]
        if g.shape != cache.w_hat.shape:
            raise ContractError(f"upstream gradient {g.shape} does not match output {cache.w_hat.shape}")
        return g

    def backward_input(self, cache, upstream):
        g = self._check(cache, upstream)
        out = self._backward_input(cache, g)
        return out[0] if cache.single else out

    def backward_params(self, cache, upstream) -> dict[str, np.ndarray]:
        g = self._check(cache, upstream)
        return self._backward_params(cache, g)

    def apply(self, W_prev, W_hat) -> np.ndarray:
        W_prev = np.asarray(W_prev, dtype=np.float64)
        W_hat = np.asarray(W_hat, dtype=np.float64)
        if W_prev.shape != W_hat.shape:
            raise ContractError(f"group shapes {W_prev.shape} and {W_hat.shape} differ")
        if W_prev.shape[0] == 0:
            return W_prev.copy()
        out, _ = self.forward(W_prev, W_hat)
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    @property
    def trainable(self) -> bool:
        return bool(self.params)

    def to_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}


class CNNTransfer(Transfer):
    """Stack layer, two vertical-filter conv layers, FC layer, linear output.

    ``use_conv=False`` feeds the flattened stack straight into the FC layer;
    ``use_fc=False`` maps the flattened conv output linearly to the output.
    """

    kind = "cnn"

    def __init__(self, d, params, use_conv=True, use_fc=True, epsilon=EPSILON):
        super().__init__(d, params)
        self.use_conv = use_conv
        self.use_fc = use_fc
        self.epsilon = epsilon
        if use_conv:
            n1 = params["F1"].shape[0]
            if params["F1"].shape != (n1, 3) or params["F2"].shape[1] != n1:
                raise ContractError("conv filter shapes are inconsistent")
        flat_dim = self._flat_rows() * d
        head = params["Wf"] if use_fc else params["Wo"]
        if head.shape[0] != flat_dim:
            raise ContractError(f"first dense layer expects {head.shape[0]} inputs, stack gives {flat_dim}")
        if params["Wo"].shape[1] != d or params["b2"].shape != (d,):
            raise ContractError("output layer does not produce d values")

    def _flat_rows(self):
        return self.params["F2"].shape[0] if self.use_conv else 3

    @property
    def n1(self):
        return self.params["F1"].shape[0] if self.use_conv else 0

    @property
    def n2(self):
        return self.params["F2"].shape[0] if self.use_conv else 0

    @classmethod
    def init(cls, d, n1, n2, df, rng, use_conv=True, use_fc=True):
        params = {}
        rows = 3
        if use_conv:
            params["F1"] = _he(rng, 3, (n1, 3))
            params["F2"] = _he(rng, n1, (n2, n1))
            rows = n2
        if use_fc:
            params["Wf"] = _he(rng, rows * d, (rows * d, df))
            params["b1"] = np.zeros(df)
            params["Wo"] = _he(rng, df, (df, d))
        else:
            params["Wo"] = _he(rng, rows * d, (rows * d, d))
        params["b2"] = np.zeros(d)
        return cls(d, params, use_conv=use_conv, use_fc=use_fc)

    def _forward(self, w_prev, w_hat):
        p = self.params
        n = w_prev.shape[0]
        scale = 1.0 / (np.linalg.norm(w_prev, axis=1, keepdims=True) + self.epsilon)
        H0 = np.stack([w_prev, w_hat, w_prev * w_hat * scale], axis=1)
        c = TransferCache(id(self), False, w_prev, w_hat, scale=scale, H0=H0)
        if self.use_conv:
            c.A1 = p["F1"] @ H0
            c.H1, c.cdf[1] = gelu_with_cdf(c.A1)
            c.A2 = p["F2"] @ c.H1
            c.H2, c.cdf[2] = gelu_with_cdf(c.A2)
            c.flat = c.H2.reshape(n, -1)
        else:
            c.flat = H0.reshape(n, -1)
        if self.use_fc:
            c.a3 = c.flat @ p["Wf"] + p["b1"]
            c.z, c.cdf[3] = gelu_with_cdf(c.a3)
            out = c.z @ p["Wo"] + p["b2"]
        else:
            out = c.flat @ p["Wo"] + p["b2"]
        return out, c

    def _grad_flat(self, c, g, grads=None):
        p = self.params
        if self.use_fc:
            gz = g @ p["Wo"].T
            ga3 = gz * gelu_grad(c.a3, c.cdf[3])
            if grads is not None:
                grads["Wo"] = c.z.T @ g
                grads["Wf"] = c.flat.T @ ga3
                grads["b1"] = ga3.sum(axis=0)
            return ga3 @ p["Wf"].T
        if grads is not None:
            grads["Wo"] = c.flat.T @ g
        return g @ p["Wo"].T

    def _grad_h0(self, c, g, grads=None):
        p = self.params
        n = g.shape[0]
        gflat = self._grad_flat(c, g, grads)
        if not self.use_conv:
            return gflat.reshape(n, 3, self.d)
        gA2 = gflat.reshape(c.H2.shape) * gelu_grad(c.A2, c.cdf[2])
        gH1 = p["F2"].T @ gA2
        gA1 = gH1 * gelu_grad(c.A1, c.cdf[1])
        if grads is not None:
            grads["F2"] = np.einsum("njm,nkm->jk", gA2, c.H1)
            grads["F1"] = np.einsum("njm,nkm->jk", gA1, c.H0)
            return None
        return p["F1"].T @ gA1

    def _backward_input(self, c, g):
        gH0 = self._grad_h0(c, g)
        return gH0[:, 1, :] + gH0[:, 2, :] * c.w_prev * c.scale

    def _backward_params(self, c, g):
        grads = {"b2": g.sum(axis=0)}
        self._grad_h0(c, g, grads)
        return grads

    def to_tensors(self, prefix):
        out = super().to_tensors(prefix)
        out[f"{prefix}.cnn_flags"] = np.array([[float(self.use_conv), float(self.use_fc)]])
        return out


class WeightedSumTransfer(Transfer):
    """``alpha * w_prev + (1 - alpha) * w_hat``.

    A trainable alpha lives in a logit so it stays inside [0, 1]. A fixed
    alpha is used verbatim, which lets alpha be exactly 0 or 1.
    """

    kind = "weighted_sum"

    def __init__(self, d, alpha=0.5, trainable=True, params=None):
        if params is None:
            if trainable:
                a = min(max(alpha, 1e-6), 1 - 1e-6)
                params = {"alpha_logit": np.array([np.log(a / (1 - a))])}
            else:
                params = {}
        super().__init__(d, params)
        self._fixed = None if params else float(alpha)

    @property
    def alpha(self) -> float:
        if self._fixed is not None:
            return self._fixed
        return float(sigmoid(self.params["alpha_logit"][0]))

    def _forward(self, w_prev, w_hat):
        a = self.alpha
        out = a * w_prev + (1.0 - a) * w_hat
        return out, TransferCache(id(self), False, w_prev, w_hat)

    def _backward_input(self, c, g):
        return (1.0 - self.alpha) * g

    def _backward_params(self, c, g):
        if self._fixed is not None:
            return {}
        a = self.alpha
        return {"alpha_logit": np.array([np.sum(g * (c.w_prev - c.w_hat)) * a * (1.0 - a)])}

    def to_tensors(self, prefix):
        if self._fixed is not None:
            return {f"{prefix}.alpha_fixed": np.array([[self._fixed]])}
        return super().to_tensors(prefix)


class MLPTransfer(Transfer):
    """MLP over the concatenation ``[w_prev, w_hat]`` with GELU hidden layers."""

    kind = "mlp"

    @classmethod
    def init(cls, d, hidden, rng):
        sizes = [2 * d, *hidden, d]
        params = {}
        for k in range(len(sizes) - 1):
            params[f"M{k}"] = _he(rng, sizes[k], (sizes[k], sizes[k + 1]))
            params[f"c{k}"] = np.zeros(sizes[k + 1])
        return cls(d, params)

    @property
    def n_layers(self):
        return sum(1 for k in self.params if k.startswith("M"))

    def _forward(self, w_prev, w_hat):
        c = TransferCache(id(self), False, w_prev, w_hat)
        h = np.concatenate([w_prev, w_hat], axis=1)
        acts, pre = [h], []
        L = self.n_layers
        for k in range(L):
            a = h @ self.params[f"M{k}"] + self.params[f"c{k}"]
            pre.append(a)
            h = gelu(a) if k < L - 1 else a
            acts.append(h)
        c.extra = {"acts": acts, "pre": pre}
        return h, c

    def _backprop(self, c, g, grads):
        acts, pre = c.extra["acts"], c.extra["pre"]
        L = self.n_layers
        for k in reversed(range(L)):
            if k < L - 1:
                g = g * gelu_grad(pre[k])
            if grads is not None:
                grads[f"M{k}"] = acts[k].T @ g
                grads[f"c{k}"] = g.sum(axis=0)
            g = g @ self.params[f"M{k}"].T
        return g

    def _backward_input(self, c, g):
        return self._backprop(c, g, None)[:, self.d:]

    def _backward_params(self, c, g):
        grads = {}
        self._backprop(c, g, grads)
        return grads


# -- functional surface -----------------------------------------------------


def forward(theta: Transfer, w_prev, w_hat):
    return theta.forward(w_prev, w_hat)


def backward_input(theta: Transfer, cache: TransferCache, upstream_grad):
    return theta.backward_input(cache, upstream_grad)


def backward_params(theta: Transfer, cache: TransferCache, upstream_grad):
    return theta.backward_params(cache, upstream_grad)


def apply_group(theta: Transfer, W_prev, W_hat) -> np.ndarray:
    return theta.apply(W_prev, W_hat)


def build(variant: str, d: int, rng, n1=10, n2=5, df=512, hidden=(64,), alpha=0.5,
          alpha_trainable=True, use_conv=True, use_fc=True) -> Transfer:
    if variant == "cnn":
        return CNNTransfer.init(d, n1, n2, df, rng, use_conv=use_conv, use_fc=use_fc)
    if variant == "weighted_sum":
        return WeightedSumTransfer(d, alpha=alpha, trainable=alpha_trainable)
    if variant == "mlp":
        return MLPTransfer.init(d, tuple(hidden), rng)
    raise ContractError(f"unknown transfer variant {variant!r}")


def from_tensors(tensors: dict[str, np.ndarray], prefix: str, d: int) -> Transfer:
    """Rebuild a transfer from checkpoint tensors named ``<prefix>.<param>``."""
    pre = prefix + "."
    own = {k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)}
    if "alpha_fixed" in own:
        return WeightedSumTransfer(d, alpha=float(own["alpha_fixed"][0, 0]), trainable=False)
    vec = {"b1", "b2", "alpha_logit"} | {k for k in own if k.startswith("c")}
    params = {k: (v.ravel() if k in vec else v) for k, v in own.items() if k != "cnn_flags"}
    if "alpha_logit" in params:
        return WeightedSumTransfer(d, params=params)
    if "M0" in params:
        return MLPTransfer(d, params)
    if "cnn_flags" in own:
        use_conv, use_fc = (bool(x) for x in own["cnn_flags"].ravel())
        return CNNTransfer(d, params, use_conv=use_conv, use_fc=use_fc)
    raise ContractError(f"no transfer tensors under prefix {prefix!r}")
