"""Fully-connected network with NTK parameterization and zero-output init.

Layer ``l`` computes ``h = A @ x / sqrt(d_l) + b`` followed by the activation,
except the output layer which is linear.  Hidden layers start from i.i.d.
standard normal entries; the output layer starts at exactly zero, so every
freshly initialized network predicts 0 everywhere.

All per-example derivatives are computed in closed form by backpropagation
(vector-Jacobian products) and forward-mode tangent propagation
(Jacobian-vector products).  Nothing here depends on an autodiff library.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .errors import ConfigError, NumericError

__all__ = [
    "ACTIVATIONS",
    "NetConfig",
    "NetParams",
    "JacobianBlock",
    "init_network",
    "forward",
    "features",
    "vjp",
    "jvp",
    "jacobian",
    "weighted_sgd_step",
    "Pass",
]


def _softplus(h):
    return np.logaddexp(0.0, h)


def _tanh_prime(h):
    t = np.tanh(h)
    return 1.0 - t * t


def _erf_prime(h):
    return (2.0 / np.sqrt(np.pi)) * np.exp(-h * h)


# name -> (sigma, sigma'); every entry is C^1 with Lipschitz derivative
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, _tanh_prime),
    "softplus": (_softplus, special.expit),
    "erf": (special.erf, _erf_prime),
}


@dataclass(frozen=True)
class NetConfig:
    """Architecture of the network.

    ``widths`` lists ``d_0, ..., d_{L+1}``: input dimension, the ``L`` hidden
    widths and the output dimension.
    """

    widths: tuple[int, ...]
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(d) for d in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ConfigError("need at least input and output widths")
        if any(d < 1 for d in widths):
            raise ConfigError(f"all widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"activation {self.activation!r} not supported; "
                f"choose one of {sorted(ACTIVATIONS)} (must be smooth)"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in 64 bits")

    @classmethod
    def uniform(cls, d_in, width, depth=1, d_out=1, activation="tanh", seed=0):
        """``depth`` hidden layers of equal ``width``."""
        return cls((d_in,) + (width,) * depth + (d_out,), activation, seed)

    @property
    def depth(self) -> int:
        return len(self.widths) - 2

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def d_out(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum(
            self.widths[l + 1] * self.widths[l] + self.widths[l + 1]
            for l in range(len(self.widths) - 1)
        )


@dataclass(frozen=True)
class NetParams:
    """Layer matrices ``A^0..A^L`` and biases ``b^0..b^L``.

    Treated as immutable: every update returns a new instance.  The flat
    layout is ``[A^0.ravel(), b^0, A^1.ravel(), b^1, ...]``.
    """

    config: NetConfig
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    _digest: list = field(default_factory=list, repr=False, compare=False)

    @property
    def size(self) -> int:
        return self.config.n_params

    def flat(self) -> np.ndarray:
        parts = []
        for A, b in zip(self.weights, self.biases):
            parts.append(A.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, config: NetConfig, vec) -> NetParams:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (config.n_params,):
            raise ConfigError(f"flat vector has shape {vec.shape}, expected ({config.n_params},)")
        weights, biases = [], []
        pos = 0
        ws = config.widths
        for l in range(len(ws) - 1):
            n_a = ws[l + 1] * ws[l]
            weights.append(vec[pos:pos + n_a].reshape(ws[l + 1], ws[l]).copy())
            pos += n_a
            biases.append(vec[pos:pos + ws[l + 1]].copy())
            pos += ws[l + 1]
        return cls(config, tuple(weights), tuple(biases))

    def zeros_like(self) -> NetParams:
        return NetParams(
            self.config,
            tuple(np.zeros_like(A) for A in self.weights),
            tuple(np.zeros_like(b) for b in self.biases),
        )

    def axpy(self, alpha: float, other: NetParams) -> NetParams:
        """Return ``self + alpha * other``."""
        return NetParams(
            self.config,
            tuple(A + alpha * B for A, B in zip(self.weights, other.weights)),
            tuple(a + alpha * b for a, b in zip(self.biases, other.biases)),
        )

    def dot(self, other: NetParams) -> float:
        total = 0.0
        for A, B in zip(self.weights, other.weights):
            total += float(np.vdot(A, B))
        for a, b in zip(self.biases, other.biases):
            total += float(np.dot(a, b))
        return total

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(A)) for A in self.weights) and all(
            np.all(np.isfinite(b)) for b in self.biases
        )

    def snapshot_id(self) -> str:
        """Short content hash identifying this parameter vector."""
        if not self._digest:
            self._digest.append(hashlib.sha256(self.flat().tobytes()).hexdigest()[:16])
        return self._digest[0]


@dataclass(frozen=True)
class JacobianBlock:
    """Per-example parameter gradients stacked as columns (shape ``p x k``)."""

    values: np.ndarray
    example_ids: np.ndarray
    snapshot: str

    @property
    def gram(self) -> np.ndarray:
        return self.values.T @ self.values


def init_network(cfg: NetConfig) -> NetParams:
    """Hidden layers i.i.d. N(0, 1); output layer identically zero."""
    rng = np.random.default_rng(cfg.seed)
    ws = cfg.widths
    weights, biases = [], []
    n_layers = len(ws) - 1
    for l in range(n_layers):
        if l < n_layers - 1:
            weights.append(rng.standard_normal((ws[l + 1], ws[l])))
            biases.append(rng.standard_normal(ws[l + 1]))
        else:
            weights.append(np.zeros((ws[l + 1], ws[l])))
            biases.append(np.zeros(ws[l + 1]))
    return NetParams(cfg, tuple(weights), tuple(biases))


def _as_batch(params: NetParams, X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.config.d_in:
        raise ConfigError(
            f"input has shape {X.shape}, expected (*, {params.config.d_in})"
        )
    return X, single


class Pass:
    """Forward pass over a batch with cached activations.

    ``vjp`` and ``jvp`` reuse the cache, so one forward evaluation serves any
    number of backward and tangent passes at the same parameters.
    """

    def __init__(self, params: NetParams, X):
        self.params = params
        self.X, self.single = _as_batch(params, X)
        sigma, dsigma = ACTIVATIONS[params.config.activation]
        self.xs = [self.X]
        self.dsig = []
        n_layers = len(params.weights)
        x = self.X
        for l, (A, b) in enumerate(zip(params.weights, params.biases)):
            h = x @ A.T / np.sqrt(A.shape[1]) + b
            if l == n_layers - 1:
                self.raw = h
                break
            self.dsig.append(dsigma(h))
            x = sigma(h)
            self.xs.append(x)

    @property
    def k(self) -> int:
        return self.X.shape[0]

    @property
    def out(self) -> np.ndarray:
        return self.raw[:, 0] if self.params.config.d_out == 1 else self.raw

    @property
    def penultimate(self) -> np.ndarray:
        return self.xs[-1]

    def deltas(self, cot) -> list:
        """Deltas ``dF/dh^{l+1}`` for l = 0..L given output cotangents."""
        cot = _cotangent(self.params, cot, self.k)
        n_layers = len(self.params.weights)
        deltas = [None] * n_layers
        delta = cot
        for l in range(n_layers - 1, -1, -1):
            deltas[l] = delta
            if l > 0:
                A = self.params.weights[l]
                delta = (delta @ A) / np.sqrt(A.shape[1]) * self.dsig[l - 1]
        return deltas

    def vjp(self, cot) -> NetParams:
        gw, gb = [], []
        for l, delta in enumerate(self.deltas(cot)):
            x = self.xs[l]
            gw.append(delta.T @ x / np.sqrt(x.shape[1]))
            gb.append(delta.sum(axis=0))
        return NetParams(self.params.config, tuple(gw), tuple(gb))

    def jvp(self, tangent: NetParams) -> np.ndarray:
        p = self.params
        n_layers = len(p.weights)
        dx = None
        for l in range(n_layers):
            A = p.weights[l]
            x = self.xs[l]
            dh = x @ tangent.weights[l].T
            if dx is not None:
                dh += dx @ A.T
            dh = dh / np.sqrt(A.shape[1]) + tangent.biases[l]
            if l == n_layers - 1:
                return dh[:, 0] if p.config.d_out == 1 else dh
            dx = self.dsig[l] * dh
        raise AssertionError("unreachable")


def _cotangent(params: NetParams, cot, k: int) -> np.ndarray:
    cot = np.asarray(cot, dtype=np.float64)
    if cot.ndim == 1:
        cot = cot[:, None]
    if cot.shape != (k, params.config.d_out):
        raise ConfigError(f"cotangent shape {cot.shape} does not match ({k}, {params.config.d_out})")
    return cot


def forward(params: NetParams, X) -> np.ndarray:
    """Network output.

    A single input vector gives a scalar (or a length-C vector for multiclass
    heads); a batch ``(k, d_0)`` gives shape ``(k,)`` or ``(k, C)``.
    """
    fp = Pass(params, X)
    return fp.out[0] if fp.single else fp.out


def features(params: NetParams, X) -> np.ndarray:
    """Penultimate-layer activations ``x^L`` (the input itself when L = 0)."""
    return Pass(params, X).penultimate


def vjp(params: NetParams, X, cot) -> NetParams:
    """``sum_b cot_b . d f(x_b) / d theta`` as a parameter-shaped object."""
    return Pass(params, X).vjp(cot)


def jvp(params: NetParams, X, tangent: NetParams) -> np.ndarray:
    """Directional derivative of the outputs along ``tangent``.

    Shape ``(k,)`` for scalar heads, ``(k, C)`` otherwise.
    """
    return Pass(params, X).jvp(tangent)


def jacobian(params: NetParams, X, ids=None, out_dir=None) -> JacobianBlock:
    """Per-example gradients ``grad_theta f(x_j)`` as columns of a ``p x k`` matrix.

    For multiclass heads the scalar being differentiated is ``out_dir . f``;
    ``out_dir`` defaults to the single output for scalar networks.
    """
    Xb, _ = _as_batch(params, X)
    k = Xb.shape[0]
    if k == 0:
        raise ConfigError("jacobian needs a non-empty batch")
    d_out = params.config.d_out
    if out_dir is None:
        if d_out != 1:
            raise ConfigError("out_dir is required for multi-output networks")
        out_dir = np.ones(1)
    out_dir = np.asarray(out_dir, dtype=np.float64)
    cot = np.broadcast_to(out_dir, (k, d_out)).copy()
    fp = Pass(params, Xb)
    cols = []
    for l, delta in enumerate(fp.deltas(cot)):
        x = fp.xs[l]
        gA = delta[:, :, None] * (x[:, None, :] / np.sqrt(x.shape[1]))
        cols.append(gA.reshape(k, -1))
        cols.append(delta)
    J = np.concatenate(cols, axis=1).T
    if ids is None:
        ids = np.arange(k)
    return JacobianBlock(J, np.asarray(ids), params.snapshot_id())


def weighted_sgd_step(params: NetParams, X, Y, w, eta: float) -> NetParams:
    """One step on ``sum_i w_i * (f(x_i) - y_i)^2 / 2`` (scalar head)."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or np.any(w > 1):
        raise ConfigError("weights must lie in [0, 1]")
    if not np.any(w):
        return params
    fp = Pass(params, X)
    u = fp.out - np.asarray(Y, dtype=np.float64)
    grad = fp.vjp(w * u)
    if not grad.is_finite():
        raise NumericError(
            f"non-finite gradient (max |u| = {np.max(np.abs(u)):.3g}, eta = {eta})"
        )
    return params.axpy(-eta, grad)


def param_norm(params: NetParams) -> float:
    return float(np.sqrt(params.dot(params)))
