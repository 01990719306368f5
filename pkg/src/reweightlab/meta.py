"""Bilevel meta-reweighting with a one-step pseudo update.

Each epoch evaluates the weight gradient of the clean-subset loss

    sum_j 0.5 * (f(theta_hat(w), x_j^v) - y_j^v)^2,
    theta_hat(w) = theta - eta * sum_i w_i grad l_i(theta),

takes a clipped gradient step on ``w`` with ``alpha = beta / eta`` and then
one weighted gradient step on ``theta`` with the new weights.

Three hypergradient backends are available:

``exact``
    full chain rule, with the clean-subset Jacobian and residuals taken at
    the pseudo-updated parameters;
``first_order``
    the same expression evaluated at ``theta`` instead of ``theta_hat``;
``ntk_frozen``
    ``-eta * u * (K0 @ u_v)`` with the tangent kernel cached at initialization.

The gradient never materializes a Jacobian: ``sum_j u_j^v grad f_j^v`` is a
single backward pass and its inner products with every ``grad f_k`` form one
forward-mode pass over the training inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import ExampleSet, to_pm1
from .errors import ConfigError, DivergenceError, NumericError
from .kernel import center_gram, ntk_gram, sign_margin
from .net import NetConfig, NetParams, Pass, forward, init_network, vjp
from .trace import RunTrace

log = logging.getLogger(__name__)

BACKENDS = ("exact", "first_order", "ntk_frozen")


@dataclass(frozen=True)
class MetaConfig:
    eta: float = 1e-3
    beta: float = 0.01
    backend: str = "exact"
    epochs: int = 100
    diagnostics: bool = True
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.eta <= 0 or self.beta <= 0:
            raise ConfigError("eta and beta must be positive")
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown hypergradient backend {self.backend!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @property
    def alpha(self) -> float:
        return self.beta / self.eta


@dataclass(frozen=True)
class HypergradDiagnostics:
    g_exact: np.ndarray
    g_first_order: np.ndarray
    g_ntk: np.ndarray | None

    @property
    def e1_norm(self) -> float:
        return float(np.max(np.abs(self.g_exact - self.g_first_order)))

    @property
    def e2_norm(self) -> float:
        if self.g_ntk is None:
            return float("nan")
        return float(np.max(np.abs(self.g_first_order - self.g_ntk)))


def residuals(params: NetParams, X, y) -> np.ndarray:
    """``f(X) - y`` for a scalar-output network."""
    return forward(params, X) - np.asarray(y, dtype=np.float64)


def pseudo_update(params: NetParams, X, y, w, eta) -> NetParams:
    """``theta - eta * sum_i w_i grad l_i(theta)``; ``params`` is left untouched."""
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w):
        return params
    u = residuals(params, X, y)
    return params.axpy(-eta, vjp(params, X, w * u))


def val_objective(params: NetParams, Xv, yv) -> float:
    uv = residuals(params, Xv, yv)
    return 0.5 * float(uv @ uv)


def hypergrad(params: NetParams, X, y, Xv, yv, w, eta, backend="exact", K0=None,
              diagnostics=False):
    """Gradient of the clean-subset loss w.r.t. the sample weights.

    Returns ``(g, diag)``; ``diag`` is a :class:`HypergradDiagnostics` when
    ``diagnostics`` is set (the NTK entry needs ``K0``), else ``None``.
    """
    if len(Xv) == 0:
        raise ConfigError("clean subset is empty")
    return _hypergrad(Pass(params, X), Pass(params, Xv), np.asarray(y, dtype=np.float64),
                      np.asarray(yv, dtype=np.float64), np.asarray(w, dtype=np.float64),
                      eta, backend, K0, diagnostics)


def _hypergrad(fx: Pass, fv: Pass, y, yv, w, eta, backend, K0, diagnostics):
    if backend not in BACKENDS:
        raise ConfigError(f"unknown hypergradient backend {backend!r}")
    if backend == "ntk_frozen" and K0 is None:
        raise ConfigError("ntk_frozen backend needs the initialization Gram K0")
    u = fx.out - y
    uv = fv.out - yv
    g_exact = g_first = g_ntk = None
    if backend == "exact" or diagnostics:
        theta_hat = fx.params.axpy(-eta, fx.vjp(w * u)) if np.any(w) else fx.params
        fh = Pass(theta_hat, fv.X)
        g_exact = -eta * u * fx.jvp(fh.vjp(fh.out - yv))
    if backend == "first_order" or diagnostics:
        g_first = -eta * u * fx.jvp(fv.vjp(uv))
    if backend == "ntk_frozen" or (diagnostics and K0 is not None):
        g_ntk = -eta * u * (K0 @ uv)

    g = {"exact": g_exact, "first_order": g_first, "ntk_frozen": g_ntk}[backend]
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite hypergradient (max |u| = {np.max(np.abs(u)):.3g})")
    diag = HypergradDiagnostics(g_exact, g_first, g_ntk) if diagnostics else None
    return g, diag


def hypergrad_fd(params: NetParams, X, y, Xv, yv, w, eta, step=1e-4) -> np.ndarray:
    """Central finite differences of ``w -> val_objective(pseudo_update(w))``.

    The objective is close to quadratic in ``w`` (curvature of order eta^2),
    so a fairly large step keeps truncation error negligible while avoiding
    the cancellation that dominates below ~1e-5.
    """
    w = np.asarray(w, dtype=np.float64)
    g = np.empty_like(w)
    for k in range(len(w)):
        wp, wm = w.copy(), w.copy()
        wp[k] += step
        wm[k] -= step
        fp = val_objective(pseudo_update(params, X, y, wp, eta), Xv, yv)
        fm = val_objective(pseudo_update(params, X, y, wm, eta), Xv, yv)
        g[k] = (fp - fm) / (2 * step)
    return g


def relative_error(a, b) -> float:
    """``max|a - b| / max|b|`` (absolute error when ``b`` vanishes)."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.max(np.abs(b))
    err = np.max(np.abs(a - b))
    return float(err / scale) if scale > 0 else float(err)


def weight_step(w, g, alpha) -> np.ndarray:
    """``clip(w - alpha * g, 0, 1)`` elementwise."""
    return np.clip(np.asarray(w, dtype=np.float64) - alpha * np.asarray(g), 0.0, 1.0)


@dataclass
class MetaResult:
    params: NetParams
    trace: RunTrace
    K0: np.ndarray | None
    diverged: DivergenceError | None = None


def init_gram(params: NetParams, train: ExampleSet, clean: ExampleSet) -> np.ndarray:
    return ntk_gram(params, train.X, clean.X, train.ids, clean.ids).values


def measured_margin(params: NetParams, train: ExampleSet, clean: ExampleSet) -> float:
    """Sign margin of the mean-centered initialization kernel, using clean labels."""
    g = center_gram(ntk_gram(params, train.X, clean.X, train.ids, clean.ids), "mean_centered")
    return sign_margin(g.values, train.y_clean, clean.y_clean)


def meta_train(config: MetaConfig, train: ExampleSet, clean: ExampleSet, net_cfg: NetConfig,
               params: NetParams | None = None, raise_on_divergence=True) -> MetaResult:
    """Run the reweighting scheme for ``config.epochs`` epochs.

    Weights start at 1/2.  Epoch order: hypergradient at ``(theta_t, w_t)``,
    clipped weight step, classifier step with ``w_{t+1}``.  The returned trace
    has ``epochs + 1`` rows; row ``t`` is the state before update ``t``.
    """
    if net_cfg.d_out != 1:
        raise ConfigError("meta_train needs a scalar-output network")
    if train.n_classes != 2:
        raise ConfigError("meta_train is the binary (+/-1) squared-loss path")
    X, y = train.X, to_pm1(train.y_observed)
    Xv, yv = clean.X, to_pm1(clean.y_observed)
    if params is None:
        params = init_network(net_cfg)
    K0 = None
    if config.backend == "ntk_frozen" or config.diagnostics:
        K0 = init_gram(params, train, clean)

    T, n, m = config.epochs, train.n, clean.n
    W = np.empty((T + 1, n))
    U = np.empty((T + 1, n))
    UV = np.empty((T + 1, m))
    D = np.full((T + 1, n), np.nan)
    e1 = np.full(T + 1, np.nan)
    e2 = np.full(T + 1, np.nan)
    w = np.full(n, 0.5)
    u0_inf = None
    diverged = None
    last = T
    for t in range(T + 1):
        fx, fv = Pass(params, X), Pass(params, Xv)
        u = fx.out - y
        W[t], U[t], UV[t] = w, u, fv.out - yv
        u_inf = float(np.max(np.abs(u)))
        if u0_inf is None:
            u0_inf = u_inf
        elif not np.isfinite(u_inf) or u_inf > config.divergence_factor * u0_inf:
            diverged = DivergenceError(
                f"divergence guard: |u|_inf = {u_inf:.3g} at epoch {t} "
                f"exceeds {config.divergence_factor} x initial {u0_inf:.3g}",
                epoch=t, residual_inf=u_inf,
            )
            last = t
            break
        g, diag = _hypergrad(fx, fv, y, yv, w, config.eta, config.backend, K0, config.diagnostics)
        D[t] = -g
        if diag is not None:
            e1[t], e2[t] = diag.e1_norm, diag.e2_norm
        if t == T:
            break
        w = weight_step(w, g, config.alpha)
        # same update as net.weighted_sgd_step, reusing the cached pass
        if np.any(w):
            grad = fx.vjp(w * u)
            if not grad.is_finite():
                raise NumericError(f"non-finite classifier gradient at epoch {t}")
            params = params.axpy(-config.eta, grad)

    sl = slice(0, last + 1)
    trace = RunTrace(
        epochs=np.arange(last + 1), sample_ids=train.ids.copy(), noise_mask=train.noise_mask.copy(),
        weights=W[sl], residuals=U[sl], e1=e1[sl], e2=e2[sl],
        val_ids=clean.ids.copy(), val_residuals=UV[sl], directions=D[sl],
    )
    if diverged is not None:
        log.warning("%s", diverged)
        if raise_on_divergence:
            raise diverged
    return MetaResult(params, trace, K0, diverged)
