"""Phase detection, kernel scaling experiments and figure-data export.

Everything here consumes traces or builds its own small experiments; none of
it feeds back into training.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .kernel import GramMatrix, center_gram, pair_histogram
from .net import NetConfig, Pass, init_network, jacobian, weighted_sgd_step
from .trace import RunTrace, fmt

FIGURE_KINDS = ("weight_dynamics", "mean_residual", "ntk_hist", "centered_ntk_hist",
                "weight_distribution", "weight_directions")
TRACE_KINDS = ("weight_dynamics", "mean_residual", "weight_distribution", "weight_directions")
GRAM_KINDS = ("ntk_hist", "centered_ntk_hist")


# --- phase detection ---------------------------------------------------------------

@dataclass
class PhaseReport:
    """Detected phase boundaries of a reweighting run.

    ``T2_emp`` is an operational definition (residual threshold
    ``kappa * (eta + width^-1/4)`` or first noisy weight leaving 0); the
    theory gives no closed form for it.
    """

    T1_pred: float
    T1_emp: int | None
    T2_emp: int | None
    early_bands: bool
    filtering: bool
    monotone: bool
    post_filter_onset: int | None
    final_val_inf: float
    threshold: float
    kappa: float
    sign_flips: int
    max_mean_residual_ratio: float
    inputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["T2_definition"] = "operational: first epoch after T1 with |u_v|_inf <= threshold or a noisy weight > 1e-6"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def predicted_t1(m, beta, gamma) -> float:
    """``1 + 1 / (m * beta * gamma)``; infinite when the margin is 0."""
    if m <= 0 or beta <= 0:
        raise ConfigError("m and beta must be positive")
    return float("inf") if gamma <= 0 else 1.0 + 1.0 / (m * beta * gamma)


def detect_phases(trace: RunTrace, m, beta, gamma, width, eta, kappa=3.0,
                  polar_tol=1e-9, band_tol=1e-6, filter_tol=1e-6, mono_tol=1e-6,
                  onset_tol=1e-3) -> PhaseReport:
    """Locate the polarization epoch ``T1`` and end of filtering ``T2`` in a trace.

    Epoch indices are row indices of the trace (row 0 is the initial state).
    The filtering and monotonicity flags are evaluated on ``(T1, T2]``, or on
    ``(T1, last epoch]`` when ``T2`` is never reached; both are vacuously true
    when ``T1`` is never reached.
    """
    if trace.val_residuals is None:
        raise ConfigError("trace has no clean-subset residuals (val_residuals)")
    if trace.weights is None or trace.noise_mask is None:
        raise ConfigError("trace has no weights or noise mask")
    W = trace.weights
    noisy = np.asarray(trace.noise_mask, dtype=bool)
    clean = ~noisy
    E = W.shape[0]
    val_inf = trace.val_inf
    thr = kappa * (eta + width ** -0.25)

    def clean_min(t):
        return W[t, clean].min() if clean.any() else 1.0

    def noisy_max(t):
        return W[t, noisy].max() if noisy.any() else 0.0

    T1 = next((t for t in range(E) if clean_min(t) >= 1 - polar_tol and noisy_max(t) <= polar_tol), None)
    upto = T1 if T1 is not None else E - 1
    early = all(clean_min(t) >= 0.5 - band_tol and noisy_max(t) <= 0.5 + band_tol
                for t in range(upto + 1))

    T2 = None
    if T1 is not None:
        T2 = next((t for t in range(T1 + 1, E)
                   if val_inf[t] <= thr or noisy_max(t) > filter_tol), None)
    filtering = monotone = True
    if T1 is not None:
        end = T2 if T2 is not None else E - 1
        window = range(T1 + 1, end + 1)
        filtering = all(noisy_max(t) <= filter_tol for t in window)
        monotone = all(val_inf[t] <= val_inf[t - 1] + mono_tol for t in window)

    onset = None
    if T2 is not None:
        onset = next((t for t in range(T2 + 1, E) if noisy_max(t) > onset_tol), None)

    uv = trace.val_residuals
    flips = 0
    for j in range(uv.shape[1]):
        below = np.flatnonzero(np.abs(uv[:, j]) <= thr)
        if len(below):
            s = np.sign(uv[below[0]:, j])
            s = s[s != 0]
            flips += int(np.count_nonzero(s[1:] != s[:-1]))
    ratio = np.abs(uv.mean(axis=1)) / width ** -0.25

    return PhaseReport(
        T1_pred=predicted_t1(m, beta, gamma), T1_emp=T1, T2_emp=T2,
        early_bands=bool(early), filtering=bool(filtering), monotone=bool(monotone),
        post_filter_onset=onset, final_val_inf=float(val_inf[-1]), threshold=float(thr),
        kappa=float(kappa), sign_flips=flips, max_mean_residual_ratio=float(ratio.max()),
        inputs={"m": int(m), "beta": float(beta), "gamma_hat": float(gamma), "width": int(width),
                "eta": float(eta)},
    )


# --- kernel scaling Monte Carlo -------------------------------------------------------

PROP1_KERNELS = ("features", "ntk", "constant")


@dataclass
class Prop1Result:
    m_grid: np.ndarray
    median_c0: np.ndarray
    median_S: np.ndarray
    median_ratio: np.ndarray
    slope_S: float
    slope_ratio: float
    replicates: int
    kernel: str

    def rows(self):
        return [(int(m), float(c), float(s), float(r)) for m, c, s, r in
                zip(self.m_grid, self.median_c0, self.median_S, self.median_ratio)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "median_abs_c0", "median_abs_S", "median_ratio"])
        for row in self.rows():
            w.writerow([row[0]] + [fmt(v) for v in row[1:]])
        return buf.getvalue()


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x`` (at least 3 points)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 3:
        raise ConfigError("slope fit needs at least 3 grid points")
    if np.any(x <= 0) or np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _prop1_features(rng, m, kernel, feature_dim, width, d_in):
    """Features of ``m`` clean points plus one held-out point (last row)."""
    if kernel == "features":
        return rng.standard_normal((m + 1, feature_dim))
    if kernel == "constant":
        return np.ones((m + 1, 1))
    X = rng.standard_normal((m + 1, d_in))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    params = init_network(NetConfig.uniform(d_in, width, 1, seed=int(rng.integers(2 ** 63))))
    return jacobian(params, X).values.T


def prop1_draw(F, uv):
    """``(c0, S)`` for clean features ``F[:-1]``, held-out ``F[-1]`` and residual ``uv``."""
    Fc, fi = F[:-1], F[-1]
    v = Fc.T @ uv
    c0 = -float((Fc @ v).sum()) / len(uv)
    return c0, float(fi @ v)


def prop1_monte_carlo(m_grid=(64, 256, 1024), replicates=200, kernel="features",
                      feature_dim=16, width=256, d_in=8, seed=0) -> Prop1Result:
    """Medians of ``|c0|``, ``|S_i|`` and their ratio over random balanced draws.

    Each draw samples clean features and a held-out point, assigns balanced
    random +/-1 labels, and uses the initialization residual ``u_v = -y``.
    ``kernel`` selects i.i.d. Gaussian features, tangent features of a fresh
    network on unit-sphere inputs, or a constant kernel.
    """
    m_grid = np.asarray(m_grid, dtype=np.int64)
    if np.any(np.diff(m_grid) <= 0):
        raise ConfigError("m grid must be strictly increasing")
    if np.any(m_grid % 2) or np.any(m_grid < 2):
        raise ConfigError("every m must be even (balanced labels)")
    if kernel not in PROP1_KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}")
    if replicates < 1:
        raise ConfigError("replicates must be >= 1")
    children = np.random.SeedSequence(seed).spawn(len(m_grid))
    med_c0, med_S, med_ratio = [], [], []
    for m, ss in zip(m_grid, children):
        rng = np.random.default_rng(ss)
        c0s, Ss = np.empty(replicates), np.empty(replicates)
        for r in range(replicates):
            F = _prop1_features(rng, int(m), kernel, feature_dim, width, d_in)
            uv = -rng.permutation(np.repeat([-1.0, 1.0], m // 2))
            c0s[r], Ss[r] = prop1_draw(F, uv)
        c0s, Ss = np.abs(c0s), np.abs(Ss)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(Ss > 0, c0s / Ss, 0.0)
        med_c0.append(np.median(c0s))
        med_S.append(np.median(Ss))
        med_ratio.append(np.median(ratio))
    med_c0, med_S, med_ratio = map(np.array, (med_c0, med_S, med_ratio))
    slope_S = loglog_slope(m_grid, med_S) if len(m_grid) >= 3 else float("nan")
    slope_r = loglog_slope(m_grid, med_ratio) if len(m_grid) >= 3 else float("nan")
    return Prop1Result(m_grid, med_c0, med_S, med_ratio, slope_S, slope_r, replicates, kernel)


# --- linearization gap ---------------------------------------------------------------------

@dataclass
class LinGapResult:
    widths: np.ndarray
    seeds: np.ndarray
    gaps: np.ndarray  # (len(widths), len(seeds))
    eta: float
    steps: int

    @property
    def median(self) -> np.ndarray:
        return np.median(self.gaps, axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["width", "median_gap"] + [f"gap_seed{int(s)}" for s in self.seeds])
        for k, width in enumerate(self.widths):
            w.writerow([int(width), fmt(self.median[k])] + [fmt(g) for g in self.gaps[k]])
        return buf.getvalue()


def linearization_gap_single(net_cfg: NetConfig, X, y, X_probe, eta, steps, weights=None) -> float:
    """``max |f_lin - f|`` over probe points after ``steps`` weighted GD steps.

    Both models start from the same initialization; the linearized model
    ``f0(x) + <theta - theta0, grad f0(x)>`` takes the same steps with the
    same weights.  ``weights`` is a length-n vector or a ``(steps, n)`` array.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(X)
    W = np.ones((steps, n)) if weights is None else np.broadcast_to(
        np.asarray(weights, dtype=np.float64), (steps, n))
    p0 = init_network(net_cfg)
    f0 = Pass(p0, X)
    params, delta = p0, p0.zeros_like()
    for s in range(steps):
        params = weighted_sgd_step(params, X, y, W[s], eta)
        u_lin = f0.out + f0.jvp(delta) - y
        delta = delta.axpy(-eta, f0.vjp(W[s] * u_lin))
    fp = Pass(p0, X_probe)
    f_lin = fp.out + fp.jvp(delta)
    return float(np.max(np.abs(Pass(params, X_probe).out - f_lin)))


def linearization_gap(widths, X, y, X_probe, eta, steps, seeds=(0, 1, 2, 3, 4), depth=1,
                      activation="tanh", weights=None) -> LinGapResult:
    """Gap table over a width grid; network seeds come from ``seeds``."""
    X = np.asarray(X, dtype=np.float64)
    gaps = np.empty((len(widths), len(seeds)))
    for a, width in enumerate(widths):
        for b, s in enumerate(seeds):
            cfg = NetConfig.uniform(X.shape[1], int(width), depth, activation=activation, seed=int(s))
            gaps[a, b] = linearization_gap_single(cfg, X, y, X_probe, eta, steps, weights)
    return LinGapResult(np.asarray(widths), np.asarray(seeds), gaps, float(eta), int(steps))


# --- figure data -----------------------------------------------------------------------

def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])
    return buf.getvalue()


def figure_csv(source, kind, labels_rows=None, labels_cols=None, epoch=None, bins=40) -> str:
    """CSV text for one figure panel.

    Trace kinds take a :class:`RunTrace`; histogram kinds take a
    :class:`GramMatrix` plus clean class labels for rows and columns.
    ``epoch`` selects the snapshot for ``weight_distribution`` (default
    last) and ``weight_directions`` (default middle of the run).
    """
    if kind not in FIGURE_KINDS:
        raise ConfigError(f"unknown figure kind {kind!r}; expected one of {', '.join(FIGURE_KINDS)}")
    if kind in TRACE_KINDS and not isinstance(source, RunTrace):
        raise ConfigError(f"figure kind {kind!r} needs a run trace")
    if kind in GRAM_KINDS and not isinstance(source, GramMatrix):
        raise ConfigError(f"figure kind {kind!r} needs a Gram matrix")

    if kind == "weight_dynamics":
        tr = source
        return _csv_text(["epoch", "sample_id", "weight", "is_noisy"], (
            (tr.epochs[k], tr.sample_ids[i], tr.weights[k, i], tr.noise_mask[i])
            for k in range(len(tr.epochs)) for i in range(tr.n)))
    if kind == "mean_residual":
        tr = source
        if tr.val_residuals is None:
            raise ConfigError("mean_residual needs clean-subset residuals")
        mean, inf = tr.val_mean, tr.val_inf
        return _csv_text(["epoch", "val_residual_mean", "abs_val_residual_mean", "val_residual_inf_norm"], (
            (tr.epochs[k], mean[k], abs(mean[k]), inf[k]) for k in range(len(tr.epochs))))
    if kind == "weight_distribution":
        tr = source
        k = len(tr.epochs) - 1 if epoch is None else _epoch_row(tr, epoch)
        edges = np.linspace(0.0, 1.0, bins + 1)
        rows = []
        for group, mask in (("clean", ~tr.noise_mask), ("noisy", tr.noise_mask)):
            counts, _ = np.histogram(tr.weights[k, mask], bins=edges)
            rows += [(edges[b], edges[b + 1], int(counts[b]), group) for b in range(bins)]
        return _csv_text(["bin_lo", "bin_hi", "count", "group"], rows)
    if kind == "weight_directions":
        tr = source
        if tr.directions is None:
            raise ConfigError("weight_directions needs per-sample directions")
        if epoch is None:
            valid = [k for k in range(len(tr.epochs)) if not np.isnan(tr.directions[k]).all()]
            if not valid:
                raise ConfigError("trace has no recorded directions")
            k = valid[len(valid) // 2]
        else:
            k = _epoch_row(tr, epoch)
        return _csv_text(["epoch", "sample_id", "neg_weight_derivative", "is_noisy"], (
            (tr.epochs[k], tr.sample_ids[i], tr.directions[k, i], tr.noise_mask[i])
            for i in range(tr.n) if not np.isnan(tr.directions[k, i])))

    g = source
    if labels_rows is None or labels_cols is None:
        raise ConfigError(f"{kind} needs row and column labels")
    if kind == "centered_ntk_hist" and g.centering != "mean_centered":
        g = center_gram(g, "mean_centered")
    edges, within, cross = pair_histogram(g.values, labels_rows, labels_cols, bins)
    rows = [(edges[b], edges[b + 1], int(within[b]), "within") for b in range(bins)]
    rows += [(edges[b], edges[b + 1], int(cross[b]), "cross") for b in range(bins)]
    return _csv_text(["bin_lo", "bin_hi", "count", "pair_type"], rows)


def _epoch_row(trace, epoch):
    hits = np.flatnonzero(trace.epochs == epoch)
    if not len(hits):
        raise ConfigError(f"epoch {epoch} not in trace")
    return int(hits[0])


def emit_figure_data(source, kind, out_dir, **kwargs) -> Path:
    """Write ``<kind>.csv`` into ``out_dir`` and return its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{kind}.csv"
    path.write_text(figure_csv(source, kind, **kwargs))
    return path
