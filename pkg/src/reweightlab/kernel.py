"""Empirical tangent kernels, centering transforms and sign diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .net import NetParams, jacobian

MAX_SPECTRAL_N = 2000
_ROW_CHUNK = 256


@dataclass(frozen=True)
class GramMatrix:
    """Kernel block between row examples and column (clean-subset) examples.

    ``col_gram`` holds the uncentered column-by-column block when it is known;
    mean-centering against the column mean needs it.
    """

    values: np.ndarray
    row_ids: np.ndarray
    col_ids: np.ndarray
    centering: str = "none"
    shift: float = 0.0
    snapshot: str = ""
    col_gram: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def is_square(self) -> bool:
        return np.array_equal(self.row_ids, self.col_ids)


@dataclass(frozen=True)
class KernelStats:
    lam_min: float | None
    lam_max: float | None
    gamma: float
    mu_hat: float | None
    sign_agreement: float | None
    hist_edges: np.ndarray
    hist_within: np.ndarray
    hist_cross: np.ndarray


def _jac_cols(params, X, out_dir):
    return jacobian(params, X, out_dir=out_dir).values


def ntk_gram(params: NetParams, X_rows, X_cols, row_ids=None, col_ids=None, out_dir=None,
             same=False) -> GramMatrix:
    """``J(X_rows)^T J(X_cols)`` at ``params``; pass ``same=True`` when rows == cols."""
    X_rows = np.asarray(X_rows, dtype=np.float64)
    X_cols = np.asarray(X_cols, dtype=np.float64)
    Jc = _jac_cols(params, X_cols, out_dir)
    col_gram = Jc.T @ Jc
    if same:
        values = col_gram.copy()
    else:
        blocks = [
            _jac_cols(params, X_rows[s:s + _ROW_CHUNK], out_dir).T @ Jc
            for s in range(0, len(X_rows), _ROW_CHUNK)
        ]
        values = np.vstack(blocks)
    if row_ids is None:
        row_ids = np.arange(len(X_rows))
    if col_ids is None:
        col_ids = row_ids if same else np.arange(len(X_cols))
    return GramMatrix(values, np.asarray(row_ids), np.asarray(col_ids), "none", 0.0,
                      params.snapshot_id(), col_gram)


def feature_gram(F_rows, F_cols, row_ids=None, col_ids=None, snapshot="") -> GramMatrix:
    """Linear-kernel Gram of explicit feature vectors (uncentered)."""
    F_rows = np.asarray(F_rows, dtype=np.float64)
    F_cols = np.asarray(F_cols, dtype=np.float64)
    if F_rows.shape[1] != F_cols.shape[1]:
        raise ConfigError("feature dimensions differ")
    if row_ids is None:
        row_ids = np.arange(len(F_rows))
    if col_ids is None:
        col_ids = np.arange(len(F_cols))
    return GramMatrix(F_rows @ F_cols.T, np.asarray(row_ids), np.asarray(col_ids), "none", 0.0,
                      snapshot, F_cols @ F_cols.T)


def mean_center_values(K_rc, K_cc) -> np.ndarray:
    """<g_i - mu, g_j - mu> from raw blocks, with mu the column-feature mean."""
    return (K_rc - K_rc.mean(axis=1, keepdims=True)
            - K_cc.mean(axis=0, keepdims=True) + K_cc.mean())


def estimate_shift(values, labels_rows, labels_cols) -> float:
    """Midpoint of the within-class and cross-class entry means."""
    same = np.asarray(labels_rows)[:, None] == np.asarray(labels_cols)[None, :]
    if same.all() or not same.any():
        raise ConfigError("shift estimate needs both within- and cross-class pairs")
    return 0.5 * (values[same].mean() + values[~same].mean())


def center_gram(g: GramMatrix, mode: str, mu=None, labels_rows=None,
                labels_cols=None) -> GramMatrix:
    """Apply ``mean_centered`` or ``scalar_shifted`` to an uncentered Gram.

    Mean-centering is idempotent: a centered Gram already has zero row and
    column-feature means, so centering it again changes nothing.
    """
    if len(g.col_ids) == 0:
        raise ConfigError("empty column set")
    if mode == "mean_centered":
        if g.centering not in ("none", "mean_centered"):
            raise ConfigError(f"cannot mean-center a {g.centering} Gram")
        if g.col_gram is None:
            raise ConfigError("mean-centering needs the column-by-column Gram")
        vals = mean_center_values(g.values, g.col_gram)
        cc = mean_center_values(g.col_gram, g.col_gram)
        return replace(g, values=vals, centering="mean_centered", col_gram=cc)
    if mode == "scalar_shifted":
        if g.centering != "none":
            raise ConfigError(f"cannot shift a {g.centering} Gram")
        if mu is None:
            if labels_rows is None or labels_cols is None:
                raise ConfigError("shift estimate needs row and column labels")
            mu = estimate_shift(g.values, labels_rows, labels_cols)
        return replace(g, values=g.values - mu, centering="scalar_shifted", shift=float(mu),
                       col_gram=None if g.col_gram is None else g.col_gram - mu)
    raise ConfigError(f"unknown centering mode {mode!r}")


def sign_pattern(labels_rows, labels_cols) -> np.ndarray:
    """Boolean matrix, true where the pair shares a class."""
    return np.asarray(labels_rows)[:, None] == np.asarray(labels_cols)[None, :]


def sign_agreement(values, labels_rows, labels_cols) -> float:
    """Fraction of pairs whose sign matches same-class positive / cross-class negative."""
    same = sign_pattern(labels_rows, labels_cols)
    ok = np.where(same, values > 0, values < 0)
    return float(ok.mean())


def sign_margin(values, labels_rows, labels_cols) -> float:
    """Smallest |entry| if every pair is correctly signed, else 0."""
    same = sign_pattern(labels_rows, labels_cols)
    ok = np.where(same, values > 0, values < 0)
    if not ok.all():
        return 0.0
    return float(np.abs(values).min())


def pair_histogram(values, labels_rows, labels_cols, bins=40, edges=None):
    """Histogram counts of within-class and cross-class entries on shared bins."""
    same = sign_pattern(labels_rows, labels_cols)
    if edges is None:
        lo, hi = float(values.min()), float(values.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, bins + 1)
    within, _ = np.histogram(values[same], bins=edges)
    cross, _ = np.histogram(values[~same], bins=edges)
    return edges, within, cross


def kernel_stats(g: GramMatrix, labels_rows, labels_cols, bins=40) -> KernelStats:
    labels_rows = np.asarray(labels_rows)
    labels_cols = np.asarray(labels_cols)
    if g.values.shape != (len(labels_rows), len(labels_cols)):
        raise ConfigError("label lengths do not match the Gram shape")
    lam_min = lam_max = None
    if g.values.shape[0] == g.values.shape[1] and g.is_square:
        if g.values.shape[0] > MAX_SPECTRAL_N:
            raise ConfigError(
                f"spectral stats limited to n <= {MAX_SPECTRAL_N}, got {g.values.shape[0]}"
            )
        sym = 0.5 * (g.values + g.values.T)
        eig = np.linalg.eigvalsh(sym)
        lam_min, lam_max = float(eig[0]), float(eig[-1])
    same = sign_pattern(labels_rows, labels_cols)
    mu_hat = None
    if same.any() and not same.all():
        mu_hat = estimate_shift(g.values, labels_rows, labels_cols)
    edges, within, cross = pair_histogram(g.values, labels_rows, labels_cols, bins)
    return KernelStats(
        lam_min, lam_max,
        sign_margin(g.values, labels_rows, labels_cols),
        mu_hat,
        sign_agreement(g.values, labels_rows, labels_cols),
        edges, within, cross,
    )


def histogram_rows(stats: KernelStats):
    rows = []
    for kind, counts in (("within", stats.hist_within), ("cross", stats.hist_cross)):
        for k, c in enumerate(counts):
            rows.append((repr(float(stats.hist_edges[k])), repr(float(stats.hist_edges[k + 1])),
                         int(c), kind))
    return rows


def write_histogram_csv(stats: KernelStats, path) -> None:
    """Columns: bin_lo, bin_hi, count, pair_type (within | cross)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "pair_type"])
        w.writerows(histogram_rows(stats))
