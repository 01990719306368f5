"""Feature-based reweighting: a hypergradient-free weight update.

For every mini-batch the per-sample direction is built from a Gram block
between batch features and clean-subset features:

1. center both feature sets on the clean-subset mean (computed once per epoch);
2. for each row, compute the mean similarity to every clean class and
   subtract the second largest of those means ("row shift"), so every
   class other than the dominant one has a nonpositive mean;
3. scale each entry by ``+lam_pos`` when the batch sample's observed label
   agrees with the clean example's label and by ``-lam_neg`` otherwise;
4. sum the row.

A positive row sum means the sample's label agrees with the class its
features resemble, so the weight moves up: ``w <- clip(w + alpha * d, 0, 1)``.
The classifier step then uses the batch weights from before this update.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .data import ExampleSet
from .errors import ConfigError, DivergenceError, NumericError
from .net import NetConfig, NetParams, Pass, init_network, jacobian
from .trace import RunTrace

log = logging.getLogger(__name__)

FEATURE_MAPS = ("penultimate", "tangent")
LOSSES = ("ce", "squared")


@dataclass(frozen=True)
class FbrConfig:
    """Hyperparameters of the reweighting loop.

    ``lam_neg=None`` means the default ``1 / (C - 1)``.  ``lam_neg_decay`` is a
    per-epoch multiplicative factor on ``lam_neg`` (1.0 disables annealing).
    """

    alpha: float = 1e-3
    lam_pos: float = 1.0
    lam_neg: float | None = None
    feature_map: str = "penultimate"
    batch_size: int = 100
    epochs: int = 20
    eta: float = 0.1
    loss: str = "ce"
    lam_neg_decay: float = 1.0
    seed: int = 0
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.lam_pos < 0 or (self.lam_neg is not None and self.lam_neg < 0):
            raise ConfigError("lam_pos and lam_neg must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.feature_map not in FEATURE_MAPS:
            raise ConfigError(f"unknown feature map {self.feature_map!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not 0 < self.lam_neg_decay <= 1:
            raise ConfigError("lam_neg_decay must lie in (0, 1]")

    def lam_neg_for(self, n_classes: int, epoch: int = 0) -> float:
        base = 1.0 / (n_classes - 1) if self.lam_neg is None else self.lam_neg
        return base * self.lam_neg_decay ** epoch


@dataclass(frozen=True)
class RowShiftRecord:
    """Intermediate quantities for one Gram row."""

    class_means: np.ndarray
    top1: int
    top2: int
    shifted: np.ndarray
    masked: np.ndarray | None = None
    direction: float | None = None


def clean_mean(clean_features) -> np.ndarray:
    F = np.asarray(clean_features, dtype=np.float64)
    if F.ndim != 2 or len(F) == 0:
        raise ConfigError("clean feature set is empty")
    return F.mean(axis=0)


def centered_gram_batch(batch_features, clean_features, mu) -> np.ndarray:
    """``<phi_i - mu, phi_j - mu>`` for batch rows and clean columns."""
    B = np.asarray(batch_features, dtype=np.float64)
    V = np.asarray(clean_features, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if B.shape[1] != V.shape[1] or mu.shape != (V.shape[1],):
        raise ConfigError(
            f"feature dimensions differ: batch {B.shape[1]}, clean {V.shape[1]}, mean {mu.shape}"
        )
    return (B - mu) @ (V - mu).T


def _class_index(clean_labels, C):
    clean_labels = np.asarray(clean_labels)
    counts = np.bincount(clean_labels, minlength=C)
    if len(counts) > C or np.any(counts[:C] == 0):
        missing = [c for c in range(C) if c >= len(counts) or counts[c] == 0]
        raise ConfigError(f"class(es) {missing} absent from the clean subset")
    onehot = (clean_labels[:, None] == np.arange(C)[None, :]).astype(np.float64)
    return onehot / counts[None, :C]


def class_means(K, clean_labels, C) -> np.ndarray:
    """Per-row mean similarity to each clean class; shape ``(rows, C)``."""
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    return K @ _class_index(clean_labels, C)


def top_two(s) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the largest and second largest class means (ties: lowest index)."""
    order = np.argsort(-np.atleast_2d(s), axis=1, kind="stable")
    return order[:, 0], order[:, 1]


def row_shift(row, clean_labels, C) -> RowShiftRecord:
    row = np.asarray(row, dtype=np.float64)
    s = class_means(row, clean_labels, C)
    t1, t2 = top_two(s)
    s = s[0]
    t1, t2 = int(t1[0]), int(t2[0])
    return RowShiftRecord(s, t1, t2, row - s[t2])


def label_mask(shifted_row, y_i, clean_labels, lam_pos, lam_neg) -> np.ndarray:
    same = np.asarray(clean_labels) == y_i
    return np.where(same, lam_pos, -lam_neg) * np.asarray(shifted_row, dtype=np.float64)


def fbr_direction(masked_row) -> float:
    return float(np.sum(masked_row))


def process_row(row, y_i, clean_labels, C, lam_pos, lam_neg) -> RowShiftRecord:
    """Row shift, label mask and row sum for a single row."""
    rec = row_shift(row, clean_labels, C)
    masked = label_mask(rec.shifted, y_i, clean_labels, lam_pos, lam_neg)
    return RowShiftRecord(rec.class_means, rec.top1, rec.top2, rec.shifted, masked,
                          fbr_direction(masked))


def batch_directions(K, y_batch, clean_labels, C, lam_pos, lam_neg) -> np.ndarray:
    """Vectorized :func:`process_row` over all rows of a batch Gram."""
    K = np.asarray(K, dtype=np.float64)
    s = class_means(K, clean_labels, C)
    _, t2 = top_two(s)
    shifted = K - s[np.arange(len(K)), t2][:, None]
    same = np.asarray(y_batch)[:, None] == np.asarray(clean_labels)[None, :]
    return (np.where(same, lam_pos, -lam_neg) * shifted).sum(axis=1)


def weight_auc(weights, noise_mask) -> float:
    """Probability that a random clean sample outweighs a random noisy one (ties count 1/2)."""
    weights = np.asarray(weights, dtype=np.float64)
    noise_mask = np.asarray(noise_mask, dtype=bool)
    n_clean, n_noisy = int((~noise_mask).sum()), int(noise_mask.sum())
    if n_clean == 0 or n_noisy == 0:
        return float("nan")
    ranks = stats.rankdata(weights)
    return float((ranks[~noise_mask].sum() - n_clean * (n_clean + 1) / 2) / (n_clean * n_noisy))


def sign_agreement(directions, noise_mask) -> tuple[float, float, float]:
    """Fractions (overall, clean, noisy) with positive direction on clean and negative on noisy."""
    d = np.asarray(directions, dtype=np.float64)
    noise_mask = np.asarray(noise_mask, dtype=bool)
    ok = np.where(noise_mask, d < 0, d > 0)
    clean = float(ok[~noise_mask].mean()) if (~noise_mask).any() else float("nan")
    noisy = float(ok[noise_mask].mean()) if noise_mask.any() else float("nan")
    return float(ok.mean()), clean, noisy


# --- feature maps and the classifier head -------------------------------------

def feature_matrix(params: NetParams, X, feature_map: str) -> np.ndarray:
    """``(k, dim)`` features: penultimate activations or tangent features.

    Tangent features differentiate the summed output ``1^T f / sqrt(C)``.
    """
    if feature_map == "penultimate":
        return Pass(params, X).penultimate
    if feature_map == "tangent":
        C = params.config.d_out
        return jacobian(params, X, out_dir=np.full(C, 1.0 / np.sqrt(C))).values.T
    raise ConfigError(f"unknown feature map {feature_map!r}")


def _output_grad(logits, labels, loss):
    """``d loss_i / d logits_i`` and the per-sample loss."""
    C = logits.shape[1]
    onehot = np.eye(C)[labels]
    if loss == "ce":
        logp = special.log_softmax(logits, axis=1)
        return np.exp(logp) - onehot, -logp[np.arange(len(labels)), labels]
    diff = logits - onehot
    return diff, 0.5 * (diff ** 2).sum(axis=1)


def predict(params: NetParams, X) -> np.ndarray:
    return np.argmax(Pass(params, X).raw, axis=1)


def accuracy(params: NetParams, data: ExampleSet, observed=False) -> float:
    labels = data.y_observed if observed else data.y_clean
    return float(np.mean(predict(params, data.X) == labels))


@dataclass
class FbrResult:
    params: NetParams
    trace: RunTrace
    diverged: DivergenceError | None = None


def fbr_train(config: FbrConfig, train: ExampleSet, clean: ExampleSet, net_cfg: NetConfig,
              params: NetParams | None = None, raise_on_divergence=True) -> FbrResult:
    """Mini-batch training with feature-based reweighting.

    Trace row ``t`` holds the state at the start of epoch ``t`` (row
    ``epochs`` is the final state).  ``residual`` is the observed-class
    component of the output-layer loss gradient; ``directions[t]`` holds the
    direction each sample received during epoch ``t``.
    """
    C = train.n_classes
    if net_cfg.d_out != C:
        raise ConfigError(f"network has {net_cfg.d_out} outputs, data has {C} classes")
    if clean.n_classes != C:
        raise ConfigError("train and clean splits disagree on the number of classes")
    counts = clean.class_counts()
    if np.any(counts == 0):
        raise ConfigError(f"class(es) {np.flatnonzero(counts == 0).tolist()} absent from the clean subset")
    if np.any(counts != counts[0]):
        raise ConfigError(f"clean subset is not balanced: {counts.tolist()}")
    if params is None:
        params = init_network(net_cfg)
    rng = np.random.default_rng(config.seed)
    T, n, m = config.epochs, train.n, clean.n
    X, y = train.X, train.y_observed
    Xv, yv = clean.X, clean.y_observed

    W = np.empty((T + 1, n))
    U = np.empty((T + 1, n))
    UV = np.empty((T + 1, m))
    D = np.full((T + 1, n), np.nan)
    extra = {k: np.full(T + 1, np.nan) for k in
             ("mean_clean_weight", "mean_noisy_weight", "weight_auc", "train_loss", "lam_neg")}
    noise = train.noise_mask
    w = np.full(n, 0.5)
    loss0 = None
    diverged = None
    last = T

    for t in range(T + 1):
        grad_tr, loss_tr = _output_grad(Pass(params, X).raw, y, config.loss)
        grad_v, _ = _output_grad(Pass(params, Xv).raw, yv, config.loss)
        W[t] = w
        U[t] = grad_tr[np.arange(n), y]
        UV[t] = grad_v[np.arange(m), yv]
        lam_neg = config.lam_neg_for(C, t)
        extra["mean_clean_weight"][t] = w[~noise].mean() if (~noise).any() else np.nan
        extra["mean_noisy_weight"][t] = w[noise].mean() if noise.any() else np.nan
        extra["weight_auc"][t] = weight_auc(w, noise)
        extra["train_loss"][t] = loss_tr.mean()
        extra["lam_neg"][t] = lam_neg
        worst = float(np.max(loss_tr))
        if loss0 is None:
            loss0 = worst
        elif not np.isfinite(worst) or worst > config.divergence_factor * loss0:
            diverged = DivergenceError(
                f"divergence guard: max loss {worst:.3g} at epoch {t} exceeds "
                f"{config.divergence_factor} x initial {loss0:.3g}",
                epoch=t, residual_inf=worst,
            )
            last = t
            break
        if t == T:
            break

        Fv = feature_matrix(params, Xv, config.feature_map)
        mu = clean_mean(Fv)
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            Fb = feature_matrix(params, X[idx], config.feature_map)
            K = centered_gram_batch(Fb, Fv, mu)
            d = batch_directions(K, y[idx], yv, C, config.lam_pos, lam_neg)
            D[t, idx] = d
            w_old = w[idx]
            w[idx] = np.clip(w_old + config.alpha * d, 0.0, 1.0)
            # classifier step on (1/|B|) sum_i w_i^t loss_i
            fp = Pass(params, X[idx])
            g_out, _ = _output_grad(fp.raw, y[idx], config.loss)
            grad = fp.vjp(g_out * (w_old / len(idx))[:, None])
            if not grad.is_finite():
                raise NumericError(f"non-finite classifier gradient at epoch {t}")
            params = params.axpy(-config.eta, grad)

    sl = slice(0, last + 1)
    trace = RunTrace(
        epochs=np.arange(last + 1), sample_ids=train.ids.copy(), noise_mask=noise.copy(),
        weights=W[sl], residuals=U[sl], e1=np.full(last + 1, np.nan), e2=np.full(last + 1, np.nan),
        val_ids=clean.ids.copy(), val_residuals=UV[sl], directions=D[sl],
        extra={k: v[sl] for k, v in extra.items()},
    )
    if diverged is not None:
        log.warning("%s", diverged)
        if raise_on_divergence:
            raise diverged
    return FbrResult(params, trace, diverged)
