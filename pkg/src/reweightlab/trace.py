"""Per-epoch run traces and their CSV files.

A run directory holds up to four CSVs (see FORMATS.md):

* ``trace.csv``          one row per (epoch, training sample)
* ``epochs.csv``         one row per epoch
* ``val_residuals.csv``  one row per (epoch, clean-subset sample)
* ``directions.csv``     one row per (epoch, training sample)

Floats are written with ``repr`` so files round-trip exactly; missing values
are empty fields.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

TRACE_COLUMNS = ["epoch", "sample_id", "weight", "residual", "is_noisy",
                 "e1_norm", "e2_norm", "val_residual_inf_norm"]
EPOCH_COLUMNS = ["epoch", "val_residual_mean", "val_residual_inf_norm", "e1_norm", "e2_norm"]
VAL_COLUMNS = ["epoch", "sample_id", "residual"]
DIRECTION_COLUMNS = ["epoch", "sample_id", "neg_weight_derivative", "is_noisy"]


@dataclass
class RunTrace:
    """Arrays indexed ``[epoch_index, sample]``; epoch 0 is the initial state."""

    epochs: np.ndarray
    sample_ids: np.ndarray
    noise_mask: np.ndarray
    weights: np.ndarray
    residuals: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    val_ids: np.ndarray | None = None
    val_residuals: np.ndarray | None = None
    directions: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    @property
    def val_inf(self) -> np.ndarray:
        if self.val_residuals is None:
            return np.full(len(self.epochs), np.nan)
        return np.abs(self.val_residuals).max(axis=1)

    @property
    def val_mean(self) -> np.ndarray:
        if self.val_residuals is None:
            return np.full(len(self.epochs), np.nan)
        return self.val_residuals.mean(axis=1)


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if np.isnan(v) else repr(v)


def _parse(s: str) -> float:
    return float("nan") if s == "" else float(s)


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_trace(trace: RunTrace, out_dir) -> dict:
    """Write the trace CSVs into ``out_dir``; returns ``{kind: filename}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    val_inf, val_mean = trace.val_inf, trace.val_mean
    files = {}

    def trace_rows():
        for k, ep in enumerate(trace.epochs):
            for i in range(trace.n):
                yield (ep, trace.sample_ids[i], trace.weights[k, i], trace.residuals[k, i],
                       trace.noise_mask[i], trace.e1[k], trace.e2[k], val_inf[k])

    _write(out / "trace.csv", TRACE_COLUMNS, trace_rows())
    files["trace"] = "trace.csv"

    extra_cols = sorted(trace.extra)
    _write(out / "epochs.csv", EPOCH_COLUMNS + extra_cols, (
        (ep, val_mean[k], val_inf[k], trace.e1[k], trace.e2[k], *[trace.extra[c][k] for c in extra_cols])
        for k, ep in enumerate(trace.epochs)
    ))
    files["epochs"] = "epochs.csv"

    if trace.val_residuals is not None:
        _write(out / "val_residuals.csv", VAL_COLUMNS, (
            (ep, trace.val_ids[j], trace.val_residuals[k, j])
            for k, ep in enumerate(trace.epochs) for j in range(len(trace.val_ids))
        ))
        files["val_residuals"] = "val_residuals.csv"

    if trace.directions is not None:
        _write(out / "directions.csv", DIRECTION_COLUMNS, (
            (ep, trace.sample_ids[i], trace.directions[k, i], trace.noise_mask[i])
            for k, ep in enumerate(trace.epochs) for i in range(trace.n)
            if not np.isnan(trace.directions[k, i])
        ))
        files["directions"] = "directions.csv"
    return files


def _read(path, expected):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"{path}: empty file")
        missing = [c for c in expected if c not in header]
        if missing:
            raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)
    return header, rows


def read_trace(run_dir) -> RunTrace:
    """Rebuild a :class:`RunTrace` from the CSVs in ``run_dir``."""
    run_dir = Path(run_dir)
    header, rows = _read(run_dir / "trace.csv", TRACE_COLUMNS)
    col = {c: header.index(c) for c in TRACE_COLUMNS}
    epochs = sorted({int(r[col["epoch"]]) for r in rows})
    e_index = {e: k for k, e in enumerate(epochs)}
    sample_ids = []
    seen = set()
    for r in rows:
        sid = int(r[col["sample_id"]])
        if sid not in seen:
            seen.add(sid)
            sample_ids.append(sid)
    s_index = {s: i for i, s in enumerate(sample_ids)}
    E, n = len(epochs), len(sample_ids)
    weights = np.full((E, n), np.nan)
    residuals = np.full((E, n), np.nan)
    noisy = np.zeros(n, dtype=bool)
    e1 = np.full(E, np.nan)
    e2 = np.full(E, np.nan)
    for r in rows:
        k, i = e_index[int(r[col["epoch"]])], s_index[int(r[col["sample_id"]])]
        weights[k, i] = _parse(r[col["weight"]])
        residuals[k, i] = _parse(r[col["residual"]])
        noisy[i] = r[col["is_noisy"]] == "1"
        e1[k] = _parse(r[col["e1_norm"]])
        e2[k] = _parse(r[col["e2_norm"]])
    if np.isnan(weights).any():
        raise ConfigError(f"{run_dir / 'trace.csv'}: weight column incomplete")
    trace = RunTrace(np.array(epochs), np.array(sample_ids), noisy, weights, residuals, e1, e2)

    epath = run_dir / "epochs.csv"
    if epath.exists():
        eh, erows = _read(epath, EPOCH_COLUMNS)
        for c in eh:
            if c not in EPOCH_COLUMNS:
                trace.extra[c] = np.array([_parse(r[eh.index(c)]) for r in erows])

    vpath = run_dir / "val_residuals.csv"
    if vpath.exists():
        vh, vrows = _read(vpath, VAL_COLUMNS)
        vid = []
        vseen = set()
        for r in vrows:
            s = int(r[vh.index("sample_id")])
            if s not in vseen:
                vseen.add(s)
                vid.append(s)
        v_index = {s: j for j, s in enumerate(vid)}
        vals = np.full((E, len(vid)), np.nan)
        for r in vrows:
            vals[e_index[int(r[vh.index("epoch")])], v_index[int(r[vh.index("sample_id")])]] = \
                _parse(r[vh.index("residual")])
        trace.val_ids = np.array(vid)
        trace.val_residuals = vals

    dpath = run_dir / "directions.csv"
    if dpath.exists():
        dh, drows = _read(dpath, DIRECTION_COLUMNS)
        dirs = np.full((E, n), np.nan)
        for r in drows:
            dirs[e_index[int(r[dh.index("epoch")])], s_index[int(r[dh.index("sample_id")])]] = \
                _parse(r[dh.index("neg_weight_derivative")])
        trace.directions = dirs
    return trace
