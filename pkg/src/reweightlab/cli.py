"""Command-line harness: ``rlab gen-data | train | analyze | self-check``.

Configs are INI files (sections ``[run] [data] [net] [meta] [fbr]
[analysis]``, see README).  Every command writes into a run directory named
``<timestamp>-seed<seed>`` under ``$RLAB_OUTPUT_DIR`` (or ``[run]
output_dir``, default ``runs``) and leaves a ``manifest.json`` there.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric divergence
or failed numeric self-check, 3 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (FIGURE_KINDS, detect_phases, emit_figure_data, linearization_gap,
                       prop1_monte_carlo)
from .data import (NoiseSpec, derive_seeds, file_checksum, gen_clusters, make_splits, read_rlab,
                   to_pm1, write_rlab)
from .errors import ConfigError, DivergenceError, NumericError
from .fbr import FbrConfig, accuracy, fbr_train, weight_auc
from .kernel import ntk_gram
from .meta import (MetaConfig, hypergrad, hypergrad_fd, measured_margin, meta_train,
                   pseudo_update, relative_error, val_objective)
from .net import NetConfig, forward, init_network
from .trace import read_trace, write_trace

log = logging.getLogger("reweightlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
OUTPUT_ENV = "RLAB_OUTPUT_DIR"
MODES = {"meta-exact": "exact", "meta-first-order": "first_order", "meta-ntk": "ntk_frozen", "fbr": None}

# section -> key -> (parser, default)
_str = str


def _opt_float(s):
    return None if s.strip() == "" else float(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s):
    return [int(v) for v in s.replace(",", " ").split()]


SCHEMA = {
    "run": {"seed": (int, "0"), "output_dir": (_str, "runs"), "name": (_str, "")},
    "data": {"n": (int, "500"), "m": (int, "50"), "d": (int, "2"), "C": (int, "2"),
             "separation": (float, "4.0"), "spread": (_opt_float, "0.05"), "n_test": (int, "0"),
             "noise": (_str, "symmetric:0.4:stratified")},
    "net": {"width": (int, "512"), "depth": (int, "1"), "activation": (_str, "tanh")},
    "meta": {"eta": (float, "1e-3"), "beta": (float, "0.12"), "epochs": (int, "100"),
             "diagnostics": (_bool, "true"), "divergence_factor": (float, "10.0")},
    "fbr": {"alpha": (float, "1e-3"), "lam_pos": (float, "1.0"), "lam_neg": (_opt_float, ""),
            "feature_map": (_str, "penultimate"), "batch_size": (int, "100"), "epochs": (int, "20"),
            "eta": (float, "1.0"), "loss": (_str, "ce"), "lam_neg_decay": (float, "1.0"),
            "divergence_factor": (float, "10.0")},
    "analysis": {"kappa": (float, "3.0"), "m_grid": (_int_list, "64,256,1024"),
                 "replicates": (int, "200"), "kernel": (_str, "features"), "feature_dim": (int, "16"),
                 "kernel_width": (int, "256"), "widths": (_int_list, "128,512,2048"),
                 "steps": (int, "50"), "lingap_eta": (float, "0.01"), "lingap_n": (int, "40"),
                 "lingap_d": (int, "8"), "lingap_seeds": (int, "5")},
}


class Config:
    """Typed view of an INI config; unknown sections or keys are errors."""

    def __init__(self, raw: dict[str, dict[str, str]]):
        self.raw = {sec: {k: raw.get(sec, {}).get(k, default) for k, (_, default) in keys.items()}
                    for sec, keys in SCHEMA.items()}
        for sec, values in raw.items():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]")
            for k in values:
                if k not in SCHEMA[sec]:
                    raise ConfigError(f"unknown key {k!r} in [{sec}]")
        self.values = {}
        for sec, keys in SCHEMA.items():
            self.values[sec] = {}
            for k, (parse, _) in keys.items():
                try:
                    self.values[sec][k] = parse(self.raw[sec][k])
                except ValueError as exc:
                    raise ConfigError(f"[{sec}] {k} = {self.raw[sec][k]!r}: {exc}") from None

    def __getitem__(self, sec):
        return self.values[sec]

    @classmethod
    def from_text(cls, text: str) -> Config:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        return cls({sec: dict(cp[sec]) for sec in cp.sections()})

    @classmethod
    def load(cls, path) -> Config:
        if path is None:
            return cls({})
        return cls.from_text(Path(path).read_text())


# --- helpers ----------------------------------------------------------------------------

def _timestamp():
    return _dt.datetime.now().strftime("%Y%m%d-%H%M%S")


def make_run_dir(cfg: Config, out=None, tag="") -> Path:
    """``--out`` if given, else ``<base>/<timestamp>-seed<seed>[-tag]`` (suffixed if taken)."""
    if out:
        path = Path(out)
    else:
        base = Path(os.environ.get(OUTPUT_ENV) or cfg["run"]["output_dir"])
        name = cfg["run"]["name"] or f"{_timestamp()}-seed{cfg['run']['seed']}"
        if tag:
            name += f"-{tag}"
        path = base / name
        k = 1
        while path.exists():
            path = base / f"{name}-{k}"
            k += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


def _noise_spec(cfg: Config) -> NoiseSpec:
    return NoiseSpec.parse(cfg["data"]["noise"])


def build_splits(cfg: Config) -> dict:
    d = cfg["data"]
    return make_splits(d["n"], d["m"], d["d"], d["C"], d["separation"], _noise_spec(cfg),
                       cfg["run"]["seed"], spread=d["spread"], n_test=d["n_test"])


def net_config(cfg: Config, d_in: int, d_out: int) -> NetConfig:
    n = cfg["net"]
    return NetConfig.uniform(d_in, n["width"], n["depth"], d_out, n["activation"],
                             seed=derive_seeds(cfg["run"]["seed"])["net"])


def write_manifest(run_dir: Path, manifest: dict, name="manifest.json") -> Path:
    path = run_dir / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _base_manifest(command, cfg: Config, started) -> dict:
    return {
        "command": command,
        "code_version": __version__,
        "config": cfg.raw,
        "seed": cfg["run"]["seed"],
        "seeds": derive_seeds(cfg["run"]["seed"]),
        "created": _dt.datetime.now().isoformat(timespec="seconds"),
        "wall_clock_s": round(time.perf_counter() - started, 3),
        "float_dtype": "float64",
    }


def _load_dataset(path):
    splits, noise, meta = read_rlab(path)
    for need in ("train", "clean_subset"):
        if need not in splits:
            raise ConfigError(f"{path}: dataset has no {need!r} split")
    counts = splits["clean_subset"].class_counts()
    if np.any(counts != counts[0]) or np.any(counts == 0):
        raise ConfigError(f"{path}: clean subset is not class-balanced ({counts.tolist()})")
    return splits


# --- gen-data ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    cfg = Config.load(args.config)
    splits = build_splits(cfg)
    run_dir = make_run_dir(cfg, args.out_dir, "data")
    path = Path(args.out) if args.out else run_dir / "data.rlab"
    noise = _noise_spec(cfg)
    checksum = write_rlab(path, splits, noise, {"seed": cfg["run"]["seed"]})
    train = splits["train"]
    flip = float(train.noise_mask.mean())
    man = _base_manifest("gen-data", cfg, started)
    man["dataset"] = {"path": str(path), "sha256": checksum}
    man["summary"] = {"n_train": train.n, "m": splits["clean_subset"].n,
                      "n_test": splits["test"].n if "test" in splits else 0,
                      "flip_fraction": flip}
    write_manifest(run_dir, man)
    print(f"wrote {path}")
    print(f"sha256 {checksum}")
    print(f"flip fraction {flip:.4f} (nominal {noise.rate})")
    return EXIT_OK


# --- train ------------------------------------------------------------------------------

def _self_check(params, train, clean, eta, k=8) -> float:
    """FD oracle on the first ``k`` weight coordinates at the initial state."""
    X, y = train.X, to_pm1(train.y_observed)
    Xv, yv = clean.X, to_pm1(clean.y_observed)
    w = np.full(train.n, 0.5)
    g, _ = hypergrad(params, X, y, Xv, yv, w, eta)
    k = min(k, train.n)
    step = 1e-4
    fd = np.empty(k)
    for i in range(k):
        e = np.zeros(train.n)
        e[i] = step
        fp = val_objective(pseudo_update(params, X, y, w + e, eta), Xv, yv)
        fm = val_objective(pseudo_update(params, X, y, w - e, eta), Xv, yv)
        fd[i] = (fp - fm) / (2 * step)
    return relative_error(g[:k], fd)


def run_training(cfg: Config, mode: str, splits: dict, run_dir: Path, self_check=False):
    """Train, write traces into ``run_dir`` and return ``(summary, files, diverged)``."""
    train, clean = splits["train"], splits["clean_subset"]
    test = splits.get("test")
    summary = {}
    if mode == "fbr":
        f = cfg["fbr"]
        fcfg = FbrConfig(alpha=f["alpha"], lam_pos=f["lam_pos"], lam_neg=f["lam_neg"],
                         feature_map=f["feature_map"], batch_size=f["batch_size"],
                         epochs=f["epochs"], eta=f["eta"], loss=f["loss"],
                         lam_neg_decay=f["lam_neg_decay"],
                         seed=derive_seeds(cfg["run"]["seed"])["shuffle"],
                         divergence_factor=f["divergence_factor"])
        ncfg = net_config(cfg, train.d, train.n_classes)
        res = fbr_train(fcfg, train, clean, ncfg, raise_on_divergence=False)
        if test is not None:
            summary["test_accuracy"] = accuracy(res.params, test)
    else:
        if train.n_classes != 2:
            raise ConfigError(f"mode {mode} needs binary data, got C={train.n_classes}")
        mt = cfg["meta"]
        mcfg = MetaConfig(eta=mt["eta"], beta=mt["beta"], backend=MODES[mode], epochs=mt["epochs"],
                          diagnostics=mt["diagnostics"], divergence_factor=mt["divergence_factor"])
        ncfg = net_config(cfg, train.d, 1)
        params = init_network(ncfg)
        if self_check:
            err = _self_check(params, train, clean, mcfg.eta)
            summary["self_check_rel_error"] = err
            print(f"self-check: hypergradient vs finite differences, rel. error {err:.2e}")
            if not err <= 1e-6:
                raise NumericError(f"hypergradient self-check failed (rel. error {err:.3g})")
        gamma = measured_margin(params, train, clean)
        res = meta_train(mcfg, train, clean, ncfg, params=params, raise_on_divergence=False)
        rep = detect_phases(res.trace, clean.n, mcfg.beta, gamma, cfg["net"]["width"], mcfg.eta,
                            cfg["analysis"]["kappa"])
        summary["gamma_hat"] = gamma
        summary["phase_report"] = rep.to_dict()
        summary["phase_inputs"] = rep.inputs
        if test is not None:
            pred = np.where(forward(res.params, test.X) >= 0, 1, 0)
            summary["test_accuracy"] = float(np.mean(pred == test.y_clean))
    tr = res.trace
    w = tr.weights[-1]
    noisy = tr.noise_mask
    summary.update({
        "epochs_completed": int(tr.epochs[-1]),
        "mean_clean_weight": float(w[~noisy].mean()) if (~noisy).any() else None,
        "mean_noisy_weight": float(w[noisy].mean()) if noisy.any() else None,
        "weight_auc": weight_auc(w, noisy) if noisy.any() and (~noisy).any() else None,
        "final_val_residual_inf_norm": float(tr.val_inf[-1]),
        "diverged": res.diverged is not None,
    })
    files = write_trace(tr, run_dir)
    return summary, files, res.diverged


def cmd_train(args) -> int:
    started = time.perf_counter()
    if args.replay:
        man = json.loads(Path(args.replay).read_text())
        if man.get("command") != "train":
            raise ConfigError(f"{args.replay} is not a train manifest")
        cfg = Config(man["config"])
        mode = man["mode"]
        data_path = man["dataset"].get("path") if man["dataset"].get("source") == "file" else None
        if data_path and file_checksum(data_path) != man["dataset"]["sha256"]:
            raise ConfigError(f"dataset {data_path} no longer matches the manifest checksum")
    else:
        if args.mode is None or args.config is None:
            raise ConfigError("train needs MODE and CONFIG (or --replay MANIFEST)")
        cfg = Config.load(args.config)
        mode = args.mode
        data_path = args.data
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    run_dir = make_run_dir(cfg, args.out, mode)
    if data_path:
        splits = _load_dataset(data_path)
        dataset = {"source": "file", "path": str(Path(data_path).resolve()),
                   "sha256": file_checksum(data_path)}
    else:
        splits = build_splits(cfg)
        path = run_dir / "data.rlab"
        dataset = {"source": "config", "path": str(path),
                   "sha256": write_rlab(path, splits, _noise_spec(cfg), {"seed": cfg["run"]["seed"]})}
    summary, files, diverged = run_training(cfg, mode, splits, run_dir, args.self_check)
    man = _base_manifest("train", cfg, started)
    man.update({"mode": mode, "dataset": dataset, "files": files, "summary": summary,
                "run_dir": str(run_dir)})
    write_manifest(run_dir, man)
    print(f"run directory {run_dir}")
    for key in ("mean_clean_weight", "mean_noisy_weight", "weight_auc", "test_accuracy"):
        if summary.get(key) is not None:
            print(f"{key} {summary[key]:.4f}")
    if "phase_report" in summary:
        pr = summary["phase_report"]
        print(f"T1_pred {pr['T1_pred']:.3f} T1_emp {pr['T1_emp']} T2_emp {pr['T2_emp']}")
    if diverged is not None:
        print(f"error: {diverged}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# --- analyze ------------------------------------------------------------------------------

def _read_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    return json.loads(path.read_text()) if path.exists() else {}


def cmd_analyze(args) -> int:
    started = time.perf_counter()
    cfg = Config.load(args.config)
    what = args.what
    outputs = {}
    if what in ("phases", "figures"):
        if not args.run_dir:
            raise ConfigError(f"analyze {what} needs --run-dir")
        run_dir = Path(args.run_dir)
        if not run_dir.is_dir():
            raise FileNotFoundError(f"run directory {run_dir} does not exist")
        out = Path(args.out) if args.out else run_dir
        out.mkdir(parents=True, exist_ok=True)
        trace = read_trace(run_dir)
        man = _read_manifest(run_dir)
        if what == "phases":
            inputs = dict(man.get("summary", {}).get("phase_inputs", {}))
            for key in ("m", "beta", "gamma_hat", "width", "eta"):
                if getattr(args, key) is not None:
                    inputs[key] = getattr(args, key)
            missing = [k for k in ("m", "beta", "gamma_hat", "width", "eta") if k not in inputs]
            if missing:
                raise ConfigError(f"phase analysis needs {', '.join(missing)} (manifest or flags)")
            kappa = args.kappa if args.kappa is not None else cfg["analysis"]["kappa"]
            rep = detect_phases(trace, inputs["m"], inputs["beta"], inputs["gamma_hat"],
                                inputs["width"], inputs["eta"], kappa)
            path = out / "phase_report.json"
            path.write_text(rep.to_json())
            outputs["phase_report"] = str(path)
            print(f"T1_pred {rep.T1_pred:.3f}  T1_emp {rep.T1_emp}  T2_emp {rep.T2_emp}")
            print(f"early_bands {rep.early_bands}  filtering {rep.filtering}  monotone {rep.monotone}")
            print(f"post_filter_onset {rep.post_filter_onset}  final |u_v|_inf {rep.final_val_inf:.4g}")
        else:
            outputs.update(_figures(trace, man, out / "figures"))
            print(f"wrote {len(outputs)} figure files to {out / 'figures'}")
    elif what == "prop1":
        a = cfg["analysis"]
        m_grid = _int_list(args.m_grid) if args.m_grid else a["m_grid"]
        res = prop1_monte_carlo(m_grid, args.replicates or a["replicates"],
                                args.kernel or a["kernel"], a["feature_dim"], a["kernel_width"],
                                seed=cfg["run"]["seed"])
        out = make_run_dir(cfg, args.out, "prop1")
        path = out / "prop1.csv"
        path.write_text(res.to_csv())
        outputs["prop1"] = str(path)
        print(res.to_csv(), end="")
        print(f"slope |S| {res.slope_S:.3f}  slope ratio {res.slope_ratio:.3f}")
    elif what == "lingap":
        a = cfg["analysis"]
        seeds = derive_seeds(cfg["run"]["seed"])
        n = a["lingap_n"]
        pool = gen_clusters(n + 20, a["lingap_d"], 2, cfg["data"]["separation"], seeds["data"])
        widths = _int_list(args.widths) if args.widths else a["widths"]
        net_seeds = [seeds["net"] + k for k in range(a["lingap_seeds"])]
        res = linearization_gap(widths, pool.X[:n], to_pm1(pool.y_clean[:n]), pool.X[n:],
                                a["lingap_eta"], a["steps"], seeds=net_seeds)
        out = make_run_dir(cfg, args.out, "lingap")
        path = out / "lingap.csv"
        path.write_text(res.to_csv())
        outputs["lingap"] = str(path)
        for wdt, g in zip(res.widths, res.median):
            print(f"width {int(wdt):6d}  median gap {g:.4e}")
    else:
        raise ConfigError(f"unknown analysis {what!r}")
    man = _base_manifest(f"analyze {what}", cfg, started)
    man["outputs"] = outputs
    write_manifest(out, man, "analyze_manifest.json" if what in ("phases", "figures") else "manifest.json")
    return EXIT_OK


def _figures(trace, man, out: Path) -> dict:
    outputs = {}
    for kind in ("weight_dynamics", "mean_residual", "weight_distribution", "weight_directions"):
        outputs[kind] = str(emit_figure_data(trace, kind, out))
    if "config" not in man or "dataset" not in man:
        raise ConfigError("kernel histograms need the run manifest (config and dataset)")
    cfg = Config(man["config"])
    splits, _, _ = read_rlab(man["dataset"]["path"])
    train, clean = splits["train"], splits["clean_subset"]
    C = train.n_classes
    d_out = C if man.get("mode") == "fbr" else 1
    params = init_network(net_config(cfg, train.d, d_out))
    out_dir = None if d_out == 1 else np.full(C, 1.0 / np.sqrt(C))
    g = ntk_gram(params, train.X, clean.X, train.ids, clean.ids, out_dir=out_dir)
    for kind in ("ntk_hist", "centered_ntk_hist"):
        outputs[kind] = str(emit_figure_data(g, kind, out, labels_rows=train.y_clean,
                                             labels_cols=clean.y_clean))
    assert sorted(outputs) == sorted(FIGURE_KINDS)
    return outputs


# --- self-check -----------------------------------------------------------------------------

def cmd_self_check(args) -> int:
    """Quick numerical oracles; exit 2 if any fails."""
    from .fbr import class_means, row_shift, top_two
    from .net import jacobian

    rng = np.random.default_rng(args.seed)
    ok = True

    worst = 0.0
    for _ in range(args.instances):
        depth = int(rng.integers(1, 3))
        cfg = NetConfig.uniform(3, int(rng.integers(2, 17)), depth, seed=int(rng.integers(2 ** 31)))
        p = init_network(cfg)
        p = p.axpy(0.3, type(p).from_flat(cfg, rng.standard_normal(cfg.n_params)))
        n, m = int(rng.integers(2, 9)), 2 * int(rng.integers(1, 3))
        X, Xv = rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(-0.5, 0.5, (m, 3))
        y, yv = rng.choice([-1.0, 1.0], n), np.repeat([-1.0, 1.0], m // 2)
        w = rng.uniform(0, 1, n)
        g, _ = hypergrad(p, X, y, Xv, yv, w, 1e-3)
        worst = max(worst, relative_error(g, hypergrad_fd(p, X, y, Xv, yv, w, 1e-3)))
    line_ok = worst <= 1e-6
    ok &= line_ok
    print(f"{'PASS' if line_ok else 'FAIL'} hypergradient vs finite differences ({args.instances} instances, worst rel. error {worst:.2e})")

    cfg = NetConfig.uniform(4, 6, 1, seed=1)
    p = init_network(cfg)
    p = p.axpy(0.5, type(p).from_flat(cfg, rng.standard_normal(cfg.n_params)))
    x = rng.uniform(-0.5, 0.5, (1, 4))
    J = jacobian(p, x).values[:, 0]
    flat = p.flat()
    fd = np.empty_like(flat)
    for i in range(len(flat)):
        e = np.zeros_like(flat)
        e[i] = 1e-5
        fd[i] = (forward(type(p).from_flat(cfg, flat + e), x)[0]
                 - forward(type(p).from_flat(cfg, flat - e), x)[0]) / 2e-5
    jerr = float(np.max(np.abs(J - fd)))
    line_ok = jerr <= 1e-7
    ok &= line_ok
    print(f"{'PASS' if line_ok else 'FAIL'} jacobian vs finite differences (max abs deviation {jerr:.2e})")

    bad = 0
    for _ in range(200):
        C = int(rng.choice([2, 4, 10]))
        labels = np.repeat(np.arange(C), 3)
        rec = row_shift(rng.standard_normal(len(labels)), labels, C)
        s = class_means(rec.shifted, labels, C)[0]
        others = [c for c in range(C) if c != rec.top1]
        bad += int(np.any(s[others] > 1e-12) or abs(s[rec.top2]) > 1e-12)
    line_ok = bad == 0
    ok &= line_ok
    print(f"{'PASS' if line_ok else 'FAIL'} row-shift law on 200 random rows ({bad} violations)")
    return EXIT_OK if ok else EXIT_NUMERIC


# --- entry point ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rlab", description="Sample-reweighting laboratory for noisy-label training.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic .rlab dataset")
    g.add_argument("config", nargs="?", help="INI config ([run], [data] sections)")
    g.add_argument("--out", help="dataset path (default: <run dir>/data.rlab)")
    g.add_argument("--out-dir", help="run directory for the manifest")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train with meta-reweighting or FBR")
    t.add_argument("mode", nargs="?", choices=sorted(MODES), help="training mode")
    t.add_argument("config", nargs="?", help="INI config")
    t.add_argument("--data", help=".rlab dataset (default: generate from [data])")
    t.add_argument("--out", help="run directory (default: timestamped under the output dir)")
    t.add_argument("--self-check", action="store_true",
                   help="check the first-epoch hypergradient against finite differences (meta modes)")
    t.add_argument("--replay", metavar="MANIFEST", help="re-run a previous train manifest")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="phase detection, scaling experiments and figure data")
    a.add_argument("what", choices=("phases", "prop1", "lingap", "figures"))
    a.add_argument("config", nargs="?", help="INI config ([analysis] section)")
    a.add_argument("--run-dir", help="train run directory (phases, figures)")
    a.add_argument("--out", help="output directory")
    a.add_argument("--kappa", type=float, help="T2 threshold multiplier")
    a.add_argument("--m", type=int, help="clean subset size (phases)")
    a.add_argument("--beta", type=float, help="coupling constant (phases)")
    a.add_argument("--gamma-hat", dest="gamma_hat", type=float, help="measured sign margin (phases)")
    a.add_argument("--width", type=int, help="hidden width (phases)")
    a.add_argument("--eta", type=float, help="classifier step size (phases)")
    a.add_argument("--m-grid", help="comma-separated clean subset sizes (prop1)")
    a.add_argument("--replicates", type=int, help="Monte-Carlo replicates per m (prop1)")
    a.add_argument("--kernel", choices=("features", "ntk", "constant"), help="kernel model (prop1)")
    a.add_argument("--widths", help="comma-separated widths (lingap)")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("self-check", help="run built-in numerical oracles")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_self_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, json.JSONDecodeError) as exc:
        print(f"error: malformed input ({exc})", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
