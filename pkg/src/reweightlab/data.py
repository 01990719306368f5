"""Synthetic labelled data, label-noise injection and the ``.rlab`` file format."""

from __future__ import annotations

import hashlib
import io
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError

SPLITS = ("train", "clean_subset", "test")
NORM_TOL = 1e-12


@dataclass(frozen=True)
class ExampleSet:
    """Inputs with observed and latent clean labels.

    Labels are integer classes ``0..C-1``; use :func:`to_pm1` for the binary
    squared-loss path.  ``noise_mask[i]`` is true exactly when the observed
    label differs from the clean one.
    """

    X: np.ndarray
    y_observed: np.ndarray
    y_clean: np.ndarray
    ids: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        n = len(self.ids)
        if self.X.shape[0] != n or len(self.y_observed) != n or len(self.y_clean) != n:
            raise ConfigError("ExampleSet arrays disagree in length")

    @property
    def noise_mask(self) -> np.ndarray:
        return self.y_observed != self.y_clean

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, split=None) -> ExampleSet:
        idx = np.asarray(idx)
        return ExampleSet(
            self.X[idx], self.y_observed[idx], self.y_clean[idx], self.ids[idx],
            self.n_classes, split or self.split,
        )

    def class_counts(self, observed=True) -> np.ndarray:
        labels = self.y_observed if observed else self.y_clean
        return np.bincount(labels, minlength=self.n_classes)


@dataclass(frozen=True)
class NoiseSpec:
    """``kind`` is ``none``, ``symmetric`` or ``asymmetric``.

    With ``stratified`` set, exactly ``round(rate * n_c)`` samples of each
    clean class are flipped instead of independent Bernoulli draws.
    """

    kind: str = "none"
    rate: float = 0.0
    class_map: tuple[int, ...] | None = None
    seed: int = 0
    stratified: bool = False

    def __post_init__(self):
        if self.kind not in ("none", "symmetric", "asymmetric"):
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"noise rate must lie in [0, 1), got {self.rate}")
        if self.kind == "asymmetric" and self.class_map is None:
            raise ConfigError("asymmetric noise needs a class_map")

    def describe(self) -> str:
        """Compact text form, e.g. ``symmetric:0.4`` or ``asymmetric:0.4:1/0``."""
        if self.kind == "none":
            return "none"
        text = f"{self.kind}:{self.rate!r}"
        if self.kind == "asymmetric":
            text += ":" + "/".join(str(c) for c in self.class_map)
        return text + (":stratified" if self.stratified else "")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> NoiseSpec:
        parts = text.strip().split(":")
        stratified = parts[-1] == "stratified"
        if stratified:
            parts = parts[:-1]
        try:
            if parts == ["none"]:
                return cls("none", 0.0, None, seed)
            if parts[0] == "symmetric" and len(parts) == 2:
                return cls("symmetric", float(parts[1]), None, seed, stratified)
            if parts[0] == "asymmetric" and len(parts) == 3:
                cmap = tuple(int(c) for c in parts[2].split("/"))
                return cls("asymmetric", float(parts[1]), cmap, seed, stratified)
        except ValueError as exc:
            raise ConfigError(f"cannot parse noise spec {text!r}: {exc}") from None
        raise ConfigError(f"cannot parse noise spec {text!r}")


def to_pm1(labels) -> np.ndarray:
    """Binary classes {0, 1} -> {-1.0, +1.0}."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 1):
        raise ConfigError("to_pm1 expects binary labels in {0, 1}")
    return 2.0 * labels.astype(np.float64) - 1.0


def from_pm1(y) -> np.ndarray:
    return (np.asarray(y) > 0).astype(np.int64)


def normalize_inputs(X) -> np.ndarray:
    """Rescale rows with norm above 1 back onto the unit sphere (with a warning)."""
    X = np.array(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    over = norms > 1.0 + NORM_TOL
    if np.any(over):
        warnings.warn(
            f"{int(over.sum())} inputs had norm > 1 and were rescaled to unit norm",
            stacklevel=2,
        )
        X[over] /= norms[over, None]
    return X


def gen_clusters(n, d, C, separation, seed, spread=None) -> ExampleSet:
    """Gaussian clusters around ``C`` orthogonal means.

    Means sit on scaled coordinate axes with pairwise distance ``separation``;
    each sample adds isotropic noise with per-coordinate std ``spread``
    (default ``1/sqrt(d)``, i.e. unit expected noise norm).  Labels are the
    nearest mean, classes are drawn round-robin so counts are balanced up to
    relabelling at cluster overlaps.  The whole set is scaled by one common
    factor into the unit ball.
    """
    if n < 1 or d < 1 or C < 2:
        raise ConfigError("need n >= 1, d >= 1, C >= 2")
    if separation <= 0:
        raise ConfigError("separation must be positive")
    if C > d:
        raise ConfigError(f"cannot place {C} equidistant means in {d} dimensions")
    spread = 1.0 / np.sqrt(d) if spread is None else float(spread)
    rng = np.random.default_rng(seed)
    means = np.zeros((C, d))
    means[np.arange(C), np.arange(C)] = separation / np.sqrt(2.0)
    cls = rng.permutation(np.arange(n) % C)
    X = means[cls] + spread * rng.standard_normal((n, d))
    dist = ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(dist, axis=1).astype(np.int64)
    scale = np.max(np.linalg.norm(X, axis=1))
    X = X / scale
    return ExampleSet(X, labels.copy(), labels, np.arange(n, dtype=np.int64), C)


def inject_noise(data: ExampleSet, spec: NoiseSpec) -> ExampleSet:
    """Flip observed labels; clean labels are never touched."""
    if spec.kind == "none" or spec.rate == 0.0:
        return replace(data, y_observed=data.y_clean.copy())
    rng = np.random.default_rng(spec.seed)
    C = data.n_classes
    y = data.y_clean.copy()
    if spec.stratified:
        flip = np.zeros(data.n, dtype=bool)
        for c in range(C):
            members = np.flatnonzero(data.y_clean == c)
            k = int(round(spec.rate * len(members)))
            flip[rng.choice(members, size=k, replace=False)] = True
    else:
        flip = rng.random(data.n) < spec.rate
    if spec.kind == "symmetric":
        # uniform over the C-1 wrong classes
        offset = rng.integers(1, C, size=data.n)
        y[flip] = (data.y_clean[flip] + offset[flip]) % C
    else:
        cmap = np.asarray(spec.class_map)
        if cmap.shape != (C,) or cmap.min() < 0 or cmap.max() >= C:
            raise ConfigError(f"class_map must map each of {C} classes into range")
        y[flip] = cmap[data.y_clean[flip]]
    return replace(data, y_observed=y)


def take_clean_subset(data: ExampleSet, m, seed):
    """Draw a class-balanced clean subset of size ``m``.

    Only samples whose observed label equals the clean label qualify.
    Returns ``(clean_subset, remaining_train)``.
    """
    C = data.n_classes
    if m < C or m % C:
        raise ConfigError(f"clean subset size {m} must be a positive multiple of C={C}")
    per_class = m // C
    rng = np.random.default_rng(seed)
    ok = ~data.noise_mask
    chosen = []
    for c in range(C):
        pool = np.flatnonzero(ok & (data.y_clean == c))
        if len(pool) < per_class:
            raise ConfigError(
                f"class {c} has only {len(pool)} clean samples, need {per_class}"
            )
        chosen.append(rng.choice(pool, size=per_class, replace=False))
    chosen = np.sort(np.concatenate(chosen))
    rest = np.setdiff1d(np.arange(data.n), chosen)
    return data.subset(chosen, "clean_subset"), data.subset(rest, "train")


SEED_STREAMS = ("data", "split", "noise", "net", "shuffle")


def derive_seeds(master: int) -> dict:
    """Independent 63-bit seeds for every stream, derived from one master seed.

    Stream ``k`` (in :data:`SEED_STREAMS` order) gets the first 64-bit word of
    ``SeedSequence(master).spawn(len(SEED_STREAMS))[k]``, masked to 63 bits.
    """
    children = np.random.SeedSequence(int(master)).spawn(len(SEED_STREAMS))
    return {name: int(c.generate_state(1, np.uint64)[0] & np.uint64(2 ** 63 - 1))
            for name, c in zip(SEED_STREAMS, children)}


def make_splits(n_train, m, d, C, separation, noise: NoiseSpec, seed, spread=None, n_test=0) -> dict:
    """Generate one cluster pool and cut it into train / clean_subset / test.

    The test split (class-balanced when ``n_test`` is a multiple of ``C``)
    and the clean subset are taken before noise is injected,
    so noise only touches the training split and the training noise rate is
    the nominal one.  ``seed`` is the master seed (see :func:`derive_seeds`);
    ``noise.seed`` is ignored in favour of the derived noise stream.
    """
    seeds = derive_seeds(seed)
    pool = gen_clusters(n_train + m + n_test, d, C, separation, seeds["data"], spread)
    rng = np.random.default_rng(seeds["split"])
    splits = {}
    if n_test:
        if n_test % C == 0:
            # class-balanced, so the remaining pool keeps its class balance
            test, pool = take_clean_subset(pool, n_test, int(rng.integers(2 ** 63)))
            splits["test"] = replace(test, split="test")
        else:
            test_idx = np.sort(rng.choice(pool.n, size=n_test, replace=False))
            splits["test"] = pool.subset(test_idx, "test")
            pool = pool.subset(np.setdiff1d(np.arange(pool.n), test_idx), "train")
    clean, train = take_clean_subset(pool, m, int(rng.integers(2 ** 63)))
    splits["train"] = inject_noise(train, replace(noise, seed=seeds["noise"]))
    splits["clean_subset"] = clean
    return splits


# --- .rlab text format --------------------------------------------------------

MAGIC = "# rlab 1"


def _fmt(v: float) -> str:
    return repr(float(v))


def dumps_rlab(splits: dict, noise: NoiseSpec | None = None, meta: dict | None = None) -> str:
    """Serialize named splits into ``.rlab`` text.

    Floats use the shortest round-trip representation, so reading and
    rewriting a file reproduces it byte for byte.
    """
    sets = [s for s in splits.values()]
    if not sets:
        raise ConfigError("nothing to write")
    d = sets[0].d
    C = sets[0].n_classes
    n = sum(s.n for s in sets)
    buf = io.StringIO()
    buf.write(MAGIC + "\n")
    buf.write(f"# n = {n}\n# d = {d}\n# C = {C}\n")
    buf.write(f"# noise = {(noise or NoiseSpec()).describe()}\n")
    for key, value in sorted((meta or {}).items()):
        buf.write(f"# {key} = {value}\n")
    cols = ["id", "split", "label_observed", "label_clean", "noise_flag"] + [f"x{k}" for k in range(d)]
    buf.write(",".join(cols) + "\n")
    for name in SPLITS:
        if name not in splits:
            continue
        s = splits[name]
        if s.d != d or s.n_classes != C:
            raise ConfigError("all splits must share d and C")
        for i in range(s.n):
            row = [str(int(s.ids[i])), name, str(int(s.y_observed[i])), str(int(s.y_clean[i])),
                   str(int(s.noise_mask[i]))]
            row.extend(_fmt(v) for v in s.X[i])
            buf.write(",".join(row) + "\n")
    return buf.getvalue()


def loads_rlab(text: str):
    """Parse ``.rlab`` text into ``(splits, noise_spec, header_meta)``."""
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise ConfigError("not an .rlab file (bad magic line)")
    header = {}
    pos = 1
    while pos < len(lines) and lines[pos].startswith("#"):
        key, _, value = lines[pos][1:].partition("=")
        header[key.strip()] = value.strip()
        pos += 1
    try:
        n, d, C = int(header.pop("n")), int(header.pop("d")), int(header.pop("C"))
    except KeyError as exc:
        raise ConfigError(f".rlab header missing {exc}") from None
    noise = NoiseSpec.parse(header.pop("noise", "none"))
    cols = lines[pos].split(",")
    if cols[:5] != ["id", "split", "label_observed", "label_clean", "noise_flag"] or len(cols) != 5 + d:
        raise ConfigError(f".rlab column header does not match d={d}: {cols[:6]}...")
    rows = lines[pos + 1:]
    if len(rows) != n:
        raise ConfigError(f".rlab declares n={n} but has {len(rows)} rows")
    by_split: dict[str, list] = {}
    for line in rows:
        f = line.split(",")
        if len(f) != 5 + d:
            raise ConfigError(f"malformed .rlab row: {line[:60]}")
        by_split.setdefault(f[1], []).append(f)
    splits = {}
    for name, recs in by_split.items():
        ids = np.array([int(r[0]) for r in recs], dtype=np.int64)
        yo = np.array([int(r[2]) for r in recs], dtype=np.int64)
        yc = np.array([int(r[3]) for r in recs], dtype=np.int64)
        flags = np.array([int(r[4]) for r in recs], dtype=bool)
        X = np.array([[float(v) for v in r[5:]] for r in recs], dtype=np.float64)
        if not np.array_equal(flags, yo != yc):
            raise ConfigError(f"noise_flag inconsistent with labels in split {name!r}")
        X = normalize_inputs(X)
        splits[name] = ExampleSet(X, yo, yc, ids, C, name)
    return splits, noise, header


def write_rlab(path, splits, noise=None, meta=None) -> str:
    """Write and return the sha256 checksum of the written bytes."""
    data = dumps_rlab(splits, noise, meta).encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_rlab(path):
    return loads_rlab(Path(path).read_text())


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
