"""Synthetic shift scenarios and UCI Heart Disease ingestion.

Synthetic world: two isotropic Gaussian blobs in ``d`` dimensions whose means
sit at ``-separation/2`` and ``+separation/2`` along the first axis. The
label is the blob identity, so the Bayes rule is the sign of the first
coordinate.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .errors import InputError

log = logging.getLogger(__name__)

DETERIORATING = "deteriorating"
NON_DETERIORATING = "non_deteriorating"
SHIFT_KINDS = (DETERIORATING, NON_DETERIORATING)


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: Optional[np.ndarray] = None
    provenance: str = ""
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "x", x)
        if self.y is not None:
            y = np.asarray(self.y, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise InputError(f"expected {x.shape[0]} labels, got shape {y.shape}")
            object.__setattr__(self, "y", y)

    def __len__(self):
        return self.x.shape[0]

    def unlabeled(self) -> "UnlabeledBatch":
        return UnlabeledBatch(self.x, self.provenance)

    def sha256(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.x).tobytes())
        if self.y is not None:
            h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class UnlabeledBatch:
    """What the monitor is allowed to see: inputs only."""
    x: np.ndarray
    provenance: str = ""

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class BlobSpec:
    d: int = 2
    separation: float = 4.0

    def __post_init__(self):
        if self.d < 1:
            raise InputError("d must be >= 1")
        if self.separation < 0:
            raise InputError("separation must be nonnegative")


@dataclass(frozen=True)
class ShiftScenario:
    kind: str
    magnitude: float
    seed: int = 0
    base: BlobSpec = field(default_factory=BlobSpec)

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise InputError(f"kind must be one of {SHIFT_KINDS}, got {self.kind!r}")
        if self.magnitude < 0:
            raise InputError("magnitude must be nonnegative")


def _draw_blobs(n, d, rng):
    y = rng.permutation(np.arange(n) % 2)
    noise = rng.standard_normal((n, d))
    return y, noise


def gen_blobs(n, d, separation, rng) -> Dataset:
    """Balanced two-blob labeled sample."""
    if n < 1 or d < 1:
        raise InputError("n and d must be >= 1")
    y, noise = _draw_blobs(n, d, rng)
    x = noise.copy()
    x[:, 0] += (y - 0.5) * separation
    return Dataset(x, y, f"blobs(d={d},sep={separation})")


def gen_shift(base: BlobSpec, kind, magnitude, m, rng) -> Tuple[UnlabeledBatch, np.ndarray]:
    """A deployment batch of ``m`` inputs and its hidden labels.

    Draws exactly what :func:`gen_blobs` draws, so magnitude 0 reproduces the
    ID batch for the same rng state.

    * deteriorating: the whole batch is translated by ``magnitude`` along the
      first axis; labels stay the blob identity, so one blob is pushed across
      the decision boundary.
    * non_deteriorating: coordinates parallel to the boundary are scaled by
      ``1 + magnitude``; along the first axis only deviations pointing away
      from the boundary are scaled. No point moves toward the boundary, so
      the Bayes rule keeps its accuracy.
    """
    if kind not in SHIFT_KINDS:
        raise InputError(f"kind must be one of {SHIFT_KINDS}, got {kind!r}")
    if magnitude < 0:
        raise InputError("magnitude must be nonnegative")
    y, noise = _draw_blobs(m, base.d, rng)
    centers = (y - 0.5) * base.separation
    x = noise.copy()
    if kind == DETERIORATING:
        x[:, 0] += centers + magnitude
    else:
        scale = 1.0 + magnitude
        away = np.sign(noise[:, 0]) == np.sign(centers)
        x[:, 0] = centers + np.where(away, noise[:, 0] * scale, noise[:, 0])
        x[:, 1:] *= scale
    return UnlabeledBatch(x, f"{kind}(mag={magnitude})"), y


def translation_accuracy(separation, magnitude) -> float:
    """Accuracy of the Bayes rule (sign of the first coordinate) after translation."""
    s2 = separation / 2.0
    return 0.5 * (norm.cdf(s2 - magnitude) + norm.cdf(s2 + magnitude))


def magnitude_for_accuracy(separation, target) -> float:
    """Smallest translation that brings the Bayes-rule accuracy down to ``target``."""
    lo_acc = 0.5
    if not lo_acc < target < translation_accuracy(separation, 0.0):
        raise InputError("target accuracy must lie between 0.5 and the ID accuracy")
    return brentq(lambda t: translation_accuracy(separation, t) - target, 0.0, 10.0 * (separation + 1))


# CSV export / import for generated data

def save_csv(data: Dataset, path):
    d = data.x.shape[1]
    header = [f"x{i}" for i in range(d)] + (["y"] if data.y is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(data)):
            row = [repr(float(v)) for v in data.x[i]]
            if data.y is not None:
                row.append(str(int(data.y[i])))
            w.writerow(row)


def load_csv(path, provenance=None) -> Dataset:
    """Read a CSV written by :func:`save_csv` (a ``y`` column is optional)."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    has_y = header[-1] == "y"
    try:
        arr = np.array([[float(v) for v in r] for r in body if r], dtype=np.float64)
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric value ({exc})") from exc
    if arr.size == 0:
        raise InputError(f"{path}: no data rows")
    if arr.shape[1] != len(header):
        raise InputError(f"{path}: rows do not match the header width")
    if has_y:
        return Dataset(arr[:, :-1], arr[:, -1].astype(np.int64), provenance or path)
    return Dataset(arr, None, provenance or path)


# UCI Heart Disease

UCI_COLUMNS = ("age", "sex", "cp", "trestbps", "chol", "fbs", "restecg", "thalach", "exang",
               "oldpeak", "slope", "ca", "thal", "num")
UCI_FEATURES = UCI_COLUMNS[:9]
CATEGORICAL = ("sex", "cp", "fbs", "restecg", "exang")
UCI_FILES = {
    "cleveland": "processed.cleveland.data",
    "hungarian": "processed.hungarian.data",
    "switzerland": "processed.switzerland.data",
    "va": "processed.va.data",
}
ID_SOURCES = ("cleveland", "hungarian")
OOD_SOURCES = ("switzerland", "va")


def read_uci_file(path) -> Tuple[np.ndarray, np.ndarray, int]:
    """Parse one processed UCI file into (features with NaN for '?', binary labels, dropped rows)."""
    feats, labels, dropped = [], [], 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            tokens = [t.strip() for t in line.split(",")]
            if len(tokens) != len(UCI_COLUMNS):
                log.warning("%s:%d: expected %d fields, got %d; dropped", path, lineno,
                            len(UCI_COLUMNS), len(tokens))
                dropped += 1
                continue
            try:
                values = [math.nan if t == "?" else float(t) for t in tokens]
            except ValueError:
                log.warning("%s:%d: non-numeric field; dropped", path, lineno)
                dropped += 1
                continue
            if math.isnan(values[-1]):
                log.warning("%s:%d: missing diagnosis; dropped", path, lineno)
                dropped += 1
                continue
            feats.append(values[:len(UCI_FEATURES)])
            labels.append(int(values[-1] > 0))
    return np.array(feats, dtype=np.float64).reshape(-1, len(UCI_FEATURES)), np.array(labels, dtype=np.int64), dropped


@dataclass(frozen=True)
class UCISplits:
    train: Dataset
    heldout: Dataset
    validation: Dataset
    ood: Dataset
    dropped: int
    id_rows: int

    def sha256(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.heldout, self.validation, self.ood):
            h.update(part.sha256().encode())
        return h.hexdigest()


def resolve_uci_paths(data_dir=None) -> Dict[str, str]:
    data_dir = data_dir or os.environ.get("D3M_UCI_DIR")
    if not data_dir:
        raise FileNotFoundError("UCI data directory not given (pass a path or set D3M_UCI_DIR)")
    paths = {k: os.path.join(data_dir, v) for k, v in UCI_FILES.items()}
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(f"missing UCI files: {missing}")
    return paths


def _impute_stats(x):
    fill = np.empty(x.shape[1])
    for j, name in enumerate(UCI_FEATURES):
        col = x[:, j][~np.isnan(x[:, j])]
        if col.size == 0:
            fill[j] = 0.0
        elif name in CATEGORICAL:
            values, counts = np.unique(col, return_counts=True)
            fill[j] = values[np.argmax(counts)]
        else:
            fill[j] = col.mean()
    return fill


def load_uci_heart(paths=None, seed=0, fractions=(0.6, 0.2, 0.2)) -> UCISplits:
    """ID (Cleveland + Hungarian) split into train/held-out/validation; OOD is Switzerland + VA.

    Imputation values (mean for numeric, mode for categorical columns) and
    standardization statistics come from the ID training split only.
    """
    if paths is None or isinstance(paths, (str, os.PathLike)):
        paths = resolve_uci_paths(paths)
    parts, dropped = {}, 0
    for key in UCI_FILES:
        if key not in paths:
            raise FileNotFoundError(f"no path given for {key}")
        x, y, n_bad = read_uci_file(paths[key])
        parts[key] = (x, y)
        dropped += n_bad
    x_id = np.vstack([parts[k][0] for k in ID_SOURCES])
    y_id = np.concatenate([parts[k][1] for k in ID_SOURCES])
    x_ood = np.vstack([parts[k][0] for k in OOD_SOURCES])
    y_ood = np.concatenate([parts[k][1] for k in OOD_SOURCES])
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError("split fractions must sum to 1")

    order = np.random.default_rng(seed).permutation(x_id.shape[0])
    n_train = int(round(fractions[0] * order.size))
    n_held = int(round(fractions[1] * order.size))
    idx = np.split(order, [n_train, n_train + n_held])

    fill = _impute_stats(x_id[idx[0]])

    def prep(x):
        x = np.where(np.isnan(x), fill, x)
        return x

    train_x = prep(x_id[idx[0]])
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)

    def make(x, y, tag):
        return Dataset((prep(x) - mean) / std, y, tag, mean, std)

    return UCISplits(
        make(x_id[idx[0]], y_id[idx[0]], "uci:id:train"),
        make(x_id[idx[1]], y_id[idx[1]], "uci:id:heldout"),
        make(x_id[idx[2]], y_id[idx[2]], "uci:id:validation"),
        make(x_ood, y_ood, "uci:ood"),
        dropped,
        int(x_id.shape[0]),
    )
