"""Bootstrap calibration: the reference collection of maximum disagreement rates.

Random draws inside one call of :func:`max_disagreement_from_posterior`
happen in this fixed order, so a step-by-step replay can reproduce them:

1. ``(K, m, C)`` standard normals for the pseudolabel block,
2. ``(K, m, C)`` standard normals for the disagreement block,
3. ``(K, m)`` uniforms for categorical sampling (categorical mode only).

A calibration round first draws its ``m`` bootstrap indices with
``rng.integers(0, N, size=m)`` and then runs the steps above.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .errors import ArtifactError, InputError, ShapeError
from .trainer import TrainedModel, canonical_json, model_fingerprint, posterior
from .vbll import GaussianLogitPosterior, softmax

log = logging.getLogger(__name__)

CALIBRATION_FORMAT_VERSION = 1
SAMPLING_MODES = ("categorical", "argmax")


@dataclass(frozen=True)
class CalibrationConfig:
    T: int = 1000
    m: int = 100
    K: int = 5000
    tau: float = 1.0
    seed: int = 0
    mode: str = "categorical"

    def __post_init__(self):
        if self.T < 1 or self.m < 1 or self.K < 1:
            raise InputError(f"T, m and K must be >= 1 (got T={self.T}, m={self.m}, K={self.K})")
        if not self.tau > 0:
            raise InputError(f"temperature must be positive, got {self.tau}")
        if self.mode not in SAMPLING_MODES:
            raise InputError(f"mode must be one of {SAMPLING_MODES}, got {self.mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown calibration config keys: {sorted(unknown)}")
        return cls(**d)

    def test_settings(self):
        """The settings deployment must reuse exactly."""
        return (self.m, self.K, self.tau, self.mode)


@dataclass(frozen=True)
class CalibrationRecord:
    phi: np.ndarray
    config: CalibrationConfig
    model_fingerprint: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        phi = np.sort(np.asarray(self.phi, dtype=np.float64))
        if phi.ndim != 1 or phi.size != self.config.T:
            raise ShapeError(f"expected {self.config.T} calibration values, got shape {phi.shape}")
        if phi.size and (phi[0] < 0 or phi[-1] > 1):
            raise InputError("calibration values must lie in [0, 1]")
        object.__setattr__(self, "phi", phi)

    def to_dict(self) -> dict:
        return {
            "format_version": CALIBRATION_FORMAT_VERSION,
            "model_fingerprint": self.model_fingerprint,
            "config": asdict(self.config),
            "metadata": self.metadata,
            "phi": self.phi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationRecord":
        if d.get("format_version") != CALIBRATION_FORMAT_VERSION:
            raise ArtifactError(f"unsupported calibration format version {d.get('format_version')!r}")
        try:
            return cls(np.asarray(d["phi"], dtype=np.float64), CalibrationConfig.from_dict(d["config"]),
                       str(d["model_fingerprint"]), dict(d.get("metadata", {})))
        except (KeyError, TypeError) as exc:
            raise ArtifactError(f"malformed calibration file: {exc}") from exc

    def fingerprint(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def temperature_softmax(z, tau):
    if not tau > 0:
        raise InputError(f"temperature must be positive, got {tau}")
    return softmax(np.asarray(z, dtype=np.float64) / tau)


def _sample_from_uniforms(p, u):
    # label = number of cumulative-probability entries strictly below u
    cdf = np.cumsum(p, axis=-1)
    labels = (cdf < u[..., None]).sum(axis=-1)
    return np.minimum(labels, p.shape[-1] - 1)


def categorical_sample(p, rng):
    """One label per row of ``p`` (a single vector gives a scalar)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise InputError("probabilities must be nonnegative and sum to 1")
    u = rng.random(p.shape[:-1])
    labels = _sample_from_uniforms(p, np.asarray(u))
    return int(labels) if np.ndim(labels) == 0 else labels


def disagreement_rate(sampled, pseudo) -> float:
    sampled, pseudo = np.asarray(sampled), np.asarray(pseudo)
    if sampled.shape != pseudo.shape:
        raise ShapeError(f"length mismatch: {sampled.shape} vs {pseudo.shape}")
    if sampled.size == 0:
        raise InputError("empty label vectors")
    return float(np.mean(sampled != pseudo))


def _class_softmax(z):
    """Softmax over the (short) last axis, unrolled over classes; returns a list of slices."""
    C = z.shape[-1]
    top = z[..., 0]
    for c in range(1, C):
        top = np.maximum(top, z[..., c])
    exps = [np.exp(z[..., c] - top) for c in range(C)]
    total = exps[0].copy()
    for e in exps[1:]:
        total += e
    return exps, total


def max_disagreement_from_posterior(q: GaussianLogitPosterior, K, tau, rng, mode="categorical") -> float:
    """Maximum over K sampled label vectors of the disagreement with the pseudolabels."""
    mu, std = np.atleast_2d(q.mu), np.atleast_2d(q.std)
    m, C = mu.shape
    if m == 0:
        raise InputError("empty batch")
    if not tau > 0:
        raise InputError(f"temperature must be positive, got {tau}")
    shape = (K, m, C)
    # pseudolabel block: argmax of the MC mean of softmax(z)
    z = mu + std * rng.standard_normal(shape)
    exps, total = _class_softmax(z)
    mean_probs = np.stack([(e / total).mean(axis=0) for e in exps], axis=-1)
    pseudo = np.argmax(mean_probs, axis=-1)
    # disagreement block
    z = mu + std * rng.standard_normal(shape)
    if mode == "categorical":
        exps, total = _class_softmax(z / tau)
        # label = #{c < C-1 : cumulative prob of classes 0..c below u}
        threshold = rng.random((K, m)) * total
        running = np.zeros((K, m))
        sampled = np.zeros((K, m), dtype=np.int64)
        for e in exps[:-1]:
            running += e
            sampled += running < threshold
    elif mode == "argmax":
        sampled = np.argmax(z, axis=-1)
    else:
        raise InputError(f"unknown sampling mode {mode!r}")
    rates = (sampled != pseudo).mean(axis=1)
    return float(rates.max())


def max_disagreement(model: TrainedModel, batch, cfg: CalibrationConfig, rng) -> float:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise InputError("empty batch")
    return max_disagreement_from_posterior(posterior(model, batch), cfg.K, cfg.tau, rng, cfg.mode)


def pool_hash(x) -> str:
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    return hashlib.sha256(repr(x.shape).encode() + x.tobytes()).hexdigest()


def round_streams(seed, T):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(T)]


def calibrate(model: TrainedModel, heldout, cfg: CalibrationConfig, workers: int = 1) -> CalibrationRecord:
    """Run ``cfg.T`` bootstrap rounds over the held-out pool and collect the sorted rates.

    Posteriors for the pool are computed once; every round indexes into them
    (inference has no dropout, so this equals recomputing per batch). Round
    ``t`` uses its own stream spawned from ``cfg.seed``, so any worker count
    yields the same collection.
    """
    heldout = np.atleast_2d(np.asarray(heldout, dtype=np.float64))
    n_pool = heldout.shape[0]
    if n_pool == 0:
        raise InputError("held-out pool is empty")
    if cfg.m > n_pool:
        log.warning("bootstrap size m=%d exceeds held-out pool size %d", cfg.m, n_pool)
    q = posterior(model, heldout)
    streams = round_streams(cfg.seed, cfg.T)

    def one_round(rng):
        idx = rng.integers(0, n_pool, size=cfg.m)
        return max_disagreement_from_posterior(q[idx], cfg.K, cfg.tau, rng, cfg.mode)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            phi = list(pool.map(one_round, streams))
    else:
        phi = [one_round(rng) for rng in streams]
    meta = {"library_version": __version__, "pool_size": n_pool, "pool_sha256": pool_hash(heldout)}
    return CalibrationRecord(np.array(phi), cfg, model_fingerprint(model), meta)


def save_calibration(record: CalibrationRecord, path) -> str:
    text = canonical_json(record.to_dict())
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text + "\n")
    os.replace(tmp, path)
    return hashlib.sha256(text.encode()).hexdigest()


def load_calibration(path) -> CalibrationRecord:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: corrupt calibration file ({exc})") from exc
    if not isinstance(data, dict):
        raise ArtifactError(f"{path}: calibration file is not a JSON object")
    return CalibrationRecord.from_dict(data)
