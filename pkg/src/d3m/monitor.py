"""Deployment-time quantile test, streaming windows and the in-distribution FPR gate."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .calibrator import (
    CalibrationConfig,
    CalibrationRecord,
    max_disagreement,
    max_disagreement_from_posterior,
)
from .errors import ConfigMismatchError, InputError, IntegrityError, ShapeError
from .trainer import TrainedModel, model_fingerprint, posterior

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MonitorVerdict:
    window_id: int
    phi_tilde: float
    threshold: float
    alpha: float
    flagged: bool
    m: int
    ts: float

    def __post_init__(self):
        if self.flagged != (self.phi_tilde >= self.threshold):
            raise ValueError("flagged must equal phi_tilde >= threshold")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def quantile(phi, level) -> float:
    """The ceil(level * T)-th smallest entry of ``phi`` (1-based, clamped to [1, T])."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.size == 0:
        raise InputError("empty calibration collection")
    if not 0.0 <= level <= 1.0:
        raise InputError(f"level must be in [0, 1], got {level}")
    T = phi.size
    # the small slack keeps e.g. 0.9 * 10 from rounding up to 10
    k = min(max(math.ceil(level * T - 1e-9), 1), T)
    return float(np.sort(phi)[k - 1])


def _check_alpha(alpha):
    if not 0.0 < alpha <= 1.0:
        raise InputError(f"alpha must be in (0, 1], got {alpha}")


def check_integrity(model: TrainedModel, record: CalibrationRecord, fingerprint: Optional[str] = None):
    fp = model_fingerprint(model) if fingerprint is None else fingerprint
    if fp != record.model_fingerprint:
        raise IntegrityError(
            f"model fingerprint {fp[:12]} does not match calibration record {record.model_fingerprint[:12]}"
        )


def check_settings(record: CalibrationRecord, cfg: Optional[CalibrationConfig]):
    """Deployment must use the calibration's (m, K, tau, mode) exactly."""
    if cfg is None:
        return
    if cfg.test_settings() != record.config.test_settings():
        raise ConfigMismatchError(
            "deployment settings (m, K, tau, mode) = %r differ from calibration %r"
            % (cfg.test_settings(), record.config.test_settings())
        )


def decide(phi_tilde, record: CalibrationRecord, alpha, window_id=0, ts=0.0) -> MonitorVerdict:
    threshold = quantile(record.phi, 1.0 - alpha)
    return MonitorVerdict(window_id, float(phi_tilde), threshold, float(alpha),
                          bool(phi_tilde >= threshold), record.config.m, float(ts))


def verdict(model: TrainedModel, record: CalibrationRecord, batch, alpha, rng, config=None,
            window_id=0, clock: Callable[[], float] = time.time, fingerprint=None) -> MonitorVerdict:
    _check_alpha(alpha)
    check_integrity(model, record, fingerprint)
    check_settings(record, config)
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] != record.config.m:
        raise ConfigMismatchError(f"batch has {batch.shape[0]} rows, calibration used m={record.config.m}")
    phi_tilde = max_disagreement(model, batch, record.config, rng)
    return decide(phi_tilde, record, alpha, window_id, clock())


@dataclass(frozen=True)
class GateReport:
    fpr: float
    passed: bool
    alpha: float
    trials: int
    flags: int
    threshold: float

    def to_dict(self):
        return asdict(self)


def validate_id_fpr(model: TrainedModel, record: CalibrationRecord, validation, alpha, trials=500,
                    seed=0) -> GateReport:
    """Flag rate on bootstrap windows from an ID pool disjoint from calibration.

    Trial ``i`` uses the stream ``default_rng([seed, i])``. Passes when the
    estimate is at most ``alpha``.
    """
    _check_alpha(alpha)
    if trials < 100:
        raise InputError(f"trials must be >= 100, got {trials}")
    check_integrity(model, record)
    validation = np.atleast_2d(np.asarray(validation, dtype=np.float64))
    n_pool = validation.shape[0]
    if n_pool == 0:
        raise InputError("validation pool is empty")
    cfg = record.config
    if n_pool < cfg.m:
        log.warning("validation pool (%d) smaller than window size m=%d", n_pool, cfg.m)
    q = posterior(model, validation)
    threshold = quantile(record.phi, 1.0 - alpha)
    flags = 0
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        idx = rng.integers(0, n_pool, size=cfg.m)
        phi_tilde = max_disagreement_from_posterior(q[idx], cfg.K, cfg.tau, rng, cfg.mode)
        flags += phi_tilde >= threshold
    fpr = flags / trials
    return GateReport(fpr, bool(fpr <= alpha), float(alpha), trials, int(flags), threshold)


@dataclass
class MonitorState:
    """FIFO windowing of a deployment stream; emits one verdict per ``m`` inputs.

    Window ``j`` is scored with ``default_rng([seed, j])``.
    """
    model: TrainedModel
    record: CalibrationRecord
    alpha: float = 0.10
    seed: int = 0
    clock: Callable[[], float] = time.time
    buffer: List[np.ndarray] = field(default_factory=list)
    window_count: int = 0

    def __post_init__(self):
        _check_alpha(self.alpha)
        self._fingerprint = model_fingerprint(self.model)
        check_integrity(self.model, self.record, self._fingerprint)

    @property
    def m(self) -> int:
        return self.record.config.m

    def push(self, x) -> Optional[MonitorVerdict]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.model.input_dim,):
            raise ShapeError(f"expected an input of {self.model.input_dim} features, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InputError("input contains non-finite values")
        self.buffer.append(x)
        if len(self.buffer) < self.m:
            return None
        batch = np.stack(self.buffer)
        self.buffer = []
        window_id = self.window_count
        self.window_count += 1
        rng = np.random.default_rng([self.seed, window_id])
        return verdict(self.model, self.record, batch, self.alpha, rng, window_id=window_id,
                       clock=self.clock, fingerprint=self._fingerprint)


def monitor_stream(state: MonitorState, inputs) -> List[MonitorVerdict]:
    """Feed one input or a batch of inputs; return the verdicts completed along the way."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    out = []
    for row in inputs:
        v = state.push(row)
        if v is not None:
            out.append(v)
    return out
