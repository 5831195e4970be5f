"""ELBO training of the feature extractor plus Gaussian-logit head, evaluation and model files."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import ArtifactError, InputError, NumericError
from .nn import (
    FeatureExtractorParams,
    adamw_step,
    draw_dropout_masks,
    fe_backward,
    fe_forward,
    init_adamw,
    init_feature_extractor,
)
from .vbll import (
    GaussianLogitPosterior,
    HeadParams,
    elbo_terms,
    head_backward,
    head_posterior,
    init_head,
    mean_predict,
)

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    hidden_dim: int = 16
    num_hidden: int = 4
    dropout: float = 0.2
    regularization_factor: float = 100.0
    prior_scale: float = 1.0
    # carried for provenance only; the diagonal head has no Wishart prior
    wishart_scale: float = 1.0
    skip_connections: bool = True
    mc_samples: int = 8
    seed: int = 0

    def __post_init__(self):
        positive = ["learning_rate", "batch_size", "hidden_dim", "num_hidden", "prior_scale", "mc_samples"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0 or self.weight_decay < 0 or self.regularization_factor < 0:
            raise InputError("epochs, weight_decay and regularization_factor must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainedModel:
    fe: FeatureExtractorParams
    head: HeadParams
    num_classes: int
    input_dim: int
    config: TrainConfig
    n: int
    input_mean: np.ndarray = field(default=None)
    input_std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.input_mean is None:
            object.__setattr__(self, "input_mean", np.zeros(self.input_dim))
        if self.input_std is None:
            object.__setattr__(self, "input_std", np.ones(self.input_dim))

    @property
    def kl_weight(self) -> float:
        return self.head.kl_weight

    def with_n(self, n: int) -> "TrainedModel":
        """Same weights with a new training-set size; the KL weight follows n."""
        head = replace(self.head, kl_weight=self.config.regularization_factor / n)
        return replace(self, n=n, head=head)

    def arrays(self):
        out = dict(self.fe.to_dict())
        out.update(self.head.to_dict())
        return out


def standardize(model: TrainedModel, x):
    return (np.asarray(x, dtype=np.float64) - model.input_mean) / model.input_std


def posterior(model: TrainedModel, x) -> GaussianLogitPosterior:
    """Inference-mode posterior over logits for a batch (dropout off)."""
    psi = fe_forward(model.fe, standardize(model, np.atleast_2d(x)))
    return head_posterior(model.head, psi)


def loss_and_grads(model: TrainedModel, x, y, noise, masks=None):
    """Mean negative ELBO over a batch and gradients w.r.t. every parameter.

    ``x`` must already be standardized. ``noise`` has shape ``(K_mc, batch, C)``
    and ``masks`` (one per layer, or None) fixes the dropout pattern, so the
    value is a deterministic function of the parameters.
    """
    train_mode = masks is not None
    # overflow is detected below and reported with its batch index
    with np.errstate(over="ignore", invalid="ignore"):
        psi, cache = fe_forward(model.fe, x, train_mode=train_mode, masks=masks, return_cache=True)
        q = head_posterior(model.head, psi)
        per_example, dmu, dlv = elbo_terms(q, y, noise, model.head.kl_weight, model.head.prior_scale)
    bad = np.flatnonzero(~np.isfinite(per_example))
    if bad.size:
        raise NumericError(f"non-finite loss at batch index {int(bad[0])}", index=int(bad[0]))
    batch = x.shape[0]
    dmu, dlv = dmu / batch, dlv / batch
    grads, dpsi = head_backward(model.head, psi, dmu, dlv)
    grads.update(fe_backward(model.fe, cache, dpsi))
    return float(per_example.mean()), grads


def init_model(config: TrainConfig, input_dim, num_classes, n, rng) -> TrainedModel:
    fe = init_feature_extractor(rng, input_dim, config.hidden_dim, config.num_hidden,
                                config.dropout, config.skip_connections)
    head = init_head(rng, config.hidden_dim, num_classes, config.prior_scale,
                     config.regularization_factor / n)
    return TrainedModel(fe, head, num_classes, input_dim, config, n)


def _with_arrays(model: TrainedModel, arrays) -> TrainedModel:
    return replace(model, fe=model.fe.with_arrays(arrays), head=model.head.with_arrays(arrays))


def train(config: TrainConfig, x, y, rng=None, num_classes=None, standardize_inputs=True,
          history=None) -> TrainedModel:
    """Fit by minimizing the mean negative ELBO over shuffled mini-batches.

    ``rng`` defaults to a generator seeded from ``config.seed``. Labels are
    integers ``0..C-1``; C is inferred unless given. If ``history`` is a list,
    per-batch losses are appended to it.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("training data must be a nonempty 2-D array")
    if y.shape != (x.shape[0],):
        raise InputError(f"expected {x.shape[0]} labels, got shape {y.shape}")
    if y.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InputError("labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0):
        raise InputError("labels must be nonnegative")
    if num_classes is None:
        num_classes = max(int(y.max()) + 1, 2)
    if np.any(y >= num_classes):
        raise InputError(f"labels must be < {num_classes}")
    if not np.all(np.isfinite(x)):
        raise InputError("training inputs contain non-finite values")
    n, d = x.shape
    if n < config.batch_size:
        log.warning("training set (%d) smaller than batch size (%d)", n, config.batch_size)
    rng = np.random.default_rng(config.seed) if rng is None else rng

    model = init_model(config, d, num_classes, n, rng)
    if standardize_inputs:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        model = replace(model, input_mean=mean, input_std=std)
    xs = standardize(model, x)

    arrays = model.arrays()
    opt = init_adamw(arrays, config.learning_rate, config.weight_decay)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            masks = draw_dropout_masks(model.fe, idx.size, rng)
            noise = rng.standard_normal((config.mc_samples, idx.size, num_classes))
            loss, grads = loss_and_grads(model, xs[idx], y[idx], noise, masks)
            if history is not None:
                history.append(loss)
            total += loss * idx.size
            arrays, opt = adamw_step(arrays, grads, opt)
            model = _with_arrays(model, arrays)
        log.debug("epoch %d mean loss %.5f", epoch, total / n)
    return model


def predict(model: TrainedModel, x, k, rng, chunk=4096):
    """Base-model labels (argmax of the MC posterior predictive), chunked over rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], chunk):
        q = posterior(model, x[start:start + chunk])
        out[start:start + chunk] = mean_predict(q, k, rng)
    return out


def evaluate(model: TrainedModel, x, y, k=1000, rng=None) -> float:
    """Fraction of rows where the base-model label differs from ``y``."""
    y = np.asarray(y)
    if y.size == 0:
        raise InputError("cannot evaluate on an empty dataset")
    rng = np.random.default_rng(0) if rng is None else rng
    return float(np.mean(predict(model, x, k, rng) != y))


def model_to_dict(model: TrainedModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "config": asdict(model.config),
        "n": model.n,
        "C": model.num_classes,
        "input_dim": model.input_dim,
        "num_layers": model.fe.num_hidden,
        "input_mean": model.input_mean.tolist(),
        "input_std": model.input_std.tolist(),
        "parameters": {k: v.tolist() for k, v in sorted(model.arrays().items())},
    }


def model_from_dict(d: dict) -> TrainedModel:
    version = d.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ArtifactError(f"unsupported model format version {version!r}")
    try:
        config = TrainConfig.from_dict(d["config"])
        params = {k: np.asarray(v, dtype=np.float64) for k, v in d["parameters"].items()}
        layers = tuple(
            (params[f"fe.{i}.weight"], params[f"fe.{i}.bias"]) for i in range(d["num_layers"])
        )
        fe = FeatureExtractorParams(layers, config.dropout, config.skip_connections)
        n = int(d["n"])
        head = HeadParams(params["head.mu.weight"], params["head.mu.bias"],
                          params["head.logvar.weight"], params["head.logvar.bias"],
                          config.prior_scale, config.regularization_factor / n)
        return TrainedModel(fe, head, int(d["C"]), int(d["input_dim"]), config, n,
                            np.asarray(d["input_mean"], dtype=np.float64),
                            np.asarray(d["input_std"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"malformed model file: {exc}") from exc


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def model_fingerprint(model: TrainedModel) -> str:
    return hashlib.sha256(canonical_json(model_to_dict(model)).encode()).hexdigest()


def save_model(model: TrainedModel, path) -> str:
    """Write the model as JSON and return its fingerprint."""
    text = canonical_json(model_to_dict(model))
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text + "\n")
    os.replace(tmp, path)
    return hashlib.sha256(text.encode()).hexdigest()


def load_model(path) -> TrainedModel:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: corrupt model file ({exc})") from exc
    if not isinstance(data, dict):
        raise ArtifactError(f"{path}: model file is not a JSON object")
    return model_from_dict(data)
