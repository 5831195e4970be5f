"""Gaussian logit-posterior head: q(z|x) = N(mu(psi), diag(exp(log_var(psi)))).

Labels are zero-based class indices ``0..C-1``. Every argmax in the package
breaks ties toward the lowest index (numpy's ``argmax`` already does).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, ShapeError
from .nn import Params, glorot_uniform


@dataclass(frozen=True)
class GaussianLogitPosterior:
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ShapeError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ")

    @property
    def var(self):
        return np.exp(self.log_var)

    @property
    def std(self):
        return np.exp(0.5 * self.log_var)

    @property
    def num_classes(self) -> int:
        return self.mu.shape[-1]

    def __getitem__(self, idx) -> "GaussianLogitPosterior":
        return GaussianLogitPosterior(self.mu[idx], self.log_var[idx])

    def __len__(self):
        return self.mu.shape[0]


@dataclass(frozen=True)
class HeadParams:
    mu_weight: np.ndarray
    mu_bias: np.ndarray
    logvar_weight: np.ndarray
    logvar_bias: np.ndarray
    prior_scale: float = 1.0
    kl_weight: float = 0.0

    def __post_init__(self):
        c, h = self.mu_weight.shape
        if self.logvar_weight.shape != (c, h) or self.mu_bias.shape != (c,) or self.logvar_bias.shape != (c,):
            raise ShapeError("head weight/bias shapes are inconsistent")
        if self.prior_scale <= 0:
            raise ValueError("prior_scale must be positive")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.mu_weight.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.mu_weight.shape[1]

    def to_dict(self) -> Params:
        return {
            "head.mu.weight": self.mu_weight,
            "head.mu.bias": self.mu_bias,
            "head.logvar.weight": self.logvar_weight,
            "head.logvar.bias": self.logvar_bias,
        }

    def with_arrays(self, arrays: Params) -> "HeadParams":
        return replace(
            self,
            mu_weight=arrays["head.mu.weight"],
            mu_bias=arrays["head.mu.bias"],
            logvar_weight=arrays["head.logvar.weight"],
            logvar_bias=arrays["head.logvar.bias"],
        )


def init_head(rng, hidden_dim, num_classes, prior_scale=1.0, kl_weight=0.0) -> HeadParams:
    # log-variance bias starts at 0, i.e. unit variance
    return HeadParams(
        glorot_uniform(rng, num_classes, hidden_dim),
        np.zeros(num_classes),
        glorot_uniform(rng, num_classes, hidden_dim),
        np.zeros(num_classes),
        prior_scale,
        kl_weight,
    )


def head_posterior(head: HeadParams, psi) -> GaussianLogitPosterior:
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape[-1] != head.hidden_dim:
        raise ShapeError(f"head expects {head.hidden_dim} features, got {psi.shape[-1]}")
    mu = psi @ head.mu_weight.T + head.mu_bias
    log_var = psi @ head.logvar_weight.T + head.logvar_bias
    return GaussianLogitPosterior(mu, log_var)


def head_backward(head: HeadParams, psi, dmu, dlogvar):
    """Parameter gradients and dL/dpsi for upstream backprop."""
    grads = {
        "head.mu.weight": dmu.T @ psi,
        "head.mu.bias": dmu.sum(axis=0),
        "head.logvar.weight": dlogvar.T @ psi,
        "head.logvar.bias": dlogvar.sum(axis=0),
    }
    dpsi = dmu @ head.mu_weight + dlogvar @ head.logvar_weight
    return grads, dpsi


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def kl_to_prior(q: GaussianLogitPosterior, prior_scale=1.0):
    """KL[q || N(0, s^2 I)], summed over classes. Batched posteriors give one value per row."""
    s2 = float(prior_scale) ** 2
    ratio = q.var / s2
    kl = 0.5 * (ratio + q.mu ** 2 / s2 - 1.0 - np.log(ratio))
    return kl.sum(axis=-1)


def elbo_terms(q: GaussianLogitPosterior, y, noise, kl_weight, prior_scale=1.0):
    """Per-example negative ELBO and its gradients w.r.t. mu and log_var.

    ``noise`` holds the standard-normal draws with shape ``(K_mc, batch, C)``;
    samples are z = mu + exp(log_var / 2) * noise.
    Returns ``(loss[batch], dloss/dmu, dloss/dlog_var)``.
    """
    mu, log_var = np.atleast_2d(q.mu), np.atleast_2d(q.log_var)
    y = np.atleast_1d(np.asarray(y))
    batch, c = mu.shape
    if y.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {y.shape}")
    if y.dtype.kind not in "iu" or np.any(y < 0) or np.any(y >= c):
        raise InputError(f"labels must be integers in [0, {c - 1}]")
    noise = np.asarray(noise)
    if noise.ndim == 2:
        noise = noise[:, None, :]
    k_mc = noise.shape[0]
    if noise.shape[1:] != mu.shape:
        raise ShapeError(f"noise shape {noise.shape} does not match posterior {mu.shape}")

    std = np.exp(0.5 * log_var)
    z = mu + std * noise
    logp = log_softmax(z)
    rows = np.arange(batch)
    nll = -logp[:, rows, y].mean(axis=0)

    onehot = np.zeros((batch, c))
    onehot[rows, y] = 1.0
    dz = (np.exp(logp) - onehot) / k_mc
    dmu = dz.sum(axis=0)
    dlog_var = (dz * noise).sum(axis=0) * 0.5 * std

    s2 = float(prior_scale) ** 2
    var = std * std
    kl = 0.5 * (var / s2 + mu ** 2 / s2 - 1.0 - log_var + np.log(s2)).sum(axis=-1)
    loss = nll + kl_weight * kl
    dmu = dmu + kl_weight * mu / s2
    dlog_var = dlog_var + kl_weight * 0.5 * (var / s2 - 1.0)
    return loss, dmu, dlog_var


def elbo_loss(q: GaussianLogitPosterior, y, k_mc=8, rng=None, kl_weight=0.0, prior_scale=1.0,
              noise=None):
    """Mean negative ELBO over the batch, Monte-Carlo estimated with ``k_mc`` samples."""
    if k_mc < 1:
        raise InputError("k_mc must be >= 1")
    shape = np.atleast_2d(q.mu).shape
    if noise is None:
        noise = rng.standard_normal((k_mc,) + shape)
    loss, _, _ = elbo_terms(q, y, noise, kl_weight, prior_scale)
    return float(loss.mean())


def sample_logits(q: GaussianLogitPosterior, k, rng, noise=None):
    """``k`` reparameterized draws; shape ``(k,) + mu.shape``."""
    if k < 1:
        raise InputError("k must be >= 1")
    if noise is None:
        noise = rng.standard_normal((k,) + q.mu.shape)
    return q.mu + q.std * noise


def predictive_probs(q: GaussianLogitPosterior, k, rng, noise=None):
    """Monte-Carlo estimate of E_z[softmax(z)] for every posterior in ``q``."""
    return softmax(sample_logits(q, k, rng, noise)).mean(axis=0)


def mean_predict(q: GaussianLogitPosterior, k, rng, noise=None):
    """Base-model label: argmax of the MC posterior predictive (ties to lowest index)."""
    return np.argmax(predictive_probs(q, k, rng, noise), axis=-1)
