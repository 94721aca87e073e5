"""Distribution algebra for network outputs.

All functions are row-wise: parameters carry a leading batch axis and the
results have shape ``(batch,)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class DiagGaussian:
    """Fully factored Gaussian; ``log_std`` is clamped on construction."""

    mean: np.ndarray
    log_std: np.ndarray
    log_std_min: float = LOG_STD_MIN
    log_std_max: float = LOG_STD_MAX

    def __post_init__(self):
        self.mean = np.atleast_2d(np.asarray(self.mean, dtype=np.float64))
        log_std = np.broadcast_to(
            np.asarray(self.log_std, dtype=np.float64), self.mean.shape)
        self.log_std = np.clip(log_std, self.log_std_min, self.log_std_max)

    @property
    def std(self):
        return np.exp(self.log_std)

    @property
    def dim(self):
        return self.mean.shape[1]

    def sample(self, rng):
        return self.mean + self.std * rng.standard_normal(self.mean.shape)


@dataclass
class Categorical:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.atleast_2d(np.asarray(self.logits, dtype=np.float64))

    @property
    def probs(self):
        return softmax(self.logits, axis=1)

    @property
    def log_probs(self):
        return log_softmax(self.logits, axis=1)

    def sample(self, rng):
        cdf = np.cumsum(self.probs, axis=1)
        u = rng.random((cdf.shape[0], 1))
        return np.minimum((u > cdf).sum(axis=1), cdf.shape[1] - 1)


def gaussian_log_prob(p: DiagGaussian, x, per_dim=False):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape != p.mean.shape:
        raise ValueError(f"x shape {x.shape} does not match {p.mean.shape}")
    z = (x - p.mean) / p.std
    terms = -0.5 * z ** 2 - p.log_std - 0.5 * LOG_2PI
    return terms if per_dim else terms.sum(axis=1)


def gaussian_kl(p: DiagGaussian, q: DiagGaussian):
    """Row-wise ``KL(p || q)``."""
    var_p = np.exp(2.0 * p.log_std)
    var_q = np.exp(2.0 * q.log_std)
    terms = (q.log_std - p.log_std
             + (var_p + (p.mean - q.mean) ** 2) / (2.0 * var_q) - 0.5)
    return terms.sum(axis=1)


def gaussian_entropy(p: DiagGaussian):
    return (p.log_std + 0.5 * (LOG_2PI + 1.0)).sum(axis=1)


def categorical_log_prob(p: Categorical, idx):
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    return p.log_probs[np.arange(idx.size), idx]


def categorical_kl(p: Categorical, q: Categorical):
    return (p.probs * (p.log_probs - q.log_probs)).sum(axis=1)


def categorical_entropy(p: Categorical):
    return -(p.probs * p.log_probs).sum(axis=1)


def gaussian_fisher_diag(p: DiagGaussian):
    """Diagonal of the Fisher metric over ``(mean, log_std)`` coordinates.

    Returns shape ``(batch, 2n)``.
    """
    return np.concatenate(
        [np.exp(-2.0 * p.log_std), np.full_like(p.log_std, 2.0)], axis=1)


def fisher_metric(p):
    """Dense per-row Fisher matrix over the distribution parameters.

    Gaussian: ``diag(1/sigma^2, 2)`` over ``(mean, log_std)``.
    Categorical: ``diag(softmax) - p p^T`` over the logits.
    """
    if isinstance(p, DiagGaussian):
        diag = gaussian_fisher_diag(p)
        out = np.zeros(diag.shape + (diag.shape[1],))
        idx = np.arange(diag.shape[1])
        out[:, idx, idx] = diag
        return out
    if isinstance(p, Categorical):
        probs = p.probs
        return (np.einsum("bi,ij->bij", probs, np.eye(probs.shape[1]))
                - probs[:, :, None] * probs[:, None, :])
    raise TypeError(f"no Fisher metric for {type(p).__name__}")
