"""Intrinsic rewards from a learned dynamics model.

Every scheme returns *raw* per-transition bonuses; ``normalize_eta`` and
``apply_bonus`` turn them into reshaped rewards ``r + eta * (raw + shift)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import DynamicsModel, ModelState

logger = logging.getLogger(__name__)

SCHEMES = ("surprisal", "learning_progress", "pred_error", "random_surprisal", "none")


@dataclass
class BonusConfig:
    scheme: str = "surprisal"
    k: int = 1
    eta0: float = 1e-3
    nonnegative_shift: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown bonus scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")

    @classmethod
    def parse(cls, text, **kwargs):
        """Build from ``"name"`` or ``"name:k"`` (e.g. ``learning_progress:10``)."""
        name, _, k = text.partition(":")
        if k:
            kwargs["k"] = int(k)
        return cls(scheme=name, **kwargs)

    @property
    def label(self):
        return f"{self.scheme}:{self.k}" if self.scheme == "learning_progress" else self.scheme


@dataclass
class BonusReport:
    raw: np.ndarray
    eta: float
    shift: float

    @property
    def applied(self):
        return self.eta * (self.raw + self.shift)


def surprisal_bonus(model: DynamicsModel, s, a, s_next, state: Optional[ModelState] = None):
    """``-log P(s'|s,a)`` under the model, in the original state space."""
    return -model.log_prob(s, a, s_next, state)


def learning_progress_bonus(model: DynamicsModel, now: ModelState, past: ModelState, s, a, s_next):
    """``log P_now(s'|s,a) - log P_past(s'|s,a)``; can be negative."""
    return model.log_prob(s, a, s_next, now) - model.log_prob(s, a, s_next, past)


def pred_error_bonus(model: DynamicsModel, s, a, s_next, state: Optional[ModelState] = None):
    """Euclidean distance from ``s'`` to the predicted mean."""
    mean = model.predict(s, a, state)
    return np.linalg.norm(np.asarray(s_next, dtype=np.float64).reshape(mean.shape) - mean, axis=1)


def random_surprisal_bonus(frozen: ModelState, model: DynamicsModel, s, a, s_next):
    """Surprisal against the initial random parameters, never updated."""
    return surprisal_bonus(model, s, a, s_next, frozen)


def normalize_eta(raw, eta0):
    """``eta0 / max(1, |mean(raw)|)``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot normalise eta on an empty batch")
    mean = float(raw.mean())
    std = float(raw.std())
    if std / (abs(mean) + 1.0) > 100.0:
        logger.warning("bonus spread %.3g dwarfs its mean %.3g; eta may spike", std, mean)
    return eta0 / max(1.0, abs(mean))


def apply_bonus(rewards_ext, raw, eta, nonnegative_shift=False):
    """Return ``(reshaped, shift)`` with ``reshaped = r + eta * (raw + shift)``."""
    rewards_ext = np.asarray(rewards_ext, dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    if rewards_ext.shape != raw.shape:
        raise ValueError("rewards and bonuses differ in shape")
    shift = max(0.0, -float(raw.mean())) if nonnegative_shift and raw.size else 0.0
    return rewards_ext + eta * (raw + shift), shift


def compute_raw_bonus(config: BonusConfig, model: DynamicsModel, s, a, s_next,
                      frozen: Optional[ModelState] = None):
    """Dispatch on ``config.scheme`` using the model's current state.

    For learning progress with an empty snapshot history the current state
    is its own baseline, so the bonus is zero.
    """
    scheme = config.scheme
    n = np.asarray(s).shape[0]
    if scheme == "none":
        return np.zeros(n)
    if scheme == "surprisal":
        return surprisal_bonus(model, s, a, s_next)
    if scheme == "pred_error":
        return pred_error_bonus(model, s, a, s_next)
    if scheme == "random_surprisal":
        if frozen is None:
            raise ValueError("random_surprisal needs the frozen initial state")
        return random_surprisal_bonus(frozen, model, s, a, s_next)
    now = model.state
    past = model.snapshots_.get(config.k) if len(model.snapshots_) else now
    return learning_progress_bonus(model, now, past, s, a, s_next)


def reshape_rewards(config: BonusConfig, rewards_ext, raw):
    """Normalise eta on this batch and reshape; returns ``(rewards, BonusReport)``."""
    if config.scheme == "none":
        raw = np.zeros_like(np.asarray(rewards_ext, dtype=np.float64))
        return np.asarray(rewards_ext, dtype=np.float64).copy(), BonusReport(raw, 0.0, 0.0)
    eta = normalize_eta(raw, config.eta0)
    reshaped, shift = apply_bonus(rewards_ext, raw, eta, config.nonnegative_shift)
    return reshaped, BonusReport(np.asarray(raw, dtype=np.float64), eta, shift)
