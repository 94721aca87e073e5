"""Sparse-reward control tasks.

The ``*_step`` functions are pure and vectorised over a leading batch axis.
The :class:`Env` subclasses wrap them with reset distributions, agent-facing
action scaling (continuous agents act in ``[-1, 1]``) and a registry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple, Type

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_kind: str  # "continuous" or "discrete"
    action_dim: int  # vector size, or number of choices when discrete
    max_episode_len: int = 500
    action_low: Tuple[float, ...] = ()
    action_high: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.action_kind not in ("continuous", "discrete"):
            raise ValueError(f"unknown action kind {self.action_kind!r}")
        if self.action_kind == "continuous":
            lo, hi = np.asarray(self.action_low, float), np.asarray(self.action_high, float)
            if lo.shape != (self.action_dim,) or hi.shape != (self.action_dim,):
                raise ValueError("continuous actions need one bound per dimension")
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
                raise ValueError("action bounds must be finite with low < high")

    @property
    def discrete(self):
        return self.action_kind == "discrete"


# -- physics ------------------------------------------------------------------
MC_POWER = 0.001
MC_GRAVITY = 0.0025
MC_MAX_SPEED = 0.07
MC_MIN_POS, MC_MAX_POS, MC_GOAL = -1.2, 0.6, 0.6


def mountaincar_step(state, force):
    """Continuous mountain car; reward 1 and termination on escaping right."""
    state = np.asarray(state, dtype=np.float64)
    p, v = state[..., 0], state[..., 1]
    a = np.clip(np.asarray(force, dtype=np.float64).reshape(p.shape), -1.0, 1.0)
    v = np.clip(v + MC_POWER * a - MC_GRAVITY * np.cos(3.0 * p), -MC_MAX_SPEED, MC_MAX_SPEED)
    p = np.clip(p + v, MC_MIN_POS, MC_MAX_POS)
    done = p >= MC_GOAL
    return np.stack([p, v], axis=-1), done.astype(np.float64), done


CP_CART_MASS = 0.5
CP_POLE_MASS = 0.5
CP_POLE_LENGTH = 0.6
CP_GRAVITY = 9.82
CP_DT = 0.02
CP_TRACK_HALF = 3.0
CP_MAX_FORCE = 10.0


def cartpole_swingup_step(state, force):
    """Cart-pole with the angle measured from upright (pole starts hanging).

    Semi-implicit Euler at ``CP_DT``; reward 1 iff ``cos(beta') > 0.8``;
    terminates when the cart leaves the track.
    """
    state = np.asarray(state, dtype=np.float64)
    x, x_dot, th, th_dot = (state[..., i] for i in range(4))
    f = np.clip(np.asarray(force, dtype=np.float64).reshape(x.shape), -CP_MAX_FORCE, CP_MAX_FORCE)
    half = 0.5 * CP_POLE_LENGTH
    total = CP_CART_MASS + CP_POLE_MASS
    sin, cos = np.sin(th), np.cos(th)
    temp = (f + CP_POLE_MASS * half * th_dot ** 2 * sin) / total
    th_acc = (CP_GRAVITY * sin - cos * temp) / (half * (4.0 / 3.0 - CP_POLE_MASS * cos ** 2 / total))
    x_acc = temp - CP_POLE_MASS * half * th_acc * cos / total
    x_dot = x_dot + CP_DT * x_acc
    x = x + CP_DT * x_dot
    th_dot = th_dot + CP_DT * th_acc
    th = th + CP_DT * th_dot
    reward = (np.cos(th) > 0.8).astype(np.float64)
    done = np.abs(x) > CP_TRACK_HALF
    return np.stack([x, x_dot, th, th_dot], axis=-1), reward, done


CHAIN_LENGTH = 40
CHAIN_SUCCESS = 0.8


def noisychain_step(cell, action, u, n_cells=CHAIN_LENGTH, p_success=CHAIN_SUCCESS):
    """Move along the chain; ``action`` is 0 (left) or 1 (right).

    The move happens when the uniform draw ``u < p_success``. Reaching cell
    ``n_cells`` pays 1 and ends the episode; falling off the left end
    (cell 0) ends it with no reward.
    """
    cell = np.asarray(cell, dtype=np.int64)
    move = np.where(np.asarray(action).reshape(cell.shape) == 1, 1, -1)
    moved = np.asarray(u).reshape(cell.shape) < p_success
    cell = cell + np.where(moved, move, 0)
    goal = cell >= n_cells
    done = goal | (cell < 1)
    return cell, goal.astype(np.float64), done


# -- environments ---------------------------------------------------------------
class Env:
    """Batch-of-instances wrapper; each instance owns a ``numpy`` Generator."""

    spec: EnvSpec

    def reset_batch(self, rngs):
        raise NotImplementedError

    def step_batch(self, states, actions, rngs):
        """Advance each instance; returns ``(states', rewards, dones)``."""
        raise NotImplementedError

    def observe(self, states):
        return np.asarray(states, dtype=np.float64)

    def scale_action(self, actions):
        """Map agent actions in ``[-1, 1]`` onto the physical bounds."""
        lo = np.asarray(self.spec.action_low)
        hi = np.asarray(self.spec.action_high)
        a = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
        return lo + (a + 1.0) * 0.5 * (hi - lo)

    # single-instance convenience API
    def reset(self, seed=None):
        self._rng = np.random.default_rng(seed)
        self._state = self.reset_batch([self._rng])
        self._t = 0
        return self.observe(self._state)[0]

    def step(self, action):
        action = np.asarray(action)[None]
        self._state, r, d = self.step_batch(self._state, action, [self._rng])
        self._t += 1
        done = bool(d[0]) or self._t >= self.spec.max_episode_len
        return self.observe(self._state)[0], float(r[0]), done


class SparseMountainCar(Env):
    spec = EnvSpec("sparse-mountaincar", 2, "continuous", 1, 500, (-1.0,), (1.0,))

    def reset_batch(self, rngs):
        return np.array([[rng.uniform(-0.6, -0.4), 0.0] for rng in rngs])

    def step_batch(self, states, actions, rngs):
        force = self.scale_action(np.asarray(actions).reshape(len(states), 1))[:, 0]
        return mountaincar_step(states, force)


class SparseCartpoleSwingup(Env):
    spec = EnvSpec("sparse-cartpole-swingup", 4, "continuous", 1, 500,
                   (-CP_MAX_FORCE,), (CP_MAX_FORCE,))

    def reset_batch(self, rngs):
        return np.array([[0.0, 0.0, np.pi + rng.uniform(-0.05, 0.05), 0.0] for rng in rngs])

    def step_batch(self, states, actions, rngs):
        force = self.scale_action(np.asarray(actions).reshape(len(states), 1))[:, 0]
        return cartpole_swingup_step(states, force)


class NoisyChain(Env):
    """Observation is ``(cell / n_cells, 1)``; start at cell 1."""

    spec = EnvSpec("noisy-chain", 2, "discrete", 2, 500)

    def __init__(self, n_cells=CHAIN_LENGTH, p_success=CHAIN_SUCCESS):
        self.n_cells = n_cells
        self.p_success = p_success

    def reset_batch(self, rngs):
        return np.ones(len(rngs), dtype=np.int64)

    def step_batch(self, states, actions, rngs):
        u = np.array([rng.random() for rng in rngs])
        return noisychain_step(states, np.asarray(actions).reshape(-1), u,
                               self.n_cells, self.p_success)

    def observe(self, states):
        cells = np.asarray(states, dtype=np.float64).reshape(-1)
        return np.stack([cells / self.n_cells, np.ones_like(cells)], axis=1)


ENV_REGISTRY: Dict[str, Type[Env]] = {
    "sparse-mountaincar": SparseMountainCar,
    "sparse-cartpole-swingup": SparseCartpoleSwingup,
    "noisy-chain": NoisyChain,
}


def make_env(name: str) -> Env:
    try:
        return ENV_REGISTRY[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(ENV_REGISTRY)}") from None


def env_reset(name: str, seed):
    """Initial physical state of ``name`` for ``seed``."""
    env = make_env(name)
    return env.reset_batch([np.random.default_rng(seed)])[0]
