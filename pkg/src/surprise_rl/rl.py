"""Policies, rollouts, GAE, TRPO steps and value baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.signal import lfilter
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dist import (
    LOG_STD_MAX, LOG_STD_MIN, Categorical, DiagGaussian, categorical_entropy,
    categorical_kl, categorical_log_prob, gaussian_entropy, gaussian_kl, gaussian_log_prob,
)
from .envs import Env
from .numkit import (
    MlpSpec, ParamVector, gauss_newton_vector_product, mlp_backward,
    mlp_forward, mlp_init, mlp_jvp,
)
from .trustregion import TrustRegionConfig, TrustRegionProblem, solve_step


# -- policies -----------------------------------------------------------------
class GaussianMLPPolicy:
    """Diagonal Gaussian whose mean is a tanh MLP; log-std is a free vector."""

    discrete = False

    def __init__(self, obs_dim, act_dim, hidden_sizes=(32,), init_log_std=0.0, seed=0):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.spec = MlpSpec(obs_dim, tuple(hidden_sizes), act_dim, seed=seed)
        net = mlp_init(self.spec)
        self._n_net = len(net)
        self._net_layout = net.layout
        self.params = ParamVector.pack(
            [(s.name, a) for s, a in zip(net.layout, net.unpack().values())]
            + [("log_std", np.full(act_dim, float(init_log_std)))])

    @property
    def theta(self):
        return self.params.data

    def set_theta(self, theta):
        self.params = self.params.with_data(theta)

    def _split(self, theta):
        theta = self.theta if theta is None else np.asarray(theta, dtype=np.float64)
        return ParamVector(theta[:self._n_net], self._net_layout), theta[self._n_net:]

    def dist(self, obs, theta=None) -> DiagGaussian:
        net, log_std = self._split(theta)
        mean = mlp_forward(net, self.spec, obs)
        return DiagGaussian(mean, np.broadcast_to(log_std, mean.shape))

    def sample(self, obs, rng):
        return self.dist(obs).sample(rng)

    def log_prob(self, obs, actions, theta=None):
        return gaussian_log_prob(self.dist(obs, theta), np.asarray(actions).reshape(-1, self.act_dim))

    def kl(self, obs, theta_old, theta_new):
        return gaussian_kl(self.dist(obs, theta_old), self.dist(obs, theta_new))

    def entropy(self, obs, theta=None):
        return gaussian_entropy(self.dist(obs, theta))

    def _free(self, theta):
        _, log_std = self._split(theta)
        return ((log_std > LOG_STD_MIN) & (log_std < LOG_STD_MAX)).astype(float)

    def weighted_score(self, obs, actions, weights, theta=None):
        """Gradient of ``mean(weights * log pi(a|s))`` w.r.t. the parameters."""
        net, _ = self._split(theta)
        d = self.dist(obs, theta)
        a = np.asarray(actions, dtype=np.float64).reshape(-1, self.act_dim)
        w = np.asarray(weights, dtype=np.float64).reshape(-1, 1) / a.shape[0]
        z = (a - d.mean) / d.std
        g_net, _ = mlp_backward(net, self.spec, obs, w * z / d.std)
        g_ls = (w * (z ** 2 - 1.0)).sum(axis=0) * self._free(theta)
        return np.concatenate([g_net.data, g_ls])

    def fisher_vp(self, obs, v, theta=None):
        net, _ = self._split(theta)
        d = self.dist(obs, theta)
        v_net = ParamVector(v[:self._n_net], self._net_layout)
        fv_net = gauss_newton_vector_product(net, self.spec, obs, np.exp(-2.0 * d.log_std), v_net)
        return np.concatenate([fv_net.data, 2.0 * self._free(theta) * v[self._n_net:]])


class CategoricalMLPPolicy:
    """Softmax over logits from a tanh MLP."""

    discrete = True

    def __init__(self, obs_dim, n_actions, hidden_sizes=(32,), seed=0):
        self.obs_dim, self.act_dim = obs_dim, n_actions
        self.spec = MlpSpec(obs_dim, tuple(hidden_sizes), n_actions, seed=seed)
        self.params = mlp_init(self.spec)

    @property
    def theta(self):
        return self.params.data

    def set_theta(self, theta):
        self.params = self.params.with_data(theta)

    def _net(self, theta):
        return self.params if theta is None else self.params.with_data(theta)

    def dist(self, obs, theta=None) -> Categorical:
        return Categorical(mlp_forward(self._net(theta), self.spec, obs))

    def sample(self, obs, rng):
        return self.dist(obs).sample(rng)

    def log_prob(self, obs, actions, theta=None):
        return categorical_log_prob(self.dist(obs, theta), actions)

    def kl(self, obs, theta_old, theta_new):
        return categorical_kl(self.dist(obs, theta_old), self.dist(obs, theta_new))

    def entropy(self, obs, theta=None):
        return categorical_entropy(self.dist(obs, theta))

    def weighted_score(self, obs, actions, weights, theta=None):
        d = self.dist(obs, theta)
        idx = np.asarray(actions, dtype=np.int64).reshape(-1)
        onehot = np.eye(self.act_dim)[idx]
        w = np.asarray(weights, dtype=np.float64).reshape(-1, 1) / idx.size
        g, _ = mlp_backward(self._net(theta), self.spec, obs, w * (onehot - d.probs))
        return g.data

    def fisher_vp(self, obs, v, theta=None):
        net = self._net(theta)
        probs = self.dist(obs, theta).probs
        _, Jv = mlp_jvp(net, self.spec, obs, net.with_data(v))
        MJv = probs * Jv - probs * (probs * Jv).sum(axis=1, keepdims=True)
        g, _ = mlp_backward(net, self.spec, obs, MJv / Jv.shape[0])
        return g.data


def make_policy(env_spec, hidden_sizes=(32,), init_log_std=0.0, seed=0):
    if env_spec.discrete:
        return CategoricalMLPPolicy(env_spec.obs_dim, env_spec.action_dim, hidden_sizes, seed)
    return GaussianMLPPolicy(env_spec.obs_dim, env_spec.action_dim, hidden_sizes,
                             init_log_std, seed)


# -- rollouts -----------------------------------------------------------------
@dataclass
class TrajectoryBatch:
    """Flattened on-policy experience plus episode boundaries.

    ``actions`` are what the policy emitted (integers for discrete actions);
    ``episode_slices[i]`` indexes the rows of episode ``i``; ``terminated``
    marks episodes that ended in an environment terminal state rather than
    at the length cap.
    """

    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    timesteps: np.ndarray
    episode_slices: List[slice]
    terminated: np.ndarray
    max_len: int
    rewards_shaped: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self):
        return self.obs.shape[0]

    @property
    def n_episodes(self):
        return len(self.episode_slices)

    def episode_returns(self, shaped=False):
        r = self.rewards_shaped if shaped else self.rewards
        return np.array([r[sl].sum() for sl in self.episode_slices])

    def episodes(self):
        """Yield ``(states, actions, r_ext, r_shaped, dones)`` per episode."""
        for sl in self.episode_slices:
            shaped = None if self.rewards_shaped is None else self.rewards_shaped[sl]
            yield self.obs[sl], self.actions[sl], self.rewards[sl], shaped, self.dones[sl]


def collect_rollouts(env: Env, policy, batch_size, max_len, seed=0, n_envs=None):
    """Run episodes until at least ``batch_size`` steps are collected.

    Several instances step in lockstep, each with its own seeded stream; a
    finished instance restarts only while the running step total is below
    ``batch_size``. Episodes are ordered by instance, then by start.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_envs = n_envs or max(1, math.ceil(batch_size / max_len))
    seq = np.random.SeedSequence(seed)
    act_seq, *env_seqs = seq.spawn(n_envs + 1)
    act_rng = np.random.default_rng(act_seq)
    env_rngs = [np.random.default_rng(s) for s in env_seqs]

    states = env.reset_batch(env_rngs)
    t = np.zeros(n_envs, dtype=np.int64)
    active = np.ones(n_envs, dtype=bool)
    buffers = [[] for _ in range(n_envs)]
    finished = [[] for _ in range(n_envs)]
    total = 0

    while active.any():
        idx = np.flatnonzero(active)
        obs = env.observe(states)[idx]
        acts = policy.sample(obs, act_rng)
        new_states, rew, done = env.step_batch(states[idx], acts, [env_rngs[i] for i in idx])
        next_obs = env.observe(new_states)
        states[idx] = new_states
        total += idx.size
        for j, i in enumerate(idx):
            buffers[i].append((obs[j], acts[j], next_obs[j], rew[j], bool(done[j]), t[i]))
        t[idx] += 1
        for j, i in enumerate(idx):
            if done[j] or t[i] >= max_len:
                finished[i].append((buffers[i], bool(done[j])))
                buffers[i] = []
                t[i] = 0
                if total < batch_size:
                    states[i] = env.reset_batch([env_rngs[i]])[0]
                else:
                    active[i] = False

    rows, slices, terminated, start = [], [], [], 0
    for per_env in finished:
        for steps, term in per_env:
            rows.extend(steps)
            slices.append(slice(start, start + len(steps)))
            terminated.append(term)
            start += len(steps)
    obs, acts, nxt, rew, dones, ts = zip(*rows)
    actions = np.array(acts)
    if actions.ndim == 1 and not policy.discrete:
        actions = actions.reshape(-1, 1)
    return TrajectoryBatch(
        obs=np.array(obs), actions=actions, next_obs=np.array(nxt),
        rewards=np.array(rew, dtype=np.float64), dones=np.array(dones),
        timesteps=np.array(ts), episode_slices=slices,
        terminated=np.array(terminated), max_len=max_len)


def model_actions(batch: TrajectoryBatch, env: Env):
    """Actions as the dynamics model sees them: one-hot or clipped to [-1, 1]."""
    if env.spec.discrete:
        return np.eye(env.spec.action_dim)[np.asarray(batch.actions, dtype=np.int64)]
    return np.clip(batch.actions, -1.0, 1.0)


# -- advantages -----------------------------------------------------------------
@dataclass
class GaeConfig:
    gamma: float = 0.995
    lam: float = 0.95


def discount_cumsum(x, factor):
    return lfilter([1.0], [1.0, -factor], np.asarray(x, dtype=np.float64)[::-1])[::-1]


def gae_advantages(batch: TrajectoryBatch, values, last_values, cfg: GaeConfig = GaeConfig(),
                   rewards=None, standardize=True):
    """GAE within episode boundaries.

    ``values[t]`` is ``V(s_t)``; ``last_values[i]`` is ``V`` of the final next
    state of episode ``i`` and is used only when that episode was truncated.
    Returns ``(advantages, returns)`` with ``returns = raw advantages + V``.
    """
    values = np.asarray(values, dtype=np.float64)
    rewards = batch.rewards if rewards is None else np.asarray(rewards, dtype=np.float64)
    adv = np.zeros_like(values)
    for i, sl in enumerate(batch.episode_slices):
        v = values[sl]
        boot = 0.0 if batch.terminated[i] else float(last_values[i])
        v_next = np.append(v[1:], boot)
        deltas = rewards[sl] + cfg.gamma * v_next - v
        adv[sl] = discount_cumsum(deltas, cfg.gamma * cfg.lam)
    returns = adv + values
    if standardize and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


# -- value functions ------------------------------------------------------------
class NeuralValueFunction(RegressorMixin, BaseEstimator):
    """Tanh MLP regressor updated by one trust-region step per ``fit``.

    Inputs and targets are whitened with the statistics of each ``fit``
    batch. The constraint is half the mean squared change of the whitened
    prediction, i.e. the KL between unit-variance Gaussians.
    """

    def __init__(self, hidden_sizes=(32,), delta=0.01, cg_iters=10, damping=1e-5,
                 backtrack_ratio=0.8, max_backtracks=15, subsample_fraction=1.0, seed=0):
        self.hidden_sizes = hidden_sizes
        self.delta = delta
        self.cg_iters = cg_iters
        self.damping = damping
        self.backtrack_ratio = backtrack_ratio
        self.max_backtracks = max_backtracks
        self.subsample_fraction = subsample_fraction
        self.seed = seed

    def _init(self, n_features):
        self.spec_ = MlpSpec(n_features, tuple(self.hidden_sizes), 1, seed=self.seed)
        # zero output: with no reward the first advantages are exactly zero
        self.params_ = mlp_init(self.spec_, output_scale=0.0)
        self.x_mean_, self.x_std_ = np.zeros(n_features), np.ones(n_features)
        self.y_mean_, self.y_std_ = 0.0, 1.0
        self.n_fits_ = 0

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        out = mlp_forward(self.params_, self.spec_, (X - self.x_mean_) / self.x_std_)[:, 0]
        return self.y_mean_ + self.y_std_ * out

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if not hasattr(self, "params_"):
            self._init(X.shape[1])
        std = X.std(axis=0)
        self.x_mean_, self.x_std_ = X.mean(axis=0), np.where(std < 1e-8, 1.0, std)
        self.y_mean_ = float(y.mean())
        y_std = float(y.std())
        self.y_std_ = y_std if y_std > 1e-8 else 1.0
        Xn = (X - self.x_mean_) / self.x_std_
        yn = ((y - self.y_mean_) / self.y_std_)[:, None]
        old = self.params_.copy()
        pred_old = mlp_forward(old, self.spec_, Xn)
        n = Xn.shape[0]
        ones = np.ones((n, 1))

        def gradient_fn():
            g, _ = mlp_backward(old, self.spec_, Xn, -2.0 * (pred_old - yn) / n)
            return g.data

        def curvature_vp_fn(idx, v):
            if idx is None:
                return gauss_newton_vector_product(old, self.spec_, Xn, ones, v).data
            return gauss_newton_vector_product(old, self.spec_, Xn[idx], ones[idx], v).data

        def eval_fn(theta):
            pred = mlp_forward(old.with_data(theta), self.spec_, Xn)
            return -float(np.mean((pred - yn) ** 2)), 0.5 * float(np.mean((pred - pred_old) ** 2))

        cfg = TrustRegionConfig(self.cg_iters, self.damping, self.backtrack_ratio,
                                self.max_backtracks, self.subsample_fraction,
                                seed=self.seed + self.n_fits_)
        theta, self.last_report_ = solve_step(
            TrustRegionProblem(gradient_fn, curvature_vp_fn, eval_fn, old.data, self.delta, n), cfg)
        self.params_ = old.with_data(theta)
        self.n_fits_ += 1
        return self


class LinearTimeVaryingBaseline(RegressorMixin, BaseEstimator):
    """Least squares on ``[s, s^2, t/T, (t/T)^2, (t/T)^3, 1]``."""

    def __init__(self, horizon=500, ridge=1e-8):
        self.horizon = horizon
        self.ridge = ridge

    def features(self, X, t):
        X = check_array(X, dtype=np.float64)
        tt = np.asarray(t, dtype=np.float64).reshape(-1, 1) / self.horizon
        if tt.shape[0] != X.shape[0]:
            raise ValueError("timesteps and observations differ in length")
        return np.hstack([X, X ** 2, tt, tt ** 2, tt ** 3, np.ones_like(tt)])

    def fit(self, X, y, t):
        phi = self.features(X, t)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        n = phi.shape[0]
        if n == 0:
            raise ValueError("cannot fit on an empty batch")
        gram = phi.T @ phi + self.ridge * np.eye(phi.shape[1])
        self.coef_ = np.linalg.solve(gram, phi.T @ y)
        return self

    def predict(self, X, t):
        check_is_fitted(self, "coef_")
        return self.features(X, t) @ self.coef_


def fit_value_nn(vf: NeuralValueFunction, batch: TrajectoryBatch):
    if len(batch) == 0 or batch.returns is None:
        raise ValueError("value fit needs a non-empty batch with returns")
    return vf.fit(batch.obs, batch.returns)


def fit_value_linear_timevarying(batch: TrajectoryBatch, horizon=None, ridge=1e-8):
    if len(batch) == 0 or batch.returns is None:
        raise ValueError("value fit needs a non-empty batch with returns")
    return LinearTimeVaryingBaseline(horizon or batch.max_len, ridge).fit(
        batch.obs, batch.returns, batch.timesteps)


def predict_values(vf, batch: TrajectoryBatch):
    """Per-step values and per-episode bootstrap values for ``batch``."""
    last_obs = np.array([batch.next_obs[sl.stop - 1] for sl in batch.episode_slices])
    last_t = np.array([batch.timesteps[sl.stop - 1] + 1 for sl in batch.episode_slices])
    if isinstance(vf, LinearTimeVaryingBaseline):
        if not hasattr(vf, "coef_"):
            return np.zeros(len(batch)), np.zeros(batch.n_episodes)
        return vf.predict(batch.obs, batch.timesteps), vf.predict(last_obs, last_t)
    if not hasattr(vf, "params_"):
        vf._init(batch.obs.shape[1])
    return vf.predict(batch.obs), vf.predict(last_obs)


# -- policy step ------------------------------------------------------------------
def surrogate(policy, batch, theta, logp_old):
    ratio = np.exp(policy.log_prob(batch.obs, batch.actions, theta) - logp_old)
    return float(np.mean(ratio * batch.advantages))


def trpo_step(policy, batch: TrajectoryBatch, delta_kl, config: Optional[TrustRegionConfig] = None):
    """One KL-constrained step on the likelihood-ratio surrogate.

    Updates ``policy`` in place and returns ``(policy, report, mean_kl)``.
    """
    if batch.advantages is None:
        raise ValueError("batch has no advantages")
    config = config or TrustRegionConfig()
    theta_old = policy.theta.copy()
    logp_old = policy.log_prob(batch.obs, batch.actions, theta_old)
    d_old = policy.dist(batch.obs, theta_old)
    kl_fn = gaussian_kl if isinstance(d_old, DiagGaussian) else categorical_kl

    def eval_fn(theta):
        L = surrogate(policy, batch, theta, logp_old)
        return L, float(np.mean(kl_fn(d_old, policy.dist(batch.obs, theta))))

    def curvature_vp_fn(idx, v):
        obs = batch.obs if idx is None else batch.obs[idx]
        return policy.fisher_vp(obs, v, theta_old)

    problem = TrustRegionProblem(
        gradient_fn=lambda: policy.weighted_score(batch.obs, batch.actions, batch.advantages, theta_old),
        curvature_vp_fn=curvature_vp_fn, eval_fn=eval_fn, theta_old=theta_old,
        delta=delta_kl, n_samples=len(batch))
    theta, report = solve_step(problem, config)
    policy.set_theta(theta)
    kl = report.constraint_after if report.accepted else 0.0
    return policy, report, kl
