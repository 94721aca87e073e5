"""Learned Gaussian transition model, replay memory and parameter snapshots."""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .dist import LOG_STD_MAX, LOG_STD_MIN, DiagGaussian, gaussian_kl, gaussian_log_prob
from .numkit import (
    MlpSpec, ParamVector, Segment, as_matrix, gauss_newton_vector_product,
    mlp_backward, mlp_forward, mlp_init, weight_mask,
)
from .trustregion import TrustRegionConfig, TrustRegionProblem, solve_step

_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TransitionTuple:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r_ext: float = 0.0
    done: bool = False


class TransitionBatch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r_ext: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.s.shape[0]


class ReplayMemory:
    """FIFO store of transitions; inserting at capacity evicts the oldest."""

    def __init__(self, capacity=200_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._buf = None
        self._size = 0
        self._head = 0  # slot of the oldest element once full

    def __len__(self):
        return self._size

    def _allocate(self, s_dim, a_dim, n):
        alloc = min(self.capacity, max(1024, n))
        self._buf = {
            "s": np.zeros((alloc, s_dim)), "a": np.zeros((alloc, a_dim)),
            "s_next": np.zeros((alloc, s_dim)), "r_ext": np.zeros(alloc),
            "done": np.zeros(alloc, dtype=bool),
        }

    def _grow(self, needed):
        alloc = self._buf["s"].shape[0]
        if needed <= alloc or alloc == self.capacity:
            return
        new = min(self.capacity, max(needed, 2 * alloc))
        for key, arr in self._buf.items():
            grown = np.zeros((new,) + arr.shape[1:], dtype=arr.dtype)
            grown[:alloc] = arr
            self._buf[key] = grown

    def add(self, s, a, s_next, r_ext=None, done=None):
        """Append a batch of transitions given as row-aligned arrays."""
        s = as_matrix(s, name="s")
        n = s.shape[0]
        a = as_matrix(a, name="a") if np.ndim(a) == 2 else np.asarray(a, float).reshape(n, -1)
        s_next = as_matrix(s_next, s.shape[1], "s_next")
        r_ext = np.zeros(n) if r_ext is None else np.asarray(r_ext, float).reshape(n)
        done = np.zeros(n, bool) if done is None else np.asarray(done, bool).reshape(n)
        if a.shape[0] != n or s_next.shape[0] != n:
            raise ValueError("transition arrays disagree on length")
        if self._buf is None:
            self._allocate(s.shape[1], a.shape[1], n)
        elif s.shape[1] != self._buf["s"].shape[1] or a.shape[1] != self._buf["a"].shape[1]:
            raise ValueError("transition dimensions changed")
        if n > self.capacity:
            s, a, s_next, r_ext, done = (x[-self.capacity:] for x in (s, a, s_next, r_ext, done))
            n = self.capacity
        self._grow(self._size + n)
        alloc = self._buf["s"].shape[0]
        pos = (self._head + self._size + np.arange(n)) % alloc
        for key, vals in zip(("s", "a", "s_next", "r_ext", "done"), (s, a, s_next, r_ext, done)):
            self._buf[key][pos] = vals
        total = self._size + n
        if total > alloc:
            self._head = (self._head + total - alloc) % alloc
        self._size = min(alloc, total)

    def extend(self, tuples: Sequence[TransitionTuple]):
        tuples = list(tuples)
        if not tuples:
            return
        self.add(np.stack([np.atleast_1d(t.s) for t in tuples]),
                 np.stack([np.atleast_1d(t.a) for t in tuples]),
                 np.stack([np.atleast_1d(t.s_next) for t in tuples]),
                 [t.r_ext for t in tuples], [t.done for t in tuples])

    def _chronological(self):
        alloc = self._buf["s"].shape[0]
        return (self._head + np.arange(self._size)) % alloc

    def _take(self, pos):
        return TransitionBatch(*(self._buf[k][pos] for k in ("s", "a", "s_next", "r_ext", "done")))

    def contents(self) -> TransitionBatch:
        """All stored transitions, oldest first."""
        if self._size == 0:
            raise ValueError("replay memory is empty")
        return self._take(self._chronological())

    def sample(self, count, rng=None) -> TransitionBatch:
        """Uniform sample without replacement; the whole memory if ``count >= len``."""
        if count < 1:
            raise ValueError("count must be >= 1")
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay memory")
        rng = np.random.default_rng(rng)
        picks = rng.choice(self._size, size=min(count, self._size), replace=False)
        return self._take(self._chronological()[picks])


class SnapshotRing:
    """Bounded history of past model states keyed by update index."""

    def __init__(self, k_max=1):
        if k_max < 1:
            raise ValueError("k_max must be >= 1")
        self.k_max = int(k_max)
        self._ring = deque(maxlen=self.k_max)

    def __len__(self):
        return len(self._ring)

    def push(self, index, state):
        if self._ring and index <= self._ring[-1][0]:
            raise ValueError("snapshot indices must increase")
        self._ring.append((int(index), state))

    def get(self, k):
        """State from ``k`` updates ago, or the oldest one kept."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self._ring:
            raise LookupError("snapshot ring is empty")
        return self._ring[-min(k, len(self._ring))][1]

    def indices(self):
        return [i for i, _ in self._ring]


class Normalizer(NamedTuple):
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @classmethod
    def identity(cls, in_dim, out_dim):
        return cls(np.zeros(in_dim), np.ones(in_dim), np.zeros(out_dim), np.ones(out_dim))


class ModelState(NamedTuple):
    """Everything that defines one density: weights plus frozen whitening."""

    params: ParamVector
    normalizer: Normalizer


def _safe_std(x):
    std = x.std(axis=0)
    return np.where(std < _STD_FLOOR, 1.0, std)


class DynamicsModel(BaseEstimator):
    """Factored-Gaussian model of ``s'`` given ``(s, a)``.

    The network sees whitened ``(s, a)`` and emits the mean and log-std of
    the whitened target; with ``predict_delta`` the target is ``s' - s``.
    Densities are reported in the original state space.

    Parameters
    ----------
    hidden_sizes : tuple of int
    kappa : float
        KL step size of each update.
    alpha : float
        L2 penalty on weights (biases are not penalised).
    batch_size : int
        Transitions sampled from replay per update.
    """

    def __init__(self, hidden_sizes=(32,), kappa=1e-3, alpha=1.0, batch_size=5000,
                 log_std_min=LOG_STD_MIN, log_std_max=LOG_STD_MAX, predict_delta=True,
                 cg_iters=10, damping=1e-5, backtrack_ratio=0.8, max_backtracks=15,
                 subsample_fraction=1.0, max_snapshots=1, seed=0):
        self.hidden_sizes = hidden_sizes
        self.kappa = kappa
        self.alpha = alpha
        self.batch_size = batch_size
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max
        self.predict_delta = predict_delta
        self.cg_iters = cg_iters
        self.damping = damping
        self.backtrack_ratio = backtrack_ratio
        self.max_backtracks = max_backtracks
        self.subsample_fraction = subsample_fraction
        self.max_snapshots = max_snapshots
        self.seed = seed

    # -- construction -----------------------------------------------------
    def initialize(self, state_dim, action_dim):
        self.state_dim_ = int(state_dim)
        self.action_dim_ = int(action_dim)
        self.spec_ = MlpSpec(self.state_dim_ + self.action_dim_, tuple(self.hidden_sizes),
                             2 * self.state_dim_, seed=self.seed)
        self.params_ = mlp_init(self.spec_)
        self.normalizer_ = Normalizer.identity(self.spec_.input_dim, self.state_dim_)
        self.snapshots_ = SnapshotRing(self.max_snapshots)
        self.n_updates_ = 0
        self.last_report_ = None
        return self

    @property
    def state(self) -> ModelState:
        check_is_fitted(self, "params_")
        return ModelState(self.params_.copy(), self.normalizer_)

    def trust_region_config(self, seed=None):
        return TrustRegionConfig(
            cg_iters=self.cg_iters, damping=self.damping,
            backtrack_ratio=self.backtrack_ratio, max_backtracks=self.max_backtracks,
            subsample_fraction=self.subsample_fraction,
            seed=self.seed if seed is None else seed)

    # -- densities ----------------------------------------------------------
    def _check(self, S, A, S_next=None):
        S = check_array(S, dtype=np.float64, ensure_2d=False).reshape(-1, self.state_dim_)
        A = check_array(A, dtype=np.float64, ensure_2d=False).reshape(S.shape[0], self.action_dim_)
        if S_next is None:
            return S, A
        S_next = check_array(S_next, dtype=np.float64, ensure_2d=False).reshape(S.shape)
        return S, A, S_next

    def _inputs(self, S, A, norm):
        return (np.hstack([S, A]) - norm.in_mean) / norm.in_std

    def _targets(self, S, S_next, norm):
        raw = S_next - S if self.predict_delta else S_next
        return (raw - norm.out_mean) / norm.out_std

    def _dist(self, params, X):
        y = mlp_forward(params, self.spec_, X)
        n = self.state_dim_
        return DiagGaussian(y[:, :n], y[:, n:], self.log_std_min, self.log_std_max), y

    def predict_dist(self, S, A, state: Optional[ModelState] = None) -> DiagGaussian:
        """Distribution over the whitened target (the network's output space)."""
        check_is_fitted(self, "params_")
        state = state or ModelState(self.params_, self.normalizer_)
        S, A = self._check(S, A)
        return self._dist(state.params, self._inputs(S, A, state.normalizer))[0]

    def predict(self, S, A, state: Optional[ModelState] = None):
        """Predicted mean of ``s'`` in the original state space."""
        state = state or ModelState(self.params_, self.normalizer_)
        S, A = self._check(S, A)
        d = self.predict_dist(S, A, state)
        mean = state.normalizer.out_mean + state.normalizer.out_std * d.mean
        return S + mean if self.predict_delta else mean

    def log_prob(self, S, A, S_next, state: Optional[ModelState] = None, per_dim=False):
        """``log P(s'|s,a)`` in the original space (whitening Jacobian included)."""
        check_is_fitted(self, "params_")
        state = state or ModelState(self.params_, self.normalizer_)
        S, A, S_next = self._check(S, A, S_next)
        d = self.predict_dist(S, A, state)
        lp = gaussian_log_prob(d, self._targets(S, S_next, state.normalizer), per_dim=True)
        lp = lp - np.log(state.normalizer.out_std)
        return lp if per_dim else lp.sum(axis=1)

    def score_samples(self, S, A, S_next):
        return self.log_prob(S, A, S_next)

    def score(self, S, A, S_next):
        """Mean log-likelihood of the transitions."""
        return float(np.mean(self.log_prob(S, A, S_next)))

    # -- fitting ------------------------------------------------------------
    def set_normalizer(self, S, A, S_next):
        S, A, S_next = self._check(S, A, S_next)
        X = np.hstack([S, A])
        T = S_next - S if self.predict_delta else S_next
        self.normalizer_ = Normalizer(X.mean(axis=0), _safe_std(X), T.mean(axis=0), _safe_std(T))
        return self

    def _objective_parts(self, params, X, T):
        d, y = self._dist(params, X)
        nll = -gaussian_log_prob(d, T)
        w = params.data[self._wmask]
        return d, y, float(nll.mean() + self.alpha * (w @ w))

    def partial_fit(self, S, A, S_next, rng=None):
        """One KL-constrained step on the given transitions.

        Whitening statistics are held fixed during the step. The pre-step
        state is pushed to ``snapshots_``. Returns ``self``; the step outcome
        is in ``last_report_``.
        """
        if not hasattr(self, "params_"):
            S_ = np.asarray(S)
            self.initialize(S_.reshape(S_.shape[0], -1).shape[1],
                            np.asarray(A).reshape(S_.shape[0], -1).shape[1])
        pre = self.state
        self._step(S, A, S_next, rng)
        self.snapshots_.push(self.n_updates_ - 1, pre)
        return self

    def _step(self, S, A, S_next, rng):
        S, A, S_next = self._check(S, A, S_next)
        norm = self.normalizer_
        X = self._inputs(S, A, norm)
        T = self._targets(S, S_next, norm)
        n = self.state_dim_
        self._wmask = weight_mask(self.params_)
        old = self.params_.copy()
        d_old, y_old = self._dist(old, X)
        lo, hi = self.log_std_min, self.log_std_max
        free = ((y_old[:, n:] > lo) & (y_old[:, n:] < hi)).astype(float)

        def gradient_fn():
            z = (T - d_old.mean) / d_old.std
            g_out = np.hstack([-z / d_old.std, (1.0 - z ** 2) * free]) / X.shape[0]
            g, _ = mlp_backward(old, self.spec_, X, g_out)
            grad = g.data + 2.0 * self.alpha * np.where(self._wmask, old.data, 0.0)
            return -grad

        metric = np.hstack([np.exp(-2.0 * d_old.log_std), 2.0 * free])

        def curvature_vp_fn(idx, v):
            if idx is None:
                return gauss_newton_vector_product(old, self.spec_, X, metric, v).data
            return gauss_newton_vector_product(old, self.spec_, X[idx], metric[idx], v).data

        def eval_fn(theta):
            p = old.with_data(theta)
            d, _, obj = self._objective_parts(p, X, T)
            return -obj, float(gaussian_kl(d, d_old).mean())

        problem = TrustRegionProblem(gradient_fn, curvature_vp_fn, eval_fn, old.data,
                                     self.kappa, n_samples=X.shape[0])
        seed = np.random.default_rng(rng).integers(2 ** 32) if rng is not None else self.seed + self.n_updates_
        theta, report = solve_step(problem, self.trust_region_config(seed=int(seed)))
        self.params_ = old.with_data(theta)
        self.n_updates_ += 1
        self.last_report_ = report

    def fit(self, S, A, S_next, n_updates=200):
        """Fit from scratch with ``n_updates`` steps on minibatches of the data."""
        S = np.asarray(S, dtype=np.float64)
        S = S.reshape(S.shape[0], -1)
        A = np.asarray(A, dtype=np.float64).reshape(S.shape[0], -1)
        self.initialize(S.shape[1], A.shape[1])
        self.set_normalizer(S, A, S_next)
        S_next = np.asarray(S_next, dtype=np.float64).reshape(S.shape)
        rng = np.random.default_rng(self.seed)
        for _ in range(n_updates):
            idx = rng.choice(S.shape[0], size=min(self.batch_size, S.shape[0]), replace=False)
            self.partial_fit(S[idx], A[idx], S_next[idx], rng=rng)
        return self


def model_nll(model: DynamicsModel, batch: TransitionBatch, state=None) -> float:
    """Mean negative log-likelihood in the original state space."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    return float(-np.mean(model.log_prob(batch.s, batch.a, batch.s_next, state)))


def model_update(model: DynamicsModel, memory: ReplayMemory, rng=None):
    """Refresh whitening from replay, then take one step on a sampled batch.

    Returns ``(model, report)``; ``report`` is ``None`` when the memory holds
    fewer than ``model.batch_size`` transitions and the update is skipped.
    """
    if len(memory) < model.batch_size:
        return model, None
    rng = np.random.default_rng(rng)
    everything = memory.contents()
    if not hasattr(model, "params_"):
        model.initialize(everything.s.shape[1], everything.a.shape[1])
    # the snapshot describes the model that produced this iteration's
    # bonuses, so it keeps the pre-refresh whitening
    pre = model.state
    model.set_normalizer(everything.s, everything.a, everything.s_next)
    batch = memory.sample(model.batch_size, rng)
    model._step(batch.s, batch.a, batch.s_next, rng)
    model.snapshots_.push(model.n_updates_ - 1, pre)
    return model, model.last_report_


# -- checkpoints ------------------------------------------------------------
_MAGIC = b"SRLCKPT\x00"
_VERSION = 1


def save_checkpoint(model: DynamicsModel, path):
    """Write params and whitening statistics as little-endian float64."""
    check_is_fitted(model, "params_")
    header = {
        "version": _VERSION,
        "estimator_params": {k: (list(v) if isinstance(v, tuple) else v)
                             for k, v in model.get_params().items()},
        "state_dim": model.state_dim_, "action_dim": model.action_dim_,
        "n_updates": model.n_updates_,
        "layout": [[s.name, list(s.shape), s.offset] for s in model.params_.layout],
        "normalizer_sizes": [len(x) for x in model.normalizer_],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = [model.params_.data, *model.normalizer_]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> DynamicsModel:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a dynamics checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    params = dict(header["estimator_params"])
    params["hidden_sizes"] = tuple(params["hidden_sizes"])
    model = DynamicsModel(**params).initialize(header["state_dim"], header["action_dim"])
    layout = [Segment(n, tuple(s), o) for n, s, o in header["layout"]]
    n_params = sum(seg.size for seg in layout)
    model.params_ = ParamVector(payload[:n_params].copy(), layout)
    pieces, offset = [], n_params
    for size in header["normalizer_sizes"]:
        pieces.append(payload[offset:offset + size].copy())
        offset += size
    if offset != payload.size:
        raise ValueError("checkpoint payload length does not match header")
    model.normalizer_ = Normalizer(*pieces)
    model.n_updates_ = header["n_updates"]
    return model
