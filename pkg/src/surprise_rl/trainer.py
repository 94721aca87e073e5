"""The training loop: rollouts, reward reshaping, policy step, model step."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .bonus import BonusConfig, compute_raw_bonus, reshape_rewards
from .config import RunConfig
from .dynamics import DynamicsModel, ReplayMemory, model_update, save_checkpoint
from .envs import make_env
from .rl import (
    GaeConfig, LinearTimeVaryingBaseline, NeuralValueFunction, collect_rollouts,
    fit_value_nn, gae_advantages, make_policy, model_actions,
    predict_values, trpo_step,
)
from .trustregion import TrustRegionConfig

logger = logging.getLogger(__name__)

SCHEMA = "surprise_rl.progress/1"
PROGRESS_COLUMNS = (
    "iteration", "steps_total", "n_episodes", "ret_ext_mean", "ret_ext_median_episode",
    "ret_ext_max_episode", "bonus_mean_raw", "bonus_std_raw", "bonus_min_raw",
    "bonus_max_raw", "eta", "bonus_shift", "bonus_mean_applied", "policy_kl",
    "policy_accepted", "value_accepted", "dynamics_nll", "dynamics_kl_step",
    "dynamics_accepted",
)
TIMING_COLUMNS = ("iteration", "wall_ms", "rollout_ms", "bonus_ms", "policy_ms", "model_ms")
# environments where an episode can end badly, so negative bonuses would
# teach the agent to end episodes early
_DEATH_ENVS = ("noisy-chain",)


class TrainingError(RuntimeError):
    def __init__(self, iteration, cause):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {type(cause).__name__}: {cause}")


@dataclass
class RunArtifacts:
    policy: object
    model: DynamicsModel
    log_path: Optional[Path]
    timing_path: Optional[Path]
    rows: List[Dict[str, object]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    def column(self, name):
        return np.array([row[name] for row in self.rows], dtype=np.float64)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_progress_header(fh, columns=PROGRESS_COLUMNS):
    fh.write(f"# schema={SCHEMA}\n")
    csv.writer(fh, lineterminator="\n").writerow(columns)


def read_progress(path) -> Dict[str, np.ndarray]:
    """Parse a progress CSV into float columns; checks the schema line."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != f"# schema={SCHEMA}":
            raise ValueError(f"{path}: unexpected schema line {first!r}")
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def resolve_shift(cfg: RunConfig) -> bool:
    mode = cfg.bonus.nonnegative_shift
    if mode == "auto":
        return cfg.run.env in _DEATH_ENVS
    return mode == "true"


def build_components(cfg: RunConfig):
    """Environment, policy, value function and dynamics model for ``cfg``."""
    env = make_env(cfg.run.env)
    seed = cfg.run.seed
    policy = make_policy(env.spec, cfg.policy.hidden_sizes, cfg.policy.init_log_std, seed)
    if cfg.value.kind == "nn":
        t = cfg.trpo
        vf = NeuralValueFunction(cfg.value.hidden_sizes, cfg.value.delta, t.cg_iters, t.damping,
                                 t.backtrack_ratio, t.max_backtracks, 1.0, seed + 1)
    else:
        vf = LinearTimeVaryingBaseline(cfg.trpo.max_len)
    d = cfg.dynamics
    model = DynamicsModel(
        hidden_sizes=d.hidden_sizes, kappa=d.kappa, alpha=d.alpha, batch_size=d.batch_size,
        log_std_min=d.log_std_min, log_std_max=d.log_std_max, cg_iters=cfg.trpo.cg_iters,
        damping=cfg.trpo.damping, backtrack_ratio=cfg.trpo.backtrack_ratio,
        max_backtracks=cfg.trpo.max_backtracks, subsample_fraction=d.subsample_fraction,
        max_snapshots=max(1, cfg.bonus.k), seed=seed + 2,
    ).initialize(env.spec.obs_dim, env.spec.action_dim)
    return env, policy, vf, model


def train(cfg: RunConfig, out_dir=None, progress=None) -> RunArtifacts:
    """Run ``cfg.run.iterations`` iterations and return the artifacts.

    Per iteration: collect rollouts with the current policy, insert them into
    replay, score them with the current dynamics model, normalise eta and
    reshape rewards, take the policy and value steps, then update the model.
    ``progress`` is an optional callable receiving each logged row.
    """
    env, policy, vf, model = build_components(cfg)
    bonus_cfg = BonusConfig(cfg.bonus.scheme, cfg.bonus.k, cfg.bonus.eta0, resolve_shift(cfg))
    frozen = model.state
    memory = ReplayMemory(cfg.dynamics.replay_capacity)
    t = cfg.trpo
    gae = GaeConfig(t.gamma, t.gae_lambda)
    streams = np.random.SeedSequence(cfg.run.seed).spawn(3)
    rollout_seeds = streams[0].generate_state(cfg.run.iterations, dtype=np.uint64)
    model_rng = np.random.default_rng(streams[1])

    out = Path(out_dir) if out_dir is not None else None
    log_fh = timing_fh = None
    log_path = timing_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path, timing_path = out / "progress.csv", out / "timing.csv"
        log_fh = open(log_path, "w", encoding="utf-8", newline="")
        timing_fh = open(timing_path, "w", encoding="utf-8", newline="")
        write_progress_header(log_fh)
        write_progress_header(timing_fh, TIMING_COLUMNS)
    artifacts = RunArtifacts(policy, model, log_path, timing_path)
    steps_total = 0
    try:
        for it in range(cfg.run.iterations):
            try:
                row, timing = _iteration(
                    it, cfg, env, policy, vf, model, memory, bonus_cfg, frozen, gae,
                    int(rollout_seeds[it]), model_rng)
            except Exception as exc:  # noqa: BLE001 - rewrapped with the index
                raise TrainingError(it, exc) from exc
            steps_total += row.pop("_steps")
            row["steps_total"] = steps_total
            row = {k: row[k] for k in PROGRESS_COLUMNS}
            artifacts.rows.append(row)
            if log_fh is not None:
                log_fh.write(",".join(_fmt(row[k]) for k in PROGRESS_COLUMNS) + "\n")
                log_fh.flush()
                timing_fh.write(",".join(_fmt(timing[k]) for k in TIMING_COLUMNS) + "\n")
                timing_fh.flush()
            every = cfg.run.checkpoint_every
            if out is not None and every and ((it + 1) % every == 0 or it + 1 == cfg.run.iterations):
                path = out / f"dynamics_{it + 1:05d}.ckpt"
                save_checkpoint(model, path)
                np.save(out / f"policy_{it + 1:05d}.npy", policy.theta)
                artifacts.checkpoints.append(path)
            if progress is not None:
                progress(row)
    finally:
        if log_fh is not None:
            log_fh.close()
            timing_fh.close()
    return artifacts


def _iteration(it, cfg, env, policy, vf, model, memory, bonus_cfg, frozen, gae, seed, model_rng):
    t = cfg.trpo
    clock = time.perf_counter
    t0 = clock()
    batch = collect_rollouts(env, policy, t.batch_size, t.max_len, seed=seed)
    acts = model_actions(batch, env)
    memory.add(batch.obs, acts, batch.next_obs, batch.rewards, batch.dones)
    t1 = clock()

    if bonus_cfg.scheme == "none":
        raw = np.zeros(len(batch))
    else:
        raw = compute_raw_bonus(bonus_cfg, model, batch.obs, acts, batch.next_obs, frozen)
    batch.rewards_shaped, report = reshape_rewards(bonus_cfg, batch.rewards, raw)
    t2 = clock()

    values, last_values = predict_values(vf, batch)
    batch.values = values
    batch.advantages, batch.returns = gae_advantages(
        batch, values, last_values, gae, rewards=batch.rewards_shaped,
        standardize=t.standardize_advantages)
    tr_cfg = TrustRegionConfig(t.cg_iters, t.damping, t.backtrack_ratio, t.max_backtracks,
                               t.subsample_fraction, t.strict_appendix_a, seed=seed % (2 ** 32))
    _, pol_report, kl = trpo_step(policy, batch, t.delta_kl, tr_cfg)
    if isinstance(vf, LinearTimeVaryingBaseline):
        vf.fit(batch.obs, batch.returns, batch.timesteps)
        value_ok = True
    else:
        fit_value_nn(vf, batch)
        value_ok = vf.last_report_.accepted
    t3 = clock()

    dyn_kl, dyn_ok = 0.0, False
    if bonus_cfg.scheme != "none":
        for _ in range(cfg.dynamics.updates_per_iter):
            model, dyn_report = model_update(model, memory, model_rng)
            if dyn_report is not None:
                dyn_ok = dyn_report.accepted
                dyn_kl = dyn_report.constraint_after if dyn_report.accepted else 0.0
        nll = model_nll_batch(model, batch.obs, acts, batch.next_obs)
    else:
        nll = float("nan")
    t4 = clock()

    ret = batch.episode_returns()
    applied = report.applied
    row = {
        "iteration": it, "_steps": len(batch), "n_episodes": batch.n_episodes,
        "ret_ext_mean": float(ret.mean()), "ret_ext_median_episode": float(np.median(ret)),
        "ret_ext_max_episode": float(ret.max()),
        "bonus_mean_raw": float(raw.mean()), "bonus_std_raw": float(raw.std()),
        "bonus_min_raw": float(raw.min()), "bonus_max_raw": float(raw.max()),
        "eta": report.eta, "bonus_shift": report.shift,
        "bonus_mean_applied": float(np.mean(applied)),
        "policy_kl": kl, "policy_accepted": pol_report.accepted, "value_accepted": value_ok,
        "dynamics_nll": nll, "dynamics_kl_step": dyn_kl, "dynamics_accepted": dyn_ok,
    }
    ms = lambda a, b: 1000.0 * (b - a)  # noqa: E731
    timing = {"iteration": it, "wall_ms": ms(t0, t4), "rollout_ms": ms(t0, t1),
              "bonus_ms": ms(t1, t2), "policy_ms": ms(t2, t3), "model_ms": ms(t3, t4)}
    if not math.isfinite(row["ret_ext_mean"]):
        raise FloatingPointError("non-finite return")
    return row, timing


def model_nll_batch(model, s, a, s_next):
    return float(-np.mean(model.log_prob(s, a, s_next)))
