"""Seed sweeps, quartile aggregation, SVG curves and scheme comparisons."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .config import RunConfig
from .trainer import read_progress, train

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = tuple(range(10))
X_LABEL = "iterations of training"
Y_LABEL = "average undiscounted return"


class SweepError(RuntimeError):
    pass


@dataclass
class SweepResult:
    label: str
    csv_paths: Dict[int, Path]
    failures: Dict[int, str]
    iterations: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    final_returns: Dict[int, float] = field(default_factory=dict)
    first_reward: Dict[int, Optional[int]] = field(default_factory=dict)
    wall_ms: Dict[str, float] = field(default_factory=dict)

    @property
    def seeds(self):
        return sorted(self.csv_paths)


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("SURPRISE_RL_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def parse_seeds(text: str) -> List[int]:
    """``"A..B"`` (inclusive), ``"A,B,C"`` or a single integer."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(x) for x in text.split("..", 1))
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(x) for x in text.split(",") if x.strip()]


def quartiles(curves: np.ndarray):
    """Per-column (lower, median, upper) with linear interpolation."""
    curves = np.asarray(curves, dtype=np.float64)
    lo, med, hi = np.percentile(curves, [25.0, 50.0, 75.0], axis=0, method="linear")
    return lo, med, hi


def _run_seed(cfg_text: str, seed: int, out_dir: str):
    from .config import parse_config

    cfg = parse_config(cfg_text).replace(run={"seed": seed})
    train(cfg, out_dir=out_dir)
    return out_dir


def aggregate(label, paths: Dict[int, Path], failures=None) -> SweepResult:
    """Quartile curves of ``ret_ext_mean`` over the given progress files."""
    logs = {s: read_progress(p) for s, p in sorted(paths.items())}
    if not logs:
        raise SweepError(f"{label}: no completed runs")
    n = min(len(log["iteration"]) for log in logs.values())
    curves = np.stack([log["ret_ext_mean"][:n] for log in logs.values()])
    lo, med, hi = quartiles(curves)
    first = {}
    for s, log in logs.items():
        hit = np.flatnonzero(log["ret_ext_max_episode"] > 0)
        first[s] = int(hit[0]) if hit.size else None
    wall = {}
    for s, p in paths.items():
        timing = Path(p).with_name("timing.csv")
        if timing.exists():
            t = read_progress(timing)
            for k, v in t.items():
                if k != "iteration":
                    wall.setdefault(k, []).append(float(np.mean(v)))
    return SweepResult(
        label=label, csv_paths=dict(sorted(paths.items())), failures=dict(failures or {}),
        iterations=np.arange(n), median=med, lower=lo, upper=hi,
        final_returns={s: float(log["ret_ext_mean"][n - 1]) for s, log in logs.items()},
        first_reward=first, wall_ms={k: float(np.mean(v)) for k, v in wall.items()})


def run_sweep(cfg: RunConfig, seeds: Sequence[int], out_dir, label=None, reuse=False) -> SweepResult:
    """Train one run per seed under ``out_dir/seed_<n>`` and aggregate.

    Seeds that fail are recorded; aggregation needs at least half of them.
    With ``reuse`` a seed whose progress file already has every iteration
    is not rerun.
    """
    seeds = sorted(set(int(s) for s in seeds))
    if not seeds:
        raise ValueError("need at least one seed")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    label = label or cfg.bonus.scheme
    todo, paths, failures = [], {}, {}
    for s in seeds:
        csv_path = out / f"seed_{s}" / "progress.csv"
        if reuse and csv_path.exists():
            try:
                if len(read_progress(csv_path)["iteration"]) == cfg.run.iterations:
                    paths[s] = csv_path
                    continue
            except (ValueError, StopIteration):
                pass
        todo.append(s)
    text = cfg.to_text()
    workers = worker_count(len(todo))
    if workers == 1:
        for s in todo:
            try:
                _run_seed(text, s, str(out / f"seed_{s}"))
                paths[s] = out / f"seed_{s}" / "progress.csv"
            except Exception as exc:  # noqa: BLE001 - recorded per seed
                logger.error("seed %d failed: %s", s, exc)
                failures[s] = str(exc)
    elif todo:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {s: pool.submit(_run_seed, text, s, str(out / f"seed_{s}")) for s in todo}
            for s, fut in futures.items():
                try:
                    fut.result()
                    paths[s] = out / f"seed_{s}" / "progress.csv"
                except Exception as exc:  # noqa: BLE001 - recorded per seed
                    logger.error("seed %d failed: %s", s, exc)
                    failures[s] = str(exc)
    if len(paths) * 2 < len(seeds):
        raise SweepError(f"{label}: only {len(paths)} of {len(seeds)} seeds completed: {failures}")
    return aggregate(label, paths, failures)


# -- plotting -------------------------------------------------------------------
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _nice_ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 12))
        v += step
    return ticks


def emit_plot(results: Sequence[SweepResult], title="", width=640, height=400) -> str:
    """Median curves with shaded interquartile bands as a standalone SVG."""
    if not results:
        raise ValueError("nothing to plot")
    ml, mr, mt, mb = 70, 150, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    x_max = max(max(len(r.median) - 1, 1) for r in results)
    y_lo = min(0.0, min(float(np.min(r.lower)) for r in results))
    y_hi = max(float(np.max(r.upper)) for r in results)
    yticks = _nice_ticks(y_lo, y_hi if y_hi > y_lo else y_lo + 1.0)
    y_lo, y_hi = yticks[0], yticks[-1]
    xticks = _nice_ticks(0, x_max)
    x_max = xticks[-1]

    def sx(x):
        return ml + pw * x / x_max

    def sy(y):
        return mt + ph * (1.0 - (y - y_lo) / (y_hi - y_lo))

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{ml + pw / 2:.2f}" y="18" text-anchor="middle">{escape(title)}</text>')
    for t in xticks:
        out.append(f'<line x1="{sx(t):.2f}" y1="{mt}" x2="{sx(t):.2f}" y2="{mt + ph}" stroke="#eee"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{mt + ph + 16}" text-anchor="middle">{t:g}</text>')
    for t in yticks:
        out.append(f'<line x1="{ml}" y1="{sy(t):.2f}" x2="{ml + pw}" y2="{sy(t):.2f}" stroke="#eee"/>')
        out.append(f'<text x="{ml - 6}" y="{sy(t) + 4:.2f}" text-anchor="end">{t:g}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{ml + pw / 2:.2f}" y="{height - 10}" text-anchor="middle">{X_LABEL}</text>')
    out.append(f'<text transform="translate(16 {mt + ph / 2:.2f}) rotate(-90)" '
               f'text-anchor="middle">{Y_LABEL}</text>')
    for i, r in enumerate(results):
        color = _PALETTE[i % len(_PALETTE)]
        xs = np.arange(len(r.median))
        upper = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, r.upper))
        lower = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs[::-1], r.lower[::-1]))
        out.append(f'<polygon class="iqr" points="{upper} {lower}" fill="{color}" '
                   f'fill-opacity="0.2" stroke="none"/>')
        med = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, r.median))
        out.append(f'<polyline class="median" points="{med}" fill="none" stroke="{color}" '
                   f'stroke-width="2"/>')
        ly = mt + 14 + 18 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 36}" y="{ly + 4}">{escape(r.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- comparison table -----------------------------------------------------------
def compare_schemes(cfg: RunConfig, schemes: Sequence[str], seeds: Sequence[int], out_dir,
                    iterations=None, reuse=True):
    """Sweep each scheme and summarise; returns ``(rows, results)``.

    ``schemes`` entries use ``name`` or ``name:k``. Each row holds the final
    median return, the median first iteration with a rewarded episode (seeds
    that never score count as never) and mean per-iteration wall times.
    """
    rows, results = [], []
    out = Path(out_dir)
    for entry in schemes:
        name, _, k = entry.partition(":")
        over = {"scheme": name}
        if k:
            over["k"] = int(k)
        run = {"iterations": iterations} if iterations else {}
        sub = cfg.replace(bonus=over, run=run)
        tag = entry.replace(":", "-")
        res = run_sweep(sub, seeds, out / tag, label=entry, reuse=reuse)
        results.append(res)
        firsts = [math.inf if v is None else v for v in res.first_reward.values()]
        rows.append({
            "scheme": entry,
            "final_median": float(res.median[-1]),
            "first_reward_median": float(np.median(firsts)),
            "wall_ms": res.wall_ms.get("wall_ms", float("nan")),
            "bonus_ms": res.wall_ms.get("bonus_ms", float("nan")),
            "model_ms": res.wall_ms.get("model_ms", float("nan")),
        })
    return rows, results


def format_table(rows) -> str:
    head = ("scheme", "final_median", "first_reward_median", "wall_ms", "bonus_ms", "model_ms")
    lines = ["\t".join(head)]
    for r in rows:
        cells = [r["scheme"]]
        for k in head[1:]:
            v = r[k]
            cells.append("never" if math.isinf(v) else f"{v:.4g}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
