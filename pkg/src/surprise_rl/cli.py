"""Command-line entry point: ``surprise-rl <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 run failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bonus import BonusConfig
from .config import ConfigError, RunConfig, load_config
from .reporting import (
    DEFAULT_SEEDS, SweepError, aggregate, compare_schemes, emit_plot, format_table,
    parse_seeds, run_sweep,
)
from .trainer import TrainingError, train

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["run"] = {"seed": args.seed}
    if getattr(args, "env", None):
        over.setdefault("run", {})["env"] = args.env
    if getattr(args, "iterations", None):
        over.setdefault("run", {})["iterations"] = args.iterations
    scheme = getattr(args, "scheme", None)
    if scheme and isinstance(scheme, str):
        try:
            bc = BonusConfig.parse(scheme, eta0=cfg.bonus.eta0)
        except ValueError as exc:
            raise ConfigError([f"bonus.scheme: {exc}"]) from exc
        over["bonus"] = {"scheme": bc.scheme, "k": bc.k}
    return cfg.replace(**over) if over else cfg


def _seeds(args):
    return parse_seeds(args.seeds) if args.seeds else list(DEFAULT_SEEDS)


def cmd_train(args):
    cfg = _load(args)
    out = Path(args.out or "runs/train")
    arts = train(cfg, out_dir=out)
    last = arts.rows[-1]
    print(f"wrote {arts.log_path}; final ret_ext_mean={last['ret_ext_mean']:.4g}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load(args)
    out = Path(args.out or "runs/sweep")
    res = run_sweep(cfg, _seeds(args), out, label=args.scheme or cfg.bonus.scheme)
    (out / "curve.svg").write_text(emit_plot([res]), encoding="utf-8")
    for s, msg in res.failures.items():
        print(f"seed {s} failed: {msg}", file=sys.stderr)
    print(f"{len(res.csv_paths)} seeds done; final median {res.median[-1]:.4g} "
          f"(IQR {res.lower[-1]:.4g}..{res.upper[-1]:.4g}); plot {out / 'curve.svg'}")
    return EXIT_OK


def cmd_plot(args):
    """Each input is a sweep directory holding ``seed_*/progress.csv``."""
    results = []
    for d in args.inputs:
        paths = {int(p.parent.name.split("_", 1)[1]): p
                 for p in sorted(Path(d).glob("seed_*/progress.csv"))}
        if not paths:
            raise SweepError(f"{d}: no seed_*/progress.csv files")
        results.append(aggregate(Path(d).name, paths))
    svg = emit_plot(results, title=args.title or "")
    out = Path(args.out or "curves.svg")
    if out.suffix != ".svg":
        out = out / "curves.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_compare(args):
    cfg = _load(args)
    out = Path(args.out or "runs/compare")
    rows, results = compare_schemes(cfg, args.scheme, _seeds(args), out, args.iterations)
    table = format_table(rows)
    (out / "summary.tsv").write_text(table, encoding="utf-8")
    (out / "curves.svg").write_text(emit_plot(results, title=cfg.run.env), encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_validate(args):
    cfg = _load(args)
    print(cfg.to_text(), end="")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="surprise-rl")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, scheme_multi=False):
        p.add_argument("--config", help="INI file; defaults apply to missing keys")
        p.add_argument("--out", help="output directory")
        p.add_argument("--env")
        p.add_argument("--iterations", type=int)
        if scheme_multi:
            p.add_argument("--scheme", action="append", required=True, metavar="NAME[:k]")
        else:
            p.add_argument("--scheme", metavar="NAME[:k]")

    p = sub.add_parser("train", help="single run")
    common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="one run per seed, aggregated")
    common(p)
    p.add_argument("--seeds", metavar="A..B")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="sweep directories to SVG")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("compare", help="scheme x seed matrix")
    common(p, scheme_multi=True)
    p.add_argument("--seeds", metavar="A..B")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate-config", help="parse, validate and print the config")
    p.add_argument("--config")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, SweepError, OSError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
