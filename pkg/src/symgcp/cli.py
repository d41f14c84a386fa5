"""Command-line front end: decompose, generate, evaluate, report.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, load_generate_config, load_run_config
from .io import FormatError
from .runner import decompose_run, evaluate_run, write_ground_truth
from .synth import BinaryGenConfig, generate_binary


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="symgcp",
        description="Symmetric generalized CP tensor decomposition",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_dec = sub.add_parser("decompose", help="fit a model with multiple initializations")
    p_dec.add_argument("--config", required=True, help="run configuration file")
    p_dec.add_argument("--output", help="output directory (overrides config)")
    p_dec.add_argument("--seed", type=int, help="root seed (overrides config)")
    p_dec.add_argument("--threads", type=int, default=1, help="parallel initializations")

    p_gen = sub.add_parser("generate", help="create a synthetic binary tensor")
    p_gen.add_argument("--config", required=True, help="generator configuration file")
    p_gen.add_argument("--output", help="output directory (overrides config)")
    p_gen.add_argument("--seed", type=int, help="seed (overrides config)")

    p_eval = sub.add_parser("evaluate", help="score recovered factors against a reference")
    p_eval.add_argument("reference", help="reference factor matrix CSV")
    p_eval.add_argument("run_dir", help="decompose output directory")
    p_eval.add_argument("--output", help="scores CSV path (default: RUN_DIR/scores.csv)")

    p_rep = sub.add_parser("report", help="render figures from run outputs")
    p_rep.add_argument("run_dirs", nargs="+", help="one or more run directories")
    p_rep.add_argument("--output", help="directory for the figures")

    return parser


def _cmd_decompose(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = args.output or cfg.output_dir
    if not out:
        raise ConfigError("no output directory: set 'output' in the config or pass --output")
    rows = decompose_run(cfg, out, threads=max(1, args.threads), log=print)
    ok = [r for r in rows if r["status"] != "failed"]
    if not ok:
        print("all initializations failed", file=sys.stderr)
        return 2
    best = min(ok, key=lambda r: r["final_objective"])
    print(f"best init: {best['init']} (objective {best['final_objective']:.6e})")
    print(f"outputs written to {out}")
    return 0


def _cmd_generate(args) -> int:
    gc = load_generate_config(args.config)
    if args.seed is not None:
        gc = replace(gc, seed=args.seed)
    out = args.output or gc.output_dir
    if not out:
        raise ConfigError("no output directory: set 'output' in the config or pass --output")
    gt = generate_binary(
        BinaryGenConfig(
            n_modes=gc.n_modes,
            n=gc.n,
            rank=gc.rank,
            delta=gc.delta,
            rho_high=gc.rho_high,
            rho_low=gc.rho_low,
            seed=gc.seed,
        )
    )
    write_ground_truth(Path(out), gt)
    frac = gt.x.nnz / gt.x.size
    print(f"wrote a_star.csv and x.tns to {out} (nnz {gt.x.nnz}, fill {frac:.4%})")
    return 0


def _cmd_evaluate(args) -> int:
    rows = evaluate_run(args.reference, args.run_dir, output_path=args.output)
    for r in rows:
        mark = "  <- best" if r["is_best"] else ""
        print(f"init {r['init']}: score {r['cosine_score']:.4f}{mark}")
    out = args.output or str(Path(args.run_dir) / "scores.csv")
    print(f"scores written to {out}")
    return 0


def _cmd_report(args) -> int:
    from .report import render_comparison, render_run

    written = []
    for d in args.run_dirs:
        written.extend(render_run(d, out_dir=args.output))
    if len(args.run_dirs) > 1:
        out = Path(args.output) / "comparison.png" if args.output else None
        written.append(render_comparison(args.run_dirs, out_path=out))
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "decompose": _cmd_decompose,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
