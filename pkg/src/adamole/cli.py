"""Command-line entry point: ``adamole {run,gradcheck,sweep}``.

Exit codes: 0 ok, 1 check failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .checkpoint import save_checkpoint
from .config import apply_overrides, build_experiment, load_config
from .errors import AdamoleError
from .gradcheck import run_gradcheck
from .moe_layer import MixMode
from .training import train

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


def _err(msg: str) -> None:
    print(f"adamole: error: {msg}", file=sys.stderr)


def _load(args):
    cfg = load_config(args.config)
    return apply_overrides(cfg, seed=args.seed, mode=args.mode, tau_max=args.tau_max, tau=args.tau,
                           top_k=args.top_k, experts=args.experts, rank=args.rank, out=args.out)


def run_experiment(cfg, out_dir: Path, log=None) -> dict:
    """Trains one configuration and writes all four artifacts into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    model, task = build_experiment(cfg)
    report = train(model, task, cfg.resolved_train(), log=log)
    metrics = {"config": cfg.to_dict(), "chance": task.chance, **report.to_dict()}
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    (out_dir / "loss.csv").write_text(report.loss_csv())
    (out_dir / "activations.csv").write_text(report.stats.to_csv())
    # the output location is not part of the model, so identical runs give identical bytes
    model_cfg = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    save_checkpoint(model, out_dir / "checkpoint.bin", extra={"config": model_cfg})
    return metrics


def cmd_run(args) -> int:
    cfg = _load(args)
    log = None if args.quiet else (lambda m: print(m, file=sys.stderr))
    metrics = run_experiment(cfg, Path(cfg.out), log)
    print(f"val_acc={metrics['final_val_acc']:.4f} avg_active={metrics['avg_active_experts']} out={cfg.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(args.seed or 0, args.n_seeds)
    worst_name, worst_err, worst_idx = None, -1.0, ()
    failed = False
    for group, rep in reports.items():
        status = "ok" if rep.max_error <= args.tolerance else "FAIL"
        failed |= status == "FAIL"
        print(f"{group:<20} max_rel_err={rep.max_error:.3e} {status}")
        for name, err in sorted(rep.errors.items()):
            if args.verbose:
                print(f"    {name:<48} {err:.3e}")
            if err > worst_err:
                worst_name, worst_err, worst_idx = name, err, rep.worst_index[name]
    print(f"worst: {worst_name} at {list(worst_idx)} rel_err={worst_err:.3e} (tolerance {args.tolerance:g})")
    return EXIT_CHECK if failed else EXIT_OK


def _sweep_one(cfg, tau_max: float, out_dir: str):
    run_cfg = replace(cfg, mode=MixMode.adaptive(tau_max)).validate()
    metrics = run_experiment(run_cfg, Path(out_dir))
    return tau_max, metrics["final_val_acc"], metrics["avg_active_experts"]


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if cfg.mode.kind != "adamole":
        _err("sweep requires adamole mode")
        return EXIT_USAGE
    n = cfg.model.n_experts
    if args.tau_max_list:
        taus = [float(t) for t in args.tau_max_list.split(",")]
    else:
        taus = [1 / (2 * n), 1 / n, 3 / (2 * n), 2 / n]
    for t in taus:
        MixMode.adaptive(t)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dirs = [str(out / f"tau_max_{i}") for i in range(len(taus))]
    if args.parallel:
        with ProcessPoolExecutor() as pool:
            rows = list(pool.map(_sweep_one, [cfg] * len(taus), taus, dirs))
    else:
        rows = [_sweep_one(cfg, t, d) for t, d in zip(taus, dirs)]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau_max", "val_acc", "avg_active_experts"])
        for tau_max, acc, avg in rows:
            w.writerow([repr(tau_max), f"{acc:.4f}", "" if avg is None else f"{avg:.4f}"])
            print(f"tau_max={tau_max:.6g} val_acc={acc:.4f} avg_active={avg}")
    return EXIT_OK


def _add_experiment_flags(p):
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["lora", "topk", "fixed", "adamole"],
                   help="mixing rule; 'lora' folds N*r into a single expert")
    p.add_argument("--tau-max", type=float, help="upper bound of the adaptive threshold")
    p.add_argument("--tau", type=float, help="threshold for --mode fixed (default 1/N)")
    p.add_argument("--top-k", type=int, help="K for --mode topk (default 2)")
    p.add_argument("--experts", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adamole", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one configuration")
    _add_experiment_flags(p_run)
    p_run.add_argument("--quiet", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--tolerance", type=float, default=1e-5)
    p_gc.add_argument("--n-seeds", type=int, default=1)
    p_gc.add_argument("--verbose", action="store_true", help="list every parameter group")
    p_gc.set_defaults(func=cmd_gradcheck)

    p_sw = sub.add_parser("sweep", help="train one adamole model per tau_max")
    _add_experiment_flags(p_sw)
    p_sw.add_argument("--tau-max-list", help="comma-separated values (default 1/(2N),1/N,3/(2N),2/N)")
    p_sw.add_argument("--parallel", action="store_true", help="run sweep entries in worker processes")
    p_sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except (AdamoleError, OSError, TypeError) as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
