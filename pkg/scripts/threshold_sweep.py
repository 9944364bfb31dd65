"""Average active experts and accuracy across tau_max, over several seeds.

    python scripts/threshold_sweep.py --seeds 3 --tau-max-list 0.0625,0.125,0.1875,0.25,1.0
"""

import argparse
from dataclasses import replace

import numpy as np

from adamole.config import apply_overrides, build_experiment, load_config
from adamole.training import train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/cluster_adamole.json")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--tau-max-list", default="")
    ap.add_argument("--lr", type=float)
    args = ap.parse_args()

    base = load_config(args.config)
    n = base.model.n_experts
    taus = [float(t) for t in args.tau_max_list.split(",")] if args.tau_max_list else [
        1 / (2 * n), 1 / n, 3 / (2 * n), 2 / n]
    print("tau_max,seed,val_acc,avg_active")
    summary = {}
    for tau_max in taus:
        for seed in range(args.seeds):
            cfg = apply_overrides(base, seed=seed, tau_max=tau_max)
            if args.lr is not None:
                cfg = replace(cfg, train=replace(cfg.train, lr=args.lr))
            model, task = build_experiment(cfg)
            report = train(model, task, cfg.resolved_train())
            avg = report.stats.overall_average()
            summary.setdefault(tau_max, []).append((report.final_val_acc, avg))
            print(f"{tau_max:.6g},{seed},{report.final_val_acc:.4f},{avg:.4f}")
    print("# mean over seeds")
    for tau_max, rows in summary.items():
        acc, avg = np.mean(rows, axis=0)
        print(f"# tau_max={tau_max:.6g} val_acc={acc:.4f} avg_active={avg:.3f}")


if __name__ == "__main__":
    main()
