"""Which expert each cluster prefers after training, and how concentrated that choice is."""

import argparse
from dataclasses import replace

import numpy as np

from adamole.config import apply_overrides, build_experiment, load_config
from adamole.telemetry import preferred_expert_entropy
from adamole.training import train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/cluster_adamole.json")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--steps", type=int, default=3000)
    args = ap.parse_args()

    base = load_config(args.config)
    for seed in range(args.seeds):
        cfg = apply_overrides(base, seed=seed)
        cfg = replace(cfg, train=replace(cfg.train, lr=args.lr, max_steps=args.steps))
        model, task = build_experiment(cfg)
        report = train(model, task, cfg.resolved_train())
        _, records = model.forward(task.x_val)
        weights = records[(0, "fc")].weights.weights
        ent = preferred_expert_entropy(weights, task.group_val, task.n_groups)
        top = [int(np.bincount(np.argmax(weights[task.group_val == g], axis=1),
                               minlength=weights.shape[1]).argmax()) for g in range(task.n_groups)]
        print(f"seed {seed}: val_acc {report.final_val_acc:.3f} entropy "
              + " ".join(f"{e:.2f}" for e in ent) + f" favourite experts {top}")


if __name__ == "__main__":
    main()
