"""Adaptive mixing against a single LoRA of the same total rank N*r."""

import argparse
from dataclasses import replace

from adamole.config import apply_overrides, build_experiment, load_config
from adamole.training import train


def run(cfg):
    model, task = build_experiment(cfg)
    report = train(model, task, cfg.resolved_train())
    return report.final_val_acc, model.census()["trainable"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/cluster_adamole.json")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--experts", type=int, default=8)
    ap.add_argument("--rank", type=int, default=2)
    ap.add_argument("--lr", type=float)
    args = ap.parse_args()

    base = load_config(args.config)
    if args.lr is not None:
        base = replace(base, train=replace(base.train, lr=args.lr))
    variants = {
        "adamole": dict(mode="adamole", tau_max=1 / args.experts),
        "topk2": dict(mode="topk", top_k=2),
        "lora": dict(mode="lora"),
    }
    print("seed,variant,experts,rank,trainable,val_acc")
    for seed in range(args.seeds):
        for name, kw in variants.items():
            cfg = apply_overrides(base, seed=seed, experts=args.experts, rank=args.rank, **kw)
            acc, trainable = run(cfg)
            print(f"{seed},{name},{cfg.model.n_experts},{cfg.model.lora_rank},{trainable},{acc:.4f}")


if __name__ == "__main__":
    main()
