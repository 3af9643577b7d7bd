"""Train a tabular policy with DPO on random preferences and print the loss curve."""

import argparse

import numpy as np

from posttrain.dpo import DPOConfig, TabularPolicy, finite_diff_check, implicit_margins, mean_loss, train_dpo


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--prompts", type=int, default=4)
    ap.add_argument("--candidates", type=int, default=5)
    ap.add_argument("--pairs", type=int, default=12)
    ap.add_argument("--beta", type=float, default=0.1)
    ap.add_argument("--lr", type=float, default=0.5)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    pairs = []
    for _ in range(args.pairs):
        c, r = rng.choice(args.candidates, 2, replace=False)
        pairs.append((int(rng.integers(args.prompts)), int(c), int(r)))
    ref = TabularPolicy.random(args.prompts, args.candidates, seed=args.seed)
    cfg = DPOConfig(beta=args.beta, learning_rate=args.lr, steps=args.steps)

    print(f"gradient check rel err: {finite_diff_check(ref, pairs, cfg, 1e-5):.2e}")
    print(f"step {0:5d} loss {mean_loss(ref, ref, pairs, cfg.beta):.6f}")
    pol, trace = train_dpo(ref, pairs, cfg)
    for i in range(0, len(trace), max(1, len(trace) // 10)):
        print(f"step {i + 1:5d} loss {trace[i]:.6f}")
    m = implicit_margins(pol, ref, pairs, cfg.beta)
    print(f"final loss {trace[-1]:.6f}; implicit margins min {m.min():.4f} mean {m.mean():.4f}")


if __name__ == "__main__":
    main()
