"""Iterations to 90% direction-task accuracy for identity vs. random hidden-kernel init."""
import argparse
import json

from rcnet.experiments import init_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--target", type=float, default=0.9)
    ap.add_argument("--max-iters", type=int, default=600)
    ap.add_argument("--out", help="optional JSON summary path")
    args = ap.parse_args()

    r = init_ablation(range(args.seeds), args.target, args.max_iters)
    for init, row in r.items():
        print(f"{init:9s} runs {row['runs']}  median {row['median']}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(r, fh, indent=2, default=str)


if __name__ == "__main__":
    main()
