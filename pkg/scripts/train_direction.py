"""Direction task: full recurrent network vs. the same network with w_hh pinned at zero."""
import argparse
import json
import logging
from pathlib import Path

from rcnet.analysis import write_csv
from rcnet.experiments import DirectionSetup, direction_separation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/direction")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    r = direction_separation(DirectionSetup(iters=args.iters, seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("rcn", "zero_hidden"):
        write_csv(out / f"{name}_log.csv", r[name].pop("log"))
        print(f"{name:12s} video acc {r[name]['video_acc']:.3f}  ({r[name]['seconds']:.0f}s)")
    print(f"gap {100 * r['gap']:.1f} points")
    (out / "summary.json").write_text(json.dumps(r, indent=2))


if __name__ == "__main__":
    main()
