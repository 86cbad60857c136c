"""Parameter and MAC tables for every backbone/variant pair at 16x112x112."""
import argparse
from pathlib import Path

from rcnet.analysis import compare_costs, count_macs, write_csv
from rcnet.arch import VARIANTS, ArchSpec, Model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--classes", type=int, default=400)
    ap.add_argument("--input-size", type=int, nargs=3, default=(16, 112, 112))
    ap.add_argument("--out", default="runs/costs")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    summary = []
    for backbone in ("resnet18", "resnet34", "resnet50"):
        reports = [count_macs(Model(ArchSpec(backbone, v, args.classes, tuple(args.input_size)))) for v in VARIANTS]
        for r in reports:
            write_csv(out / f"{backbone}_{r.variant}.csv", r.rows())
        for row in compare_costs(reports):
            summary.append({"backbone": backbone, **row})
            print(f"{backbone:9s} {row['variant']:8s} params {row['params'] / 1e6:7.2f}M (x{row['params_ratio']:.2f})"
                  f"  MACs {row['macs'] / 1e9:7.2f}G (x{row['macs_ratio']:.2f})")
    write_csv(out / "summary.csv", summary)


if __name__ == "__main__":
    main()
