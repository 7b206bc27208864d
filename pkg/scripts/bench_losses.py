"""Wall-clock cost of the tensor-space loss vs the decode+NMS loss as the
number of targets per frame grows."""

import argparse

from scenedistill.detection import GridShape
from scenedistill.evaluate import bench_loss_cost


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--counts", type=int, nargs="+", default=[1, 10, 25, 50])
    ap.add_argument("--trials", type=int, default=101)
    ap.add_argument("--grid", type=int, default=8)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    rows = bench_loss_cost(args.counts, args.trials, GridShape(s=args.grid, c=4), seed=args.seed)
    print(f"{'targets':>7} {'gated-mse ms':>12} {'decode+nms ms':>13}")
    for r in rows:
        print(f"{r['n_targets']:7d} {r['bounded_ms']:12.4f} {r['nms_ms']:13.4f}")


if __name__ == "__main__":
    main()
