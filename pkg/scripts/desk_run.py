"""Train the default configuration on the desk benchmark and store the held-out metrics.

    python3 scripts/desk_run.py --results results --work /tmp/syncvis_runs
"""

import argparse
import logging

from syncvis.experiments import desk_train_config, run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--results", default="results")
    p.add_argument("--work", default="runs")
    p.add_argument("--iterations", type=int, default=None, help="override for quick smoke runs")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    tcfg = desk_train_config()
    if args.iterations:
        tcfg = tcfg.replace(iterations=args.iterations)
    rec = run_desk(args.results, args.work, tcfg)
    print(f"mean IoU {rec['mean_iou']:.3f}  category rate {rec['category_rate']:.3f}  "
          f"AP {rec['AP']:.2f}  {rec['seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
