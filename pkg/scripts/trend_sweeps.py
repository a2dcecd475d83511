"""Input-length, momentum and top-k sweeps on the desk benchmark (matched seeds).

Finished runs are kept in <results>/trends.json, so an interrupted sweep resumes.
With --seed other than 0 the runs go to trends_seed<N>.json (a robustness check).

    python3 scripts/trend_sweeps.py --results results --work /tmp/syncvis_runs
"""

import argparse
import logging

from syncvis.experiments import TREND_RUNS, desk_train_config, run_trends


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--results", default="results")
    p.add_argument("--work", default="runs")
    p.add_argument("--only", nargs="*", choices=sorted(TREND_RUNS), help="subset of runs")
    p.add_argument("--seed", type=int, default=0, help="training seed (the benchmark data stay fixed)")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    name = "trends.json" if args.seed == 0 else f"trends_seed{args.seed}.json"
    done = run_trends(args.results, args.work, args.only, desk_train_config().replace(seed=args.seed), name)
    for name, rec in done.items():
        print(f"{name:12s} AP {rec['AP']:6.2f}  AP50 {rec['AP50']:6.2f}  mean IoU {rec['mean_iou']:.3f}")


if __name__ == "__main__":
    main()
