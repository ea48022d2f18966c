"""Target-identification AUPRC of FIT and the four baselines on the backdoor scenario.

Usage: python scripts/run_target_id.py --seeds 10
"""

import argparse
import time

from inffor import experiments


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    args = p.parse_args()
    cfg = experiments.BackdoorConfig()
    t0 = time.perf_counter()
    rows = []
    for s in range(args.seeds):
        r = experiments.run_target_id(cfg, s)
        rows.append(r)
        print(f"seed {s}: " + "  ".join(f"{k} {v:.3f}" for k, v in r.items()), flush=True)
    print("mean:   " + "  ".join(f"{k} {m:.3f}" for k, (m, _) in experiments.summarize(rows).items()))
    print(f"{args.seeds} seeds in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
