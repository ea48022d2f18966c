"""Target-driven sanitization on the backdoor scenario, one random target per seed.

Usage: python scripts/run_mitigation.py --seeds 10
"""

import argparse

from inffor import experiments


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    args = p.parse_args()
    cfg = experiments.BackdoorConfig()
    print("seed status     iters adv_removed clean_removed asr_before asr_after")
    for s in range(args.seeds):
        r = experiments.run_mitigation(cfg, s)
        print(f"{s:4d} {r['status']:<10} {r['iterations']:5d} {r['adv_removed']:11.3f} {r['clean_removed']:13.4f} "
              f"{r['overall_asr_before']:10.2f} {r['overall_asr_after']:9.2f}", flush=True)


if __name__ == "__main__":
    main()
