"""Final Fréchet distance after DP fine-tuning for selection ratios 10%, 50% and 100%.

    python scripts/rq3_selection_ratio.py --seeds 5
"""

import argparse

from privsynth import experiments


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    ratios = sorted(experiments.RQ3_K2)
    print("seed  " + "  ".join(f"fd@{int(100 * r):>3d}%" for r in ratios))
    trials = []
    for s in range(args.seeds):
        t = experiments.rq3_trial(s)
        trials.append(t)
        print(f"{s:4d}  " + "  ".join(f"{t[r]:8.3f}" for r in ratios))
    med = experiments.medians(trials)
    print("median" + "  ".join(f"{med[r]:8.3f}" for r in ratios))


if __name__ == "__main__":
    main()
