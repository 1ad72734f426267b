"""Post-pretraining Fréchet distance: selected public subset vs the full public set.

    python scripts/rq2_selection_vs_full.py --seeds 5
"""

import argparse

from privsynth import experiments


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    trials = []
    print("seed  ratio  fd_selected  fd_full")
    for s in range(args.seeds):
        t = experiments.rq2_trial(s)
        trials.append(t)
        print(f"{s:4d}  {t['selection_ratio']:5.2f}  {t['selected']:11.3f}  {t['full']:7.3f}")
    med = experiments.medians(trials)
    print(f"median      {med['selected']:11.3f}  {med['full']:7.3f}")


if __name__ == "__main__":
    main()
