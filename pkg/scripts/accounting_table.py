"""Calibrated fine-tuning noise over a grid of budgets, steps and sampling rates.

    python scripts/accounting_table.py --sigma2 484 --delta 1e-5
"""

import argparse

from privsynth.accountant import PrivacyBudget, calibrate_sigma1, total_epsilon


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sigma2", type=float, default=484.0)
    ap.add_argument("--delta", type=float, default=1e-5)
    args = ap.parse_args()
    print("epsilon  steps    q      sigma1   achieved  alpha")
    for eps in (1.0, 5.0, 10.0):
        for steps in (100, 1000):
            for q in (0.01, 0.1):
                s1 = calibrate_sigma1(PrivacyBudget(eps, args.delta), steps, q, args.sigma2)
                got, order = total_epsilon(s1, steps, q, args.sigma2, args.delta)
                print(f"{eps:7.1f}  {steps:5d}  {q:5.2f}  {s1:8.4f}  {got:8.4f}  {order:5g}")


if __name__ == "__main__":
    main()
