"""Run the 2x2 EUS x EKD grid for one seed and print U-Rec and Previous mAP per cell.

Run: python3 demos/ablation_grid.py [seed]
"""

import sys

from owdet.experiment import default_config, run_ablation


def main(seed=0):
    grid = run_ablation(default_config().with_seed(seed))
    print(f"{'EUS':>4} {'EKD':>4} " + " ".join(f"{'t' + str(t):>14}" for t in range(1, 5)))
    for (eus, ekd), res in grid.items():
        cells = []
        for r in res.reports:
            urec = f"{r.u_recall:5.1f}" if r.u_recall_defined else "    -"
            prev = "    -" if r.previous_map is None else f"{r.previous_map:5.1f}"
            cells.append(f"{urec} / {prev}".rjust(14))
        print(f"{'on' if eus else 'off':>4} {'on' if ekd else 'off':>4} " + " ".join(cells))
    print("cells: U-Rec / Previous mAP")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
