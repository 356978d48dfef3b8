"""Build a simplex ETF, check its geometry and score a few features against both halves.

Run: python3 demos/subspace_scores.py
"""

import numpy as np

from owdet.energy import score_subspaces
from owdet.etf import build_simplex_etf


def main():
    frame = build_simplex_etf(K=128, d=256, seed=0)
    print("Gram errors:", frame.gram_errors())
    rng = np.random.default_rng(0)
    probes = {
        "zero": np.zeros(256),
        "known row x4": 4.0 * frame.known_half[0],
        "unknown row x4": 4.0 * frame.unknown_half[0],
        "random": rng.normal(0, 1, 256),
    }
    for name, f in probes.items():
        s = score_subspaces(frame, f)
        print(f"{name:>15}: s_k {s.s_known:7.3f}  s_u {s.s_unknown:7.3f}  offset {s.offset:+.3f}")


if __name__ == "__main__":
    main()
