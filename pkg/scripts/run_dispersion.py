"""Dispersion estimate on Poisson-true data."""
import argparse

import numpy as np

from fatalnowcast import experiments

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--replicates", type=int, default=100)
p.add_argument("--n", type=int, default=600)
p.add_argument("--out", default="results/dispersion.csv")
args = p.parse_args()

frame = experiments.as_frame(
    [{"seed": s, "phi_hat": experiments.dispersion_replicate(s, n=args.n)} for s in range(args.replicates)]
)
phi = frame["phi_hat"].to_numpy()
print(f"phi-hat median {np.median(phi):.3f}; inside [0.8, 1.2]: {np.mean((phi >= 0.8) & (phi <= 1.2)):.0%}")
experiments.save_csv(frame, args.out)
