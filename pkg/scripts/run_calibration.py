"""Nowcast interval coverage and point error over simulated replicates."""
import argparse
import json

from fatalnowcast import experiments

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--replicates", type=int, default=100)
p.add_argument("--nboot", type=int, default=2000)
p.add_argument("--out", default="results/calibration.json")
args = p.parse_args()

runs = [experiments.calibration_replicate(seed, n_boot=args.nboot) for seed in range(args.replicates)]
summary = experiments.summarize_calibration(runs)
print(json.dumps(summary, indent=1))
experiments.save_json(summary, args.out)
