"""Timing of the bootstrap nowcast and the mortality fit at full district count."""
import argparse
import json

from fatalnowcast import experiments

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--districts", type=int, default=412)
p.add_argument("--days", type=int, default=50)
p.add_argument("--nboot", type=int, default=10_000)
p.add_argument("--out", default="results/desk_scale.json")
args = p.parse_args()

r = experiments.desk_scale_timing(n_districts=args.districts, n_days=args.days, n_boot=args.nboot)
print(json.dumps(r, indent=1))
experiments.save_json(r, args.out)
