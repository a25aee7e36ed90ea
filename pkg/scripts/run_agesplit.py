"""District effect spread in the 80+ group versus the younger groups."""
import argparse

from fatalnowcast import experiments

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--replicates", type=int, default=50)
p.add_argument("--sd-young", type=float, default=0.2)
p.add_argument("--sd-old", type=float, default=0.7)
p.add_argument("--out", default="results/agesplit.csv")
args = p.parse_args()

rows = []
for s in range(args.replicates):
    old, young = experiments.agesplit_replicate(s, sd_young=args.sd_young, sd_old=args.sd_old)
    rows.append({"seed": s, "sd_80plus": old, "sd_80minus": young})
    print(rows[-1])
frame = experiments.as_frame(rows)
print(f"sd(80+) > sd(under 80) in {(frame['sd_80plus'] > frame['sd_80minus']).mean():.0%}")
experiments.save_csv(frame, args.out)
