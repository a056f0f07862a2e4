"""Hybrid vs continuous-only vs discrete-only over several seeds.

    python scripts/channel_modes.py --seeds 0,1,2,3,4 --out runs/channel_modes
"""
import argparse
import csv
import statistics
from dataclasses import replace
from pathlib import Path

from hybridvoco import experiment
from hybridvoco.config import load

CHANNELS = ("hybrid", "continuous", "discrete")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="base config file")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs/channel_modes")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = load(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for ch in CHANNELS:
        for s in seeds:
            cfg = replace(base.override({"layout.channels": ch}), seed=s)
            acc = experiment.run(cfg, out / "cache").evaluate()
            rows.append({"channels": ch, "seed": s, **acc})
            print(f"{ch:10s} seed {s}: S={acc['acc_S']:.3f} D={acc['acc_D']:.3f} all={acc['acc_all']:.3f}", flush=True)
    with open(out / "channel_modes.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["channels", "seed", "acc_S", "acc_D", "acc_all"])
        w.writeheader()
        w.writerows(rows)
    print("medians")
    for ch in CHANNELS:
        med = {k: statistics.median(r[k] for r in rows if r["channels"] == ch) for k in ("acc_S", "acc_D", "acc_all")}
        print(f"  {ch:10s} S={med['acc_S']:.3f} D={med['acc_D']:.3f} all={med['acc_all']:.3f}")


if __name__ == "__main__":
    main()
