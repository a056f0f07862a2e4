"""Run one or more ablation axes and write a sweep CSV per axis.

    python scripts/ablations.py --axes n_b,n_d,fusion --seeds 0,1,2 --out runs/ablations
"""
import argparse
from pathlib import Path

from hybridvoco import analysis
from hybridvoco.config import load

DEFAULT_VALUES = {
    "channels": ["hybrid", "continuous", "discrete"],
    "n_d": [1, 2, 4, 8],
    "n_b": [1, 2, 4],
    "fusion": ["pre", "post", "mean"],
    "K": [16, 32, 64],
    "G": [1, 2, 4],
    "beta": [0.0, 0.01, 0.1, 1.0],
    "pd_depth": [1, 2, 3],
    "topology": ["star", "full"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--axes", default="n_b", help=f"comma-separated subset of {','.join(analysis.AXES)}")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/ablations")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = load(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    for axis in args.axes.split(","):
        rows = analysis.run_sweep(axis, DEFAULT_VALUES[axis], base, seeds, cache_dir=out / "cache")
        analysis.write_sweep_csv(rows, out / f"sweep_{axis}.csv")
        for r in rows:
            if r.error:
                print(f"  {axis}={r.value} seed {r.seed}: {r.error}")
        med = analysis.median_by_value(rows)
        ret = analysis.median_by_value(rows, "retention")
        print(axis + ": " + ", ".join(f"{v}: acc {med[v]:.3f} ret {ret.get(v, float('nan')):.3f}" for v in med),
              flush=True)


if __name__ == "__main__":
    main()
