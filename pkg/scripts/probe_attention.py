"""Linear probes and bottleneck attention for trained hybrid models, per seed.

    python scripts/probe_attention.py --seeds 0,1,2,3,4 --out runs/probe_attention
"""
import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from hybridvoco import analysis, experiment
from hybridvoco.config import load
from hybridvoco.training import prepare


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--n-samples", type=int, default=64)
    ap.add_argument("--out", default="runs/probe_attention")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = load(args.config)
    idx = np.arange(args.n_samples)
    for s in (int(x) for x in args.seeds.split(",")):
        cfg = replace(base.override({"layout.channels": "hybrid"}), seed=s)
        r = experiment.run(cfg, out / "cache")
        reports = analysis.probe_model(r.model, r.test_data, s) + analysis.probe_model(r.model, r.test_data, s, True)
        analysis.write_probe_csv(reports, out / f"probe_seed{s}.csv")
        att = analysis.attn_mass(r.model, r.test_data, idx)
        analysis.write_attn_csv(att, out / f"attn_seed{s}.csv", idx)
        fresh = experiment.build_model(cfg)
        data = prepare(fresh, r.test_data.split.subset(idx), cfg.quant.downsample)
        null = analysis.attn_mass(fresh, data, hook=analysis.tied_anchor_hook(fresh.layout(data.text.shape[1]), s))
        probes = " ".join(f"{p.representation}/{p.task}={p.top1:.2f}" for p in reports if p.labels == "true")
        print(f"seed {s}: dominance {att.dominance:.2f} (null {null.dominance:.2f}); {probes}", flush=True)


if __name__ == "__main__":
    main()
