"""Command line entry point: one subcommand per experiment unit.

Every command resolves its configuration, writes ``resolved_config`` under
``<out>/<run_id>/`` and only then produces results in the same directory.
Failures print a single ``error: <kind>: <message>`` line and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis, experiment, quantizer, synthdata
from . import numerics as nx
from .config import ConfigError, RunConfig, load
from .hybrid import LayoutSpec, build_mask, mask_csv
from .model import (CheckpointError, ModelError, attention_flop_count, decode_container, dense_speedup,
                    encode_container, load_checkpoint, save_checkpoint)
from .training import evaluate, prepare

CODEBOOK_MAGIC = b"HVQ1"


class CLIError(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(args) -> RunConfig:
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.out is not None:
        overrides["run.out"] = args.out
    if getattr(args, "run_id", None):
        overrides["run.id"] = args.run_id
    return load(args.config, overrides)


def run_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out) / cfg.run_id
    d.mkdir(parents=True, exist_ok=True)
    (d / "resolved_config").write_text(cfg.text())
    return d


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _checkpoint(args, cfg: RunConfig) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / cfg.run_id / "model.hvc"
    if not path.exists():
        raise CLIError(f"checkpoint not found: {path}")
    return path


def _load_for(cfg: RunConfig, args):
    model, _ = load_checkpoint(_checkpoint(args, cfg), expect=cfg.model_config())
    _, test = experiment.dataset(cfg.data)
    return model, prepare(model, test, cfg.quant.downsample)


def save_codebook(path, cb: quantizer.Codebook, cfg: RunConfig) -> None:
    header = {k: v for k, v in cfg.to_flat().items() if k.startswith(("quant.", "data."))}
    Path(path).write_bytes(encode_container(header, {"vectors": cb.vectors}, magic=CODEBOOK_MAGIC))


def load_codebook(path) -> quantizer.Codebook:
    _, tensors = decode_container(Path(path).read_bytes(), magic=CODEBOOK_MAGIC)
    if "vectors" not in tensors:
        raise CheckpointError("codebook file has no 'vectors' tensor")
    return quantizer.Codebook(vectors=tensors["vectors"], frozen=True)


def _fmt_acc(acc: dict) -> list[list[str]]:
    return [[k, f"{v:.6f}"] for k, v in acc.items()]


# ---------------------------------------------------------------- commands

def cmd_fit_quantizer(args) -> int:
    cfg = resolve(args)
    out = run_dir(cfg)
    cb = experiment.codebook(cfg.quant, cfg.data)
    save_codebook(out / "codebook.hvq", cb, cfg)
    _write_rows(out / "codebook_fit.csv", ["group", "iteration", "mean_sq_error"],
                [[g, i, f"{e:.8f}"] for g, errs in enumerate(cb.history) for i, e in enumerate(errs)])
    print(f"codebook {cb.groups}x{cb.entries}x{cb.group_dim} -> {out / 'codebook.hvq'}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve(args)
    out = run_dir(cfg)
    res = experiment.run(cfg, log_path=out / "metrics.csv")
    save_checkpoint(out / "model.hvc", res.model, {"run.hash": experiment.config_hash(cfg)})
    acc = res.evaluate()
    _write_rows(out / "eval.csv", ["metric", "value"], _fmt_acc(acc))
    print(" ".join(f"{k}={v:.4f}" for k, v in acc.items()))
    return 0


def cmd_eval(args) -> int:
    cfg = resolve(args)
    out = run_dir(cfg)
    model, test = _load_for(cfg, args)
    acc = evaluate(model, test)
    _write_rows(out / "eval.csv", ["metric", "value"], _fmt_acc(acc))
    print(" ".join(f"{k}={v:.4f}" for k, v in acc.items()))
    return 0


def cmd_probe(args) -> int:
    cfg = resolve(args)
    out = run_dir(cfg)
    model, test = _load_for(cfg, args)
    reports = analysis.probe_model(model, test, seed=cfg.seed)
    reports += analysis.probe_model(model, test, seed=cfg.seed, shuffle_labels=True)
    analysis.write_probe_csv(reports, out / "probe.csv")
    for r in reports:
        print(f"{r.representation:9s} {r.task} {r.labels:8s} {r.top1:.4f}")
    return 0


def cmd_attn(args) -> int:
    cfg = resolve(args)
    out = run_dir(cfg)
    model, test = _load_for(cfg, args)
    idx = np.arange(min(args.n_samples, len(test.split)))
    rep = analysis.attn_mass(model, test, idx, layer=args.layer)
    analysis.write_attn_csv(rep, out / "attn.csv", sample_ids=idx)
    print(f"anchor>patch on {rep.dominance:.3f} of {len(idx)} samples "
          f"(anchor mean {rep.anchor_mean.mean():.4f}, patch mean {rep.patch_mean.mean():.4f})")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve(args)
    out = run_dir(cfg)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    cache = Path(args.cache) if args.cache else out / "cache"
    rows = analysis.run_sweep(args.axis, values, cfg, seeds, cache_dir=cache)
    analysis.write_sweep_csv(rows, out / "sweep.csv")
    for v, m in analysis.median_by_value(rows).items():
        print(f"{args.axis}={v} median acc_all={m:.4f}")
    failed = [r for r in rows if r.error]
    for r in failed:
        print(f"run failed: {args.axis}={r.value} seed={r.seed}: {r.error}", file=sys.stderr)
    return 0


def cmd_mask_dump(args) -> int:
    cfg = resolve(args)
    out = run_dir(cfg)
    layout = LayoutSpec(args.n_d, args.n_v, args.n_b, args.n_w, cfg.model.fusion)
    text = mask_csv(build_mask(layout, cfg.model.topology))
    (out / "mask.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def bench_report(n_d: int, n_v: int, n_b: int, n_w: int, cfg: RunConfig, fusion: str = "pre") -> dict:
    """Exact attention-count accounting for one layout, plus the uncompressed ratio."""
    tc = cfg.model_config().transformer
    layout = LayoutSpec(n_d, n_v, n_b, n_w, fusion)
    per_pair = 2 * tc.d_model * tc.n_layers  # QK^T plus AV multiply-adds
    dense_full = per_pair * (n_v + n_w) ** 2
    counts = attention_flop_count(layout, tc, cfg.model.topology)
    text_view = n_b + n_w  # what a text query pays once visual tokens are dropped from the cache
    compressed = per_pair * text_view ** 2
    return {
        "tokens": counts["tokens"],
        "dense_total": counts["dense"]["total"],
        "sparse_total": counts["sparse"]["total"],
        "text_sparse_total": counts["text_sparse"]["total"],
        "uncompressed_dense_total": dense_full,
        "compressed_dense_total": compressed,
        "dense_ratio": Fraction(dense_full, compressed),
        "speedup_formula": dense_speedup(n_v, n_w, n_b),
        "speedup_limit_L0": dense_speedup(n_v, 0, n_b),
    }


def cmd_bench(args) -> int:
    cfg = resolve(args)
    out = run_dir(cfg)
    rep = bench_report(args.n_d, args.n_v, args.n_b, args.n_w, cfg)
    if args.time:
        mcfg = replace(cfg.model_config(), channels="continuous")
        from .model import HybridModel
        model = HybridModel(mcfg)
        rng = np.random.default_rng(cfg.seed)
        feats = rng.standard_normal((1, mcfg.n_patches, mcfg.d_enc)).astype(np.float32)
        with nx.no_grad():
            t = time.perf_counter()
            for _ in range(args.time):
                model.forward(feats, None, np.zeros((1, 2), dtype=np.int64))
            rep["forward_ms"] = 1000 * (time.perf_counter() - t) / args.time
    rows = [[k, str(v), f"{float(v):.6g}"] for k, v in rep.items()]
    _write_rows(out / "bench.csv", ["quantity", "exact", "approx"], rows)
    for k, exact, approx in rows:
        print(f"{k:26s} {exact:>24s}  ~{approx}")
    return 0


def cmd_data_stats(args) -> int:
    cfg = resolve(args)
    out = run_dir(cfg)
    tr, te = experiment.dataset(cfg.data)
    rows = []
    for name, split in (("train", tr), ("test", te)):
        st = synthdata.stats(split)
        for k, v in st.items():
            rows.append([name, k, v])
    _write_rows(out / "data_stats.csv", ["split", "stat", "value"], rows)
    for r in rows:
        print(*r)
    return 0


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="run.seed")
    p.add_argument("--out", metavar="DIR", help="run.out (outputs go to DIR/<run.id>)")
    p.add_argument("--run-id", dest="run_id", help="run.id")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def _ckpt(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint (default: <out>/<run.id>/model.hvc)")


def _layout_flags(p: argparse.ArgumentParser, n_d: int, n_v: int, n_b: int, n_w: int) -> None:
    p.add_argument("--n_d", type=int, default=n_d, help="anchor tokens")
    p.add_argument("--n_v", type=int, default=n_v, help="patch tokens")
    p.add_argument("--n_b", type=int, default=n_b, help="bottleneck tokens")
    p.add_argument("--n_w", type=int, default=n_w, help="text tokens")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybridvoco", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-quantizer", help="fit the frozen multi-group codebook")
    _common(p)
    p.set_defaults(fn=cmd_fit_quantizer)

    p = sub.add_parser("train", help="train one model; writes model.hvc, metrics.csv, eval.csv")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="held-out accuracy of a checkpoint")
    _common(p)
    _ckpt(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("probe", help="linear probes on z, anchors and patches; writes probe.csv")
    _common(p)
    _ckpt(p)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("attn", help="bottleneck attention over anchors vs patches; writes attn.csv")
    _common(p)
    _ckpt(p)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=64, help="held-out samples")
    p.add_argument("--layer", type=int, default=-1, help="transformer block index")
    p.set_defaults(fn=cmd_attn)

    p = sub.add_parser("sweep", help="train across one ablation axis; writes sweep.csv")
    _common(p)
    p.add_argument("--axis", required=True, choices=analysis.AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--cache", metavar="DIR", help="checkpoint cache (default: <run dir>/cache)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("mask-dump", help="print the attention mask for a layout as CSV")
    _common(p)
    _layout_flags(p, 1, 2, 1, 1)
    p.set_defaults(fn=cmd_mask_dump)

    p = sub.add_parser("bench", help="exact attention-count accounting (and optional timing)")
    _common(p)
    _layout_flags(p, 0, 576, 1, 0)
    p.add_argument("--time", type=int, default=0, metavar="REPS", help="also time REPS forward passes")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("data-stats", help="synthetic dataset summary")
    _common(p)
    p.set_defaults(fn=cmd_data_stats)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CLIError, ModelError, quantizer.QuantizerError, analysis.AnalysisError,
            ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
