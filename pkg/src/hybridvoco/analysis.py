"""Representation probes, bottleneck attention mass, and the ablation sweep harness."""
from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import experiment
from .config import RunConfig
from .encoders import encode_continuous, encode_discrete
from .hybrid import build_mask
from .model import HybridModel
from .synthdata import d_bin
from .training import Prepared, batch_forward

REPRESENTATIONS = ("z_voco", "v_d_mean", "V_mean")


class AnalysisError(ValueError):
    pass


@dataclass
class ProbeReport:
    representation: str
    task: str
    top1: float
    n: int
    labels: str = "true"  # or "permuted" for the shuffled-label baseline


@dataclass
class AttnReport:
    anchor_mean: np.ndarray  # [n_samples]
    patch_mean: np.ndarray
    heatmap: np.ndarray  # [n_samples, n_d + n_cols]
    row_mass: np.ndarray  # total mass over allowed positions per sample
    blocked_mass: np.ndarray  # mass on blocked positions per sample (always 0)
    layer: int

    @property
    def dominance(self) -> float:
        """Fraction of samples whose anchors receive more attention per position than patches."""
        return float((self.anchor_mean > self.patch_mean).mean())


@dataclass
class SweepResult:
    axis: str
    value: str
    seed: int
    acc_S: float
    acc_D: float
    acc_all: float
    retention: float
    error: str = ""


# ---------------------------------------------------------------- representations

def extract_representations(model: HybridModel, data: Prepared, idx=None) -> dict[str, np.ndarray]:
    """z from the bottleneck token (after the last block), plus the pre-transformer
    channel outputs mean-pooled over anchors and over patches."""
    idx = np.arange(len(data.split)) if idx is None else np.asarray(idx)
    out = {}
    with nx.no_grad():
        res = batch_forward(model, data, idx)
        out["z_voco"] = res.z.z.mean(axis=1)
        if model.cfg.use_discrete:
            out["v_d_mean"] = encode_discrete(data.q[idx], model.discrete).data.mean(axis=1)
        if model.cfg.use_continuous:
            V = encode_continuous(None, model.continuous, features=data.patch_feats[idx])
            out["V_mean"] = V.data.mean(axis=1)
    return out


def linear_probe(reps: np.ndarray, labels: np.ndarray, splits, seed: int = 0, iters: int = 500,
                 lr: float = 0.1, representation: str = "", task: str = "") -> ProbeReport:
    """Multinomial logistic regression, full-batch gradient descent on standardised inputs."""
    train_idx, test_idx = (np.asarray(s) for s in splits)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels[train_idx])) < 2:
        raise AnalysisError("probe needs at least two classes in the training split")
    x = np.asarray(reps, dtype=np.float64)
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0) + 1e-8
    x = (x - mu) / sd
    n_cls = int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((x.shape[1], n_cls)) * 0.01
    b = np.zeros(n_cls)
    xt, yt = x[train_idx], labels[train_idx]
    onehot = np.eye(n_cls)[yt]
    for _ in range(iters):
        logits = xt @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(yt)
        W -= lr * (xt.T @ g)
        b -= lr * g.sum(axis=0)
    pred = (x[test_idx] @ W + b).argmax(axis=1)
    return ProbeReport(representation, task, float((pred == labels[test_idx]).mean()), len(test_idx))


def probe_labels(data: Prepared) -> dict[str, np.ndarray]:
    s = data.split
    return {"S": s.s_class, "D": np.array([d_bin(v, s.n_D) for v in s.d_value])}


def probe_splits(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def probe_model(model: HybridModel, data: Prepared, seed: int = 0, shuffle_labels: bool = False) -> list[ProbeReport]:
    reps = extract_representations(model, data)
    labels = probe_labels(data)
    splits = probe_splits(len(data.split), seed)
    rng = np.random.default_rng(seed + 1)
    out = []
    for name in REPRESENTATIONS:
        if name not in reps:
            continue
        for task in ("S", "D"):
            y = rng.permutation(labels[task]) if shuffle_labels else labels[task]
            rep = linear_probe(reps[name], y, splits, seed, representation=name, task=task)
            rep.labels = "permuted" if shuffle_labels else "true"
            out.append(rep)
    return out


def write_probe_csv(reports: list[ProbeReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["representation", "task", "labels", "top1", "n"])
        for r in reports:
            w.writerow([r.representation, r.task, r.labels, f"{r.top1:.6f}", r.n])


# ---------------------------------------------------------------- attention mass

def attn_mass(model: HybridModel, data: Prepared, idx=None, layer: int = -1, n_cols: int = 12,
              hook=None) -> AttnReport:
    """Head-averaged attention of the first bottleneck token over anchors and patches.

    ``layer`` indexes the transformer blocks (default: the final one).
    """
    layout = model.layout(data.text.shape[1])
    if layout.fusion == "mean":
        raise AnalysisError("mean fusion has no anchor rows to measure")
    anchors, patches = layout.anchor_positions(), layout.patch_positions()
    if len(anchors) == 0 or len(patches) == 0:
        raise AnalysisError("attention split needs both anchor and patch positions")
    voco = layout.voco_positions()[0]
    idx = np.arange(len(data.split)) if idx is None else np.asarray(idx)
    with nx.no_grad():
        res = batch_forward(model, data, idx, hook=hook)
    row = res.attn[:, layer, :, voco, :].mean(axis=1)  # [B, T]
    allowed = build_mask(layout, model.cfg.topology).allow[voco]
    cols = np.concatenate([anchors, patches[:n_cols]])
    return AttnReport(anchor_mean=row[:, anchors].mean(axis=1), patch_mean=row[:, patches].mean(axis=1),
                      heatmap=row[:, cols], row_mass=row[:, allowed].sum(axis=1),
                      blocked_mass=np.abs(row[:, ~allowed]).sum(axis=1), layer=layer)


def tied_anchor_hook(layout, seed: int = 0):
    """Null-model hook: each anchor row entering the first block becomes a copy of a
    randomly chosen patch row of the same sample, so anchors and patches are exchangeable."""
    anchors, patches = layout.anchor_positions(), layout.patch_positions()
    rng = np.random.default_rng(seed)

    def hook(l, h):
        if l != 0:
            return h
        x = h.data.copy()
        src = patches[rng.integers(0, len(patches), size=(x.shape[0], len(anchors)))]
        x[:, anchors] = np.take_along_axis(x, src[:, :, None], axis=1)
        return nx.Tensor(x)

    return hook


def write_attn_csv(rep: AttnReport, path, sample_ids=None) -> None:
    ids = range(len(rep.heatmap)) if sample_ids is None else sample_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + [f"pos_{i}" for i in range(rep.heatmap.shape[1])])
        for sid, r in zip(ids, rep.heatmap):
            w.writerow([sid] + [f"{v:.6f}" for v in r])


# ---------------------------------------------------------------- sweeps

AXES = ("channels", "n_d", "n_b", "fusion", "K", "G", "beta", "pd_depth", "topology")
SWEEP_FIELDS = ("axis", "value", "seed", "acc_S", "acc_D", "acc_all", "retention")


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    key = {"channels": "layout.channels", "n_d": "layout.n_d", "n_b": "layout.n_b", "fusion": "layout.fusion",
           "K": "quant.K", "G": "quant.G", "beta": "train.beta_kl", "pd_depth": "layout.pd_depth",
           "topology": "layout.topology"}.get(axis)
    if key is None:
        raise AnalysisError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    return cfg.override({key: str(value)})


def reference_config(cfg: RunConfig) -> RunConfig:
    """Uncompressed upper bound: patches only, plain causal mask, same budget."""
    return cfg.override({"layout.channels": "continuous", "layout.topology": "causal", "layout.n_b": "1"})


def run_sweep(axis: str, values, base: RunConfig, seeds, cache_dir=None, reference: bool = True) -> list[SweepResult]:
    rows = []
    ref_acc = {}
    if reference:
        for s in seeds:
            rcfg = replace(reference_config(base), seed=s)
            ref_acc[s] = experiment.run(rcfg, cache_dir).evaluate()["acc_all"]
    for v in values:
        for s in seeds:
            try:
                cfg = replace(apply_axis(base, axis, v), seed=s)
                acc = experiment.run(cfg, cache_dir).evaluate()
                ret = acc["acc_all"] / ref_acc[s] if reference and ref_acc[s] > 0 else float("nan")
                rows.append(SweepResult(axis, str(v), s, acc["acc_S"], acc["acc_D"], acc["acc_all"], ret))
            except Exception as e:  # recorded per run; the sweep keeps going
                rows.append(SweepResult(axis, str(v), s, float("nan"), float("nan"), float("nan"),
                                        float("nan"), f"{type(e).__name__}: {e}"))
    return rows


def median_by_value(rows: list[SweepResult], field: str = "acc_all") -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        v = getattr(r, field)
        if not np.isnan(v):
            out.setdefault(r.value, []).append(v)
    return {k: statistics.median(v) for k, v in out.items()}


def write_sweep_csv(rows: list[SweepResult], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([r.axis, r.value, r.seed] + [f"{getattr(r, k):.6f}" for k in SWEEP_FIELDS[3:]])
