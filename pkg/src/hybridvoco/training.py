"""Answer-only autoregressive loss with an L2 latent penalty, AdamW, and the training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .model import HybridModel
from .numerics import Tensor
from .quantizer import Codebook, extract_batch, quantize_batch
from .synthdata import Split

LOG_FIELDS = ("step", "loss", "ce", "kl", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    total_steps: int = 3000
    batch_size: int = 32
    beta_kl: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be non-negative")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr at ``warmup_steps``, then cosine decay (1-based steps).

    The decay reaches 0 one step after ``total_steps`` so the last step still moves.
    """
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps - 1) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def hybrid_loss(logits: Tensor, answer_tokens, answer_positions, z: Tensor | None, beta_kl: float):
    """Mean CE over answer positions plus beta_kl * ||z||^2 / 2.

    The regularizer is averaged over the batch and, for [B, n_b, d] latents, over the
    bottleneck tokens, so its strength does not change with n_b.

    logits: [B, T, V]; answer_positions: [P] sequence indices whose logits predict
    answer_tokens [B, P]. Returns (total, ce, kl) tensors.
    """
    pos = np.asarray(answer_positions, dtype=np.int64)
    if pos.size == 0:
        raise ValueError("no answer positions")
    if logits.ndim == 2:
        logits = nx.reshape(logits, (1,) + logits.shape)
    B, _, V = logits.shape
    tgt = np.asarray(answer_tokens, dtype=np.int64).reshape(B, pos.size)
    picked = nx.index(logits, (slice(None), pos))
    ce = nx.cross_entropy(nx.reshape(picked, (B * pos.size, V)), tgt.reshape(-1))
    if z is None or beta_kl == 0:
        kl = Tensor(0.0)
    else:
        zz = z if z.ndim >= 2 else nx.reshape(z, (1, -1))
        rows = zz.shape[0] * (zz.shape[1] if zz.ndim == 3 else 1)
        kl = nx.sum(zz * zz) * (0.5 * beta_kl / rows)
    return ce + kl, ce, kl


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str) -> bool:
    return name.endswith(".w") or name.startswith("blocks.") and name.split(".")[-1] in ("wq", "wk", "wv", "wo")


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
               cfg: TrainConfig, step: int) -> float:
    """One decoupled-weight-decay Adam update in place; ``step`` is 1-based. Returns the lr used."""
    lr = lr_at(step, cfg)
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new = p.data - lr * upd
        if cfg.weight_decay and decays(name):
            new = new - lr * cfg.weight_decay * p.data
        p.data = new.astype(np.float32)
    return lr


# ---------------------------------------------------------------- batches

@dataclass
class Prepared:
    """Frozen-channel outputs for a split, computed once."""
    patch_feats: np.ndarray | None  # [N, n_v, d_enc]
    q: np.ndarray | None  # [N, |q|]
    indices: np.ndarray | None
    text: np.ndarray  # [N, n_w] question + answer
    targets: np.ndarray  # [N, 2] answer, eos
    split: Split


def quantizer_inputs(images: np.ndarray, codebook: Codebook, downsample: int) -> tuple[np.ndarray, np.ndarray]:
    feats = extract_batch(images, downsample, codebook.groups, codebook.group_dim)
    return quantize_batch(feats, codebook)


def prepare(model: HybridModel, split: Split, downsample: int = 8) -> Prepared:
    cfg = model.cfg
    pf = model.continuous.featurize(split.images) if cfg.use_continuous else None
    q = idx = None
    if cfg.use_discrete:
        if model.codebook is None:
            raise TrainingError("discrete channel requested without a codebook")
        idx, q = quantizer_inputs(split.images, model.codebook, downsample)
    questions = split.questions()
    text = np.concatenate([questions, split.answer[:, None]], axis=1)
    targets = np.stack([split.answer, np.full(len(split), split.vocab.eos)], axis=1)
    return Prepared(pf, q, idx, text, targets, split)


def answer_positions(model: HybridModel, n_question: int) -> np.ndarray:
    """Sequence indices whose logits predict the answer token and the EOS after it."""
    start = model.layout(n_question + 1).text_positions()[0]
    return np.array([start + n_question - 1, start + n_question])


def batch_forward(model: HybridModel, data: Prepared, idx, hook=None):
    pf = None if data.patch_feats is None else data.patch_feats[idx]
    q = None if data.q is None else data.q[idx]
    return model.forward(pf, q, data.text[idx], hook=hook)


def batch_loss(model: HybridModel, data: Prepared, idx, beta_kl: float):
    out = batch_forward(model, data, idx)
    vp = model.layout(data.text.shape[1]).voco_positions()
    z = nx.index(out.hidden, (slice(None), vp))
    pos = answer_positions(model, data.text.shape[1] - 1)
    return hybrid_loss(out.logits, data.targets[idx], pos, z, beta_kl)


@dataclass
class TrainResult:
    model: HybridModel
    log: list[dict]


def train(model: HybridModel, data: Prepared, cfg: TrainConfig, log_path=None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    params = model.trainable()
    state = AdamState()
    n = len(data.split)
    order = rng.permutation(n)
    cursor = 0
    rows = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    try:
        for step in range(1, cfg.total_steps + 1):
            if cursor + cfg.batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            for p in params.values():
                p.grad = None
            try:
                loss, ce, kl = batch_loss(model, data, idx, cfg.beta_kl)
            except nx.NonFiniteError as e:
                raise TrainingError(f"non-finite value at step {step}: {e}") from e
            if not np.isfinite(loss.data):
                raise TrainingError(f"loss is NaN at step {step}")
            nx.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            lr = adamw_step(params, grads, state, cfg, step)
            row = {"step": step, "loss": float(loss.data), "ce": float(ce.data), "kl": float(kl.data), "lr": lr}
            rows.append(row)
            if writer is not None:
                writer.writerow([row[k] if k == "step" else repr(row[k]) for k in LOG_FIELDS])
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, rows)


def evaluate(model: HybridModel, data: Prepared, batch: int = 256) -> dict[str, float]:
    """Greedy accuracy of the first answer token, overall and per task."""
    pos = answer_positions(model, data.text.shape[1] - 1)[0]
    preds = []
    with nx.no_grad():
        for s in range(0, len(data.split), batch):
            idx = np.arange(s, min(s + batch, len(data.split)))
            out = batch_forward(model, data, idx)
            preds.append(out.logits.data[:, pos].argmax(axis=-1))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    ok = pred == data.split.answer
    task = data.split.task
    return {"acc_S": float(ok[task == 0].mean()), "acc_D": float(ok[task == 1].mean()), "acc_all": float(ok.mean())}


def write_log(rows: list[dict], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["step"]] + [repr(r[k]) for k in LOG_FIELDS[1:]])
