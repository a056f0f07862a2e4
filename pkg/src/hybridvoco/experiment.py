"""End-to-end run plumbing: data -> frozen quantizer -> model -> train -> eval, with caching."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from . import quantizer, synthdata
from .config import DataConfig, QuantConfig, RunConfig
from .model import HybridModel, load_checkpoint, save_checkpoint
from .training import Prepared, evaluate, prepare, train, write_log

# bump when training or model numerics change so cached checkpoints are not reused
CACHE_VERSION = 2

_data_cache: dict[DataConfig, tuple] = {}
_cb_cache: dict[tuple, quantizer.Codebook] = {}


def dataset(cfg: DataConfig):
    if cfg not in _data_cache:
        _data_cache[cfg] = synthdata.make_dataset(cfg.n_train, cfg.n_test, cfg.n_S, cfg.n_D, cfg.seed)
    return _data_cache[cfg]


def codebook(qcfg: QuantConfig, dcfg: DataConfig) -> quantizer.Codebook:
    key = (qcfg, dcfg)
    if key not in _cb_cache:
        train_split, _ = dataset(dcfg)
        feats = quantizer.extract_batch(train_split.images, qcfg.downsample, qcfg.G, qcfg.d_g)
        _cb_cache[key] = quantizer.fit_codebook(feats, qcfg.K, qcfg.iters, qcfg.seed)
    return _cb_cache[key]


def config_hash(cfg: RunConfig) -> str:
    flat = {k: v for k, v in cfg.to_flat().items() if not k.startswith("run.") or k == "run.seed"}
    flat["cache.version"] = str(CACHE_VERSION)
    return hashlib.sha1(json.dumps(flat, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Run:
    cfg: RunConfig
    model: HybridModel
    log: list[dict]
    train_data: Prepared
    test_data: Prepared

    def evaluate(self) -> dict[str, float]:
        return evaluate(self.model, self.test_data)


def build_model(cfg: RunConfig) -> HybridModel:
    mcfg = cfg.model_config()
    cb = codebook(cfg.quant, cfg.data) if mcfg.use_discrete else None
    return HybridModel(mcfg, cb)


def prepared(model: HybridModel, cfg: RunConfig) -> tuple[Prepared, Prepared]:
    tr, te = dataset(cfg.data)
    return prepare(model, tr, cfg.quant.downsample), prepare(model, te, cfg.quant.downsample)


def run(cfg: RunConfig, cache_dir: str | Path | None = None, log_path=None) -> Run:
    """Train (or load a cached checkpoint for) one configuration."""
    ckpt = log = None
    if cache_dir is not None:
        cache = Path(cache_dir)
        cache.mkdir(parents=True, exist_ok=True)
        h = config_hash(cfg)
        ckpt, log = cache / f"{h}.hvc", cache / f"{h}.csv"
        if ckpt.exists() and log.exists():
            model, _ = load_checkpoint(ckpt)
            rows = _read_log(log)
            tr, te = prepared(model, cfg)
            return Run(cfg, model, rows, tr, te)
    model = build_model(cfg)
    tr, te = prepared(model, cfg)
    res = train(model, tr, cfg.train_config(), log_path=log_path)
    if ckpt is not None:
        write_log(res.log, log)
        save_checkpoint(ckpt, model, {"run.hash": config_hash(cfg)})
    return Run(cfg, model, res.log, tr, te)


def _read_log(path: Path) -> list[dict]:
    with open(path) as fh:
        return [{"step": int(r["step"]), "loss": float(r["loss"]), "ce": float(r["ce"]),
                 "kl": float(r["kl"]), "lr": float(r["lr"])} for r in csv.DictReader(fh)]
