"""Flat ``key = value`` run configuration covering every module."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig, TransformerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 2048
    n_test: int = 512
    n_S: int = 8
    n_D: int = 8
    seed: int = 0


@dataclass(frozen=True)
class QuantConfig:
    G: int = 4
    K: int = 32
    d_g: int = 4
    downsample: int = 8
    iters: int = 20
    seed: int = 0


# keys that other keys derive from; hidden from the flat namespace
_DERIVED = {"model.seed", "train.seed", "layout.q_dim", "model.vocab_size"}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    run_id: str = "run"
    out: str = "runs"

    # -- derived pieces -------------------------------------------------------
    def q_dim(self) -> int:
        m = self.model
        cells = (m.image_size // self.quant.downsample) ** 2
        return cells * self.quant.G * self.quant.d_g

    def vocab_size(self) -> int:
        # S answers, D answers, two task tokens, ask, eos
        return self.data.n_S + self.data.n_D + 4

    def model_config(self) -> ModelConfig:
        t = replace(self.model.transformer, seed=self.seed, vocab_size=max(self.vocab_size(), 2))
        return replace(self.model, transformer=t, q_dim=self.q_dim())

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    # -- flat form --------------------------------------------------------------
    def to_flat(self) -> dict[str, str]:
        flat = {}
        for prefix, obj in (("data", self.data), ("quant", self.quant), ("train", self.train)):
            for f in fields(obj):
                flat[f"{prefix}.{f.name}"] = _fmt(getattr(obj, f.name))
        flat.update(self.model.to_flat())
        flat["run.seed"] = str(self.seed)
        flat["run.id"] = self.run_id
        flat["run.out"] = self.out
        return {k: v for k, v in sorted(flat.items()) if k not in _DERIVED}

    @classmethod
    def keys(cls) -> list[str]:
        return list(cls().to_flat())

    def override(self, updates: dict[str, str]) -> "RunConfig":
        known = self.to_flat()
        unknown = sorted(set(updates) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        flat = {**known, **{k: str(v) for k, v in updates.items()}}
        return RunConfig.from_flat(flat)

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "RunConfig":
        base = cls()
        unknown = sorted(set(flat) - set(base.to_flat()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            data = _build(DataConfig, flat, "data")
            quant = _build(QuantConfig, flat, "quant")
            train = _build(TrainConfig, flat, "train")
            model = ModelConfig.from_flat({**base.model.to_flat(), **{k: v for k, v in flat.items()
                                                                         if k.startswith(("model.", "layout."))}})
            return cls(data, quant, model, train, int(flat.get("run.seed", base.seed)),
                       flat.get("run.id", base.run_id), flat.get("run.out", base.out))
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    def text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat().items())


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _build(cls, flat: dict[str, str], prefix: str):
    kw = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key in flat and key not in _DERIVED:
            kw[f.name] = _parse(flat[key], f.type)
    return cls(**kw)


def _parse(raw: str, typ: str):
    raw = raw.strip()
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise ConfigError(f"line {n}: duplicate key {k}")
        out[k] = v
    return out


def load(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.override(parse_text(Path(path).read_text()))
    if overrides:
        cfg = cfg.override(overrides)
    return cfg
