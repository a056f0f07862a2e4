"""Masked pre-norm transformer over the hybrid sequence, plus checkpoints and op counts."""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field, fields, asdict
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .encoders import ContinuousChannel, DiscreteChannel, encode_continuous, encode_discrete
from .hybrid import AttentionMask, LayoutSpec, assemble, build_mask
from .numerics import Tensor
from .quantizer import Codebook

MAGIC = b"HVC1"
FORMAT_VERSION = 1
MAX_TEXT = 8


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class TransformerConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    vocab_size: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ModelConfig:
    """Everything needed to rebuild a model's parameter shapes."""
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    n_d: int = 4
    n_b: int = 1
    fusion: str = "pre"
    topology: str = "star"
    channels: str = "hybrid"  # hybrid | continuous | discrete
    image_size: int = 32
    image_channels: int = 1
    patch_size: int = 8
    d_enc: int = 32
    h_d: int = 128
    pd_depth: int = 2
    q_dim: int = 256

    @property
    def use_continuous(self) -> bool:
        return self.channels in ("hybrid", "continuous")

    @property
    def use_discrete(self) -> bool:
        return self.channels in ("hybrid", "discrete") and self.n_d > 0

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def layout(self, n_w: int) -> LayoutSpec:
        return LayoutSpec(self.n_d if self.use_discrete else 0,
                          self.n_patches if self.use_continuous else 0,
                          self.n_b, n_w, self.fusion)

    def to_flat(self) -> dict[str, str]:
        out = {f"model.{k}": str(v) for k, v in asdict(self.transformer).items()}
        for f in fields(self):
            if f.name != "transformer":
                out[f"layout.{f.name}"] = str(getattr(self, f.name))
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "ModelConfig":
        tkw, kw = {}, {}
        for f in fields(TransformerConfig):
            if f"model.{f.name}" in flat:
                tkw[f.name] = int(flat[f"model.{f.name}"])
        for f in fields(cls):
            key = f"layout.{f.name}"
            if f.name != "transformer" and key in flat:
                kw[f.name] = flat[key] if f.type == "str" else int(flat[key])
        return cls(transformer=TransformerConfig(**tkw), **kw)


@dataclass
class VocoLatent:
    z: np.ndarray  # [..., n_b, d_model]


@dataclass
class ForwardOut:
    logits: Tensor  # [B, T, V]
    hidden: Tensor  # final residual stream, before the output norm
    z: VocoLatent
    attn: np.ndarray  # [B, L, H, T, T]
    v_d: Tensor | None = None
    V: Tensor | None = None


def _init(rng, shape, scale=0.02):
    return nx.parameter(rng.standard_normal(shape) * scale)


class Transformer:
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, f = cfg.d_model, cfg.d_ff
        self.params: dict[str, Tensor] = {}
        p = self.params
        for l in range(cfg.n_layers):
            p[f"blocks.{l}.ln1.g"] = nx.parameter(np.ones(d))
            p[f"blocks.{l}.ln1.b"] = nx.parameter(np.zeros(d))
            for n in ("q", "k", "v"):
                p[f"blocks.{l}.w{n}"] = _init(rng, (d, d), 1 / np.sqrt(d))
            p[f"blocks.{l}.wo"] = _init(rng, (d, d), 1 / np.sqrt(d) / np.sqrt(2 * cfg.n_layers))
            p[f"blocks.{l}.bo"] = nx.parameter(np.zeros(d))
            p[f"blocks.{l}.ln2.g"] = nx.parameter(np.ones(d))
            p[f"blocks.{l}.ln2.b"] = nx.parameter(np.zeros(d))
            p[f"blocks.{l}.ff1.w"] = _init(rng, (d, f), 1 / np.sqrt(d))
            p[f"blocks.{l}.ff1.b"] = nx.parameter(np.zeros(f))
            p[f"blocks.{l}.ff2.w"] = _init(rng, (f, d), 1 / np.sqrt(f) / np.sqrt(2 * cfg.n_layers))
            p[f"blocks.{l}.ff2.b"] = nx.parameter(np.zeros(d))
        p["lnf.g"] = nx.parameter(np.ones(d))
        p["lnf.b"] = nx.parameter(np.zeros(d))
        p["head.w"] = _init(rng, (d, cfg.vocab_size), 1 / np.sqrt(d))
        p["head.b"] = nx.parameter(np.zeros(cfg.vocab_size))

    def forward(self, X: Tensor, allow: np.ndarray,
                hook: Callable[[int, Tensor], Tensor] | None = None) -> tuple[Tensor, Tensor, np.ndarray]:
        """X: [B, T, d]. ``hook(l, H)`` may replace the residual stream entering layer l
        (l == n_layers is the stream after the last block)."""
        cfg, p = self.cfg, self.params
        B, T, d = X.shape
        if allow.shape != (T, T):
            raise ModelError(f"mask is {allow.shape} but sequence has {T} tokens")
        H, dk = cfg.n_heads, cfg.d_k
        scale = 1.0 / np.sqrt(dk)
        h = X
        attns = []
        for l in range(cfg.n_layers):
            if hook is not None:
                h = hook(l, h)
            pre = f"blocks.{l}."
            a_in = nx.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])

            def heads(t):
                return nx.transpose(nx.reshape(t, (B, T, H, dk)), (0, 2, 1, 3))

            q = heads(nx.linear(a_in, p[pre + "wq"]))
            k = heads(nx.linear(a_in, p[pre + "wk"]))
            v = heads(nx.linear(a_in, p[pre + "wv"]))
            o, att = nx.attention(q, k, v, allow, scale)
            if o.blocked_rows:
                raise ModelError(f"layer {l}: {o.blocked_rows} attention rows fully blocked")
            attns.append(att)
            o = nx.reshape(nx.transpose(o, (0, 2, 1, 3)), (B, T, d))
            h = h + nx.linear(o, p[pre + "wo"], p[pre + "bo"])
            m_in = nx.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            ff = nx.silu(nx.linear(m_in, p[pre + "ff1.w"], p[pre + "ff1.b"]))
            h = h + nx.linear(ff, p[pre + "ff2.w"], p[pre + "ff2.b"])
        if hook is not None:
            h = hook(cfg.n_layers, h)
        out = nx.layer_norm(h, p["lnf.g"], p["lnf.b"])
        logits = nx.linear(out, p["head.w"], p["head.b"])
        return logits, h, np.stack(attns, axis=1)


class HybridModel:
    """Both visual channels, the bottleneck token, text embeddings and the transformer."""

    def __init__(self, cfg: ModelConfig, codebook: Codebook | None = None):
        self.cfg = cfg
        self.codebook = codebook
        tc = cfg.transformer
        rng = np.random.default_rng(tc.seed)
        d = tc.d_model
        self.continuous = ContinuousChannel.create(cfg.patch_size, cfg.image_channels, cfg.d_enc, d, rng)
        self.discrete = DiscreteChannel.create(cfg.q_dim, cfg.h_d, max(cfg.n_d, 1), d, rng, cfg.pd_depth)
        self.params: dict[str, Tensor] = {}
        self.params.update(self.continuous.parameters())
        self.params.update(self.discrete.parameters())
        self.params["voco"] = _init(rng, (cfg.n_b, d))
        self.params["tok_emb"] = _init(rng, (tc.vocab_size, d))
        self.params["pos.anchor"] = _init(rng, (max(cfg.n_d, 1), d))
        self.params["pos.patch"] = _init(rng, (cfg.n_patches, d))
        self.params["pos.text"] = _init(rng, (MAX_TEXT, d))
        self.transformer = Transformer(tc, rng)
        self.params.update(self.transformer.params)

    # -- frozen parts ---------------------------------------------------------
    def frozen_state(self) -> dict[str, np.ndarray]:
        out = {"embed_v": self.continuous.embed}
        if self.codebook is not None:
            out["codebook.vectors"] = self.codebook.vectors
        return out

    def trainable(self) -> dict[str, Tensor]:
        """Parameters that actually receive gradients for this channel configuration."""
        skip = set()
        if not self.cfg.use_continuous:
            skip |= {"proj_v.w", "proj_v.b", "pos.patch"}
        if not self.cfg.use_discrete:
            skip |= {k for k in self.params if k.startswith("pd.")} | {"pos.anchor"}
        return {k: v for k, v in self.params.items() if k not in skip}

    # -- forward --------------------------------------------------------------
    def embed_text(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[-1]
        if n > MAX_TEXT:
            raise ModelError(f"text length {n} exceeds {MAX_TEXT}")
        return nx.embedding(self.params["tok_emb"], ids) + nx.index(self.params["pos.text"], slice(0, n))

    def encode(self, patch_feats: np.ndarray | None, q: np.ndarray | None) -> tuple[Tensor | None, Tensor | None]:
        cfg = self.cfg
        V = v_d = None
        if cfg.use_continuous:
            V = encode_continuous(None, self.continuous, features=patch_feats) + self.params["pos.patch"]
        if cfg.use_discrete:
            v_d = encode_discrete(q, self.discrete) + self.params["pos.anchor"]
        return v_d, V

    def assemble(self, v_d, V, text_ids: np.ndarray) -> tuple[Tensor, AttentionMask]:
        B, n_w = text_ids.shape
        layout = self.cfg.layout(n_w)
        voco = nx.reshape(self.params["voco"], (1, self.cfg.n_b, -1))
        voco = nx.concat([voco] * B, axis=0) if B > 1 else voco
        X = assemble(v_d, V, voco, self.embed_text(text_ids), layout.fusion)
        return X, build_mask(layout, self.cfg.topology)

    def forward(self, patch_feats, q, text_ids, hook=None) -> ForwardOut:
        """Batched forward: patch_feats [B, N, d_enc], q [B, |q|], text_ids [B, n_w]."""
        text_ids = np.atleast_2d(np.asarray(text_ids, dtype=np.int64))
        v_d, V = self.encode(patch_feats, q)
        X, mask = self.assemble(v_d, V, text_ids)
        logits, h, attn = self.transformer.forward(X, mask.allow, hook)
        vp = mask.layout.voco_positions()
        z = VocoLatent(h.data[:, vp[0]:vp[-1] + 1, :])
        return ForwardOut(logits, h, z, attn, v_d, V)

    def layout(self, n_w: int) -> LayoutSpec:
        return self.cfg.layout(n_w)


def forward(X: Tensor, mask: AttentionMask, model: Transformer, hook=None):
    """Bare transformer pass over an assembled sequence: (logits, z, attn)."""
    squeeze = X.ndim == 2
    if squeeze:
        X = nx.reshape(X, (1,) + X.shape)
    if X.shape[1] != mask.layout.total:
        raise ModelError(f"sequence has {X.shape[1]} rows, layout expects {mask.layout.total}")
    logits, h, attn = model.forward(X, mask.allow, hook)
    vp = mask.layout.voco_positions()
    z = VocoLatent(h.data[:, vp[0]:vp[-1] + 1, :])
    if squeeze:
        return nx.reshape(logits, logits.shape[1:]), VocoLatent(z.z[0]), attn[0]
    return logits, z, attn


@dataclass
class Generation:
    tokens: list[int]
    truncated: bool


def generate(model: HybridModel, patch_feats, q, question: list[int], max_len: int = 4,
             eos: int | None = None) -> Generation:
    """Greedy decoding; generated tokens join the text region under the same mask rules."""
    text = list(question)
    out: list[int] = []
    with nx.no_grad():
        for _ in range(max_len):
            if len(text) >= MAX_TEXT:
                return Generation(out, True)
            pf = None if patch_feats is None else np.asarray(patch_feats)[None]
            qq = None if q is None else np.asarray(q)[None]
            res = model.forward(pf, qq, np.array([text]))
            tok = int(np.argmax(res.logits.data[0, -1]))
            out.append(tok)
            if eos is not None and tok == eos:
                return Generation(out, False)
            text.append(tok)
    return Generation(out, eos is not None)


# ---------------------------------------------------------------- op counts

def attention_flop_count(layout: LayoutSpec, cfg: TransformerConfig, topology: str = "star") -> dict:
    """Multiply-add counts of QK^T and AV, summed over heads and layers.

    ``dense`` charges every (i, j) pair, ``sparse`` only pairs the mask allows.
    ``text_sparse`` restricts the sparse count to text query rows.
    """
    allow = build_mask(layout, topology).allow
    T, d, L = layout.total, cfg.d_model, cfg.n_layers
    text_rows = layout.text_positions()

    def counts(pairs: int) -> dict:
        qk = pairs * d * L
        av = pairs * d * L
        return {"qk_flops": qk, "av_flops": av, "total": qk + av}

    return {"dense": counts(T * T), "sparse": counts(int(allow.sum())),
            "text_sparse": counts(int(allow[text_rows].sum())), "tokens": T}


def dense_speedup(n_visual: int, n_text: int, n_kept: int = 1) -> Fraction:
    """Exact dense attention-cost ratio (N + L)^2 / (n_kept + L)^2."""
    return Fraction((n_visual + n_text) ** 2, (n_kept + n_text) ** 2)


# ---------------------------------------------------------------- checkpoints

def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def encode_container(header: dict[str, str], tensors: dict[str, np.ndarray], magic: bytes = MAGIC) -> bytes:
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    text = "".join(f"{k}={v}\n" for k, v in sorted(header.items())).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        _write_tensor(buf, name, tensors[name])
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_container(raw: bytes, magic: bytes = MAGIC) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if len(raw) < 16:
        raise CheckpointError("truncated file")
    if raw[:4] != magic:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch")
    mv = memoryview(body)
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(mv):
            raise CheckpointError("truncated file")
        chunk = mv[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<I", take(4))
    header = {}
    for line in bytes(take(hlen)).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        header[k] = v
    (n,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n):
        (nl,) = struct.unpack("<H", take(2))
        name = bytes(take(nl)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(bytes(take(4 * count)), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(mv):
        raise CheckpointError("trailing bytes before checksum")
    return header, tensors


def save_checkpoint(path, model: HybridModel, extra: dict[str, str] | None = None) -> None:
    header = model.cfg.to_flat()
    if extra:
        header.update(extra)
    tensors = {k: v.data for k, v in model.params.items()}
    tensors.update(model.frozen_state())
    Path(path).write_bytes(encode_container(header, tensors))


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[HybridModel, dict[str, str]]:
    header, tensors = decode_container(Path(path).read_bytes())
    cfg = ModelConfig.from_flat(header)
    if expect is not None:
        want, got = expect.to_flat(), cfg.to_flat()
        diff = sorted(k for k in want if want[k] != got.get(k))
        if diff:
            raise ConfigMismatchError("config mismatch on " + ", ".join(
                f"{k} (checkpoint {got.get(k)}, expected {want[k]})" for k in diff))
    cb = None
    if "codebook.vectors" in tensors:
        cb = Codebook(vectors=tensors["codebook.vectors"], frozen=True)
    model = HybridModel(cfg, cb)
    for name, t in model.params.items():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name}")
        if tensors[name].shape != t.shape:
            raise ConfigMismatchError(f"tensor {name} has shape {tensors[name].shape}, config implies {t.shape}")
        t.data = tensors[name]
    model.continuous.embed = tensors["embed_v"]
    return model, header
