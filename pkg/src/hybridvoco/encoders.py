"""Continuous patch channel and discrete anchor projector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class EncoderError(ValueError):
    pass


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[..., H, W, C] -> [..., N, p*p*C] with patches in row-major grid order."""
    images = np.asarray(images, dtype=np.float32)
    *lead, H, W, C = images.shape
    if H % patch_size or W % patch_size:
        raise EncoderError(f"image {H}x{W} not divisible by patch size {patch_size}")
    gh, gw = H // patch_size, W // patch_size
    x = images.reshape(*lead, gh, patch_size, gw, patch_size, C)
    nl = len(lead)
    perm = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    return x.transpose(perm).reshape(*lead, gh * gw, patch_size * patch_size * C)


def _ln_rows(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)


@dataclass
class ContinuousChannel:
    """Frozen random patch featurizer followed by the trainable projector ``proj_v``."""
    patch_size: int
    embed: np.ndarray  # [patch_dim, d_enc], frozen
    proj_v: Tensor  # [d_enc, d_model]
    bias_v: Tensor  # [d_model]

    @classmethod
    def create(cls, patch_size: int, channels: int, d_enc: int, d_model: int, rng: np.random.Generator):
        patch_dim = patch_size * patch_size * channels
        embed = (rng.standard_normal((patch_dim, d_enc)) / np.sqrt(patch_dim)).astype(np.float32)
        proj = rng.standard_normal((d_enc, d_model)) * (1.0 / np.sqrt(d_enc))
        return cls(patch_size, embed, nx.parameter(proj), nx.parameter(np.zeros(d_model)))

    def featurize(self, images: np.ndarray) -> np.ndarray:
        """Frozen E_v: [..., H, W, C] -> [..., N, d_enc]."""
        return _ln_rows(patchify(images, self.patch_size) @ self.embed).astype(np.float32)

    def parameters(self) -> dict[str, Tensor]:
        return {"proj_v.w": self.proj_v, "proj_v.b": self.bias_v}


def encode_continuous(image: np.ndarray, ch: ContinuousChannel, features: np.ndarray | None = None) -> Tensor:
    """V = P_v(E_v(image)); pass precomputed ``features`` to skip the frozen featurizer."""
    f = ch.featurize(image) if features is None else features
    return nx.linear(Tensor(f), ch.proj_v, ch.bias_v)


@dataclass
class DiscreteChannel:
    """MLP from the flat quantized vector q to ``n_d`` anchor tokens.

    ``layers`` holds (weight, bias) pairs. depth 2 is GELU(W2 GELU(W1 q)); depth 1
    is a single linear map; deeper stacks keep a GELU after every layer.
    """
    layers: list[tuple[Tensor, Tensor]]
    n_d: int
    d_model: int

    @classmethod
    def create(cls, q_dim: int, h_d: int, n_d: int, d_model: int, rng: np.random.Generator, depth: int = 2):
        if depth < 1:
            raise EncoderError("projector depth must be >= 1")
        dims = [q_dim] + [h_d] * (depth - 1) + [n_d * d_model]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            w = rng.standard_normal((a, b)) * np.sqrt(2.0 / a)
            layers.append((nx.parameter(w), nx.parameter(np.zeros(b))))
        return cls(layers, n_d, d_model)

    @property
    def W1(self) -> Tensor:
        return self.layers[0][0]

    @property
    def W2(self) -> Tensor:
        return self.layers[1][0]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"pd.{i}.w"] = w
            out[f"pd.{i}.b"] = b
        return out


def encode_discrete(q, ch: DiscreteChannel) -> Tensor:
    """q: [|q|] or [B, |q|] (never differentiated) -> v_d: [n_d, d] or [B, n_d, d]."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float32)
    single = q.ndim == 1
    if q.shape[-1] != ch.W1.shape[0]:
        raise EncoderError(f"|q|={q.shape[-1]} but projector expects {ch.W1.shape[0]}")
    h = Tensor(q.reshape(1, -1) if single else q)
    linear_only = ch.depth == 1
    for w, b in ch.layers:
        h = nx.linear(h, w, b)
        if not linear_only:
            h = nx.gelu(h)
    if single:
        return nx.reshape(h, (ch.n_d, ch.d_model))
    return nx.reshape(h, (h.shape[0], ch.n_d, ch.d_model))
