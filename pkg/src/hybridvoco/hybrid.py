"""Hybrid sequence layout, disentanglement mask, and mask graph utilities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

FUSIONS = ("pre", "post", "mean")
# star: visual tokens see only themselves, text sees no visual token
# full: visual tokens attend causally to each other, text still sees no visual token
# causal: plain causal mask, the uncompressed reference
TOPOLOGIES = ("star", "full", "causal")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class LayoutSpec:
    n_d: int
    n_v: int
    n_b: int = 1
    n_w: int = 1
    fusion: str = "pre"

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise LayoutError(f"unknown fusion {self.fusion!r}")
        if min(self.n_d, self.n_v, self.n_w) < 0:
            raise LayoutError("token counts must be non-negative")
        if self.n_b < 1:
            raise LayoutError("at least one bottleneck token is required")
        if self.fusion == "mean" and self.n_v == 0 and self.n_d > 0:
            raise LayoutError("mean fusion needs patch rows to fold anchors into")

    @property
    def n_visual(self) -> int:
        return self.n_v if self.fusion == "mean" else self.n_d + self.n_v

    @property
    def total(self) -> int:
        return self.n_visual + self.n_b + self.n_w

    def with_text(self, n_w: int) -> "LayoutSpec":
        return LayoutSpec(self.n_d, self.n_v, self.n_b, n_w, self.fusion)

    def anchor_positions(self) -> np.ndarray:
        if self.fusion == "mean":
            return np.arange(0)
        start = 0 if self.fusion == "pre" else self.n_v
        return np.arange(start, start + self.n_d)

    def patch_positions(self) -> np.ndarray:
        start = self.n_d if self.fusion == "pre" else 0
        return np.arange(start, start + self.n_v)

    def voco_positions(self) -> np.ndarray:
        return np.arange(self.n_visual, self.n_visual + self.n_b)

    def text_positions(self) -> np.ndarray:
        s = self.n_visual + self.n_b
        return np.arange(s, s + self.n_w)

    def roles(self) -> list[str]:
        r = [""] * self.total
        for name, pos in (("anchor", self.anchor_positions()), ("patch", self.patch_positions()),
                          ("voco", self.voco_positions()), ("text", self.text_positions())):
            for p in pos:
                r[p] = name
        return r


def assemble(v_d: Tensor | None, V: Tensor | None, voco_emb: Tensor, W: Tensor, fusion: str = "pre") -> Tensor:
    """Concatenate along the token axis (axis -2); works for [T, d] and [B, T, d]."""
    parts = [t for t in (v_d, V, voco_emb, W) if t is not None]
    d = {t.shape[-1] for t in parts}
    if len(d) != 1:
        raise LayoutError(f"token widths differ: {sorted(d)}")
    empty = lambda t: t is None or t.shape[-2] == 0  # noqa: E731
    if fusion == "pre":
        seq = [v_d, V, voco_emb, W]
    elif fusion == "post":
        seq = [V, v_d, voco_emb, W]
    elif fusion == "mean":
        if not empty(v_d) and not empty(V):
            V = V + nx.mean(v_d, axis=-2, keepdims=True)
        seq = [V, voco_emb, W]
    else:
        raise LayoutError(f"unknown fusion {fusion!r}")
    return nx.concat([t for t in seq if not empty(t)], axis=-2)


@dataclass(frozen=True)
class AttentionMask:
    allow: np.ndarray  # [total, total] bool, True = may attend
    layout: LayoutSpec
    topology: str = "star"


def build_mask(layout: LayoutSpec, topology: str = "star") -> AttentionMask:
    if topology not in TOPOLOGIES:
        raise LayoutError(f"unknown topology {topology!r}")
    T = layout.total
    allow = np.tril(np.ones((T, T), dtype=bool))
    vis = np.zeros(T, dtype=bool)
    vis[:layout.n_visual] = True
    text = np.zeros(T, dtype=bool)
    text[layout.text_positions()] = True
    if topology == "star":
        allow &= ~(vis[:, None] & vis[None, :] & ~np.eye(T, dtype=bool))
    if topology in ("star", "full"):
        allow &= ~(text[:, None] & vis[None, :])
    allow.setflags(write=False)
    return AttentionMask(allow, layout, topology)


def mask_to_additive(m: AttentionMask) -> Tensor:
    return Tensor(np.where(m.allow, 0.0, -np.inf))


def reachability(m: AttentionMask | np.ndarray, depth: int, relay_blocked=()) -> np.ndarray:
    """infl[p, r] is True iff position p can influence position r through ``depth`` layers.

    Each layer adds an edge j -> i wherever i may attend to j. Positions listed in
    ``relay_blocked`` keep their own value but pass nothing on.
    """
    allow = m.allow if isinstance(m, AttentionMask) else np.asarray(m, dtype=bool)
    edge = allow.T.copy()  # edge[j, i]: j feeds i
    T = edge.shape[0]
    for p in relay_blocked:
        edge[p, :] = False
        edge[:, p] = False
    edge |= np.eye(T, dtype=bool)  # residual stream
    infl = np.eye(T, dtype=bool)
    for _ in range(depth):
        infl = (infl.astype(np.int64) @ edge.astype(np.int64)) > 0
    return infl


def mask_csv(m: AttentionMask) -> str:
    return "\n".join(",".join("1" if v else "0" for v in row) for row in m.allow) + "\n"
