"""Multi-group vector quantizer: fixed patch statistics + per-group k-means codebooks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# stats per pooling cell, in bank order
_STATS = ("mean", "std", "absdx", "absdy")


class QuantizerError(ValueError):
    pass


def _cell_stats(cells: np.ndarray) -> np.ndarray:
    """cells: [..., h, w] -> [..., 4] (mean, std, mean |dx|, mean |dy|)."""
    mean = cells.mean(axis=(-2, -1))
    std = cells.std(axis=(-2, -1))
    dx = np.abs(np.diff(cells, axis=-1)).mean(axis=(-2, -1)) if cells.shape[-1] > 1 else np.zeros_like(mean)
    dy = np.abs(np.diff(cells, axis=-2)).mean(axis=(-2, -1)) if cells.shape[-2] > 1 else np.zeros_like(mean)
    return np.stack([mean, std, dx, dy], axis=-1)


def _feature_bank(patches: np.ndarray) -> np.ndarray:
    """patches: [P, s, s] -> [P, F] statistics ordered coarse to fine.

    Order: whole-patch (mean, std, |dx|, |dy|), then for 2x2 and 4x4 sub-cells
    each statistic over all cells (row-major) before moving to the next one.
    """
    P, s, _ = patches.shape
    cols = [_cell_stats(patches)]
    r = 2
    while s % r == 0 and s // r >= 1 and r <= s:
        c = s // r
        cells = patches.reshape(P, r, c, r, c).transpose(0, 1, 3, 2, 4).reshape(P, r * r, c, c)
        st = _cell_stats(cells)  # [P, r*r, 4]
        cols.append(st.transpose(0, 2, 1).reshape(P, 4 * r * r))
        r *= 2
    return np.concatenate(cols, axis=1)


def extract_group_features(image: np.ndarray, downsample: int = 8, groups: int = 4,
                           group_dim: int = 4) -> np.ndarray:
    """Deterministic featurizer: pooled statistics per non-overlapping cell, split into groups.

    ``image`` is [H, W, C] (channels are averaged). Returns [P_q, G, d_g] with
    P_q = (H / downsample) * (W / downsample), cells in row-major order.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    H, W, _ = image.shape
    if H % downsample or W % downsample:
        raise QuantizerError(f"image {H}x{W} not divisible by downsample {downsample}")
    gray = image.mean(axis=2)
    gh, gw = H // downsample, W // downsample
    patches = gray.reshape(gh, downsample, gw, downsample).transpose(0, 2, 1, 3).reshape(-1, downsample, downsample)
    bank = _feature_bank(patches)
    need = groups * group_dim
    if bank.shape[1] < need:
        raise QuantizerError(f"featurizer yields {bank.shape[1]} stats per cell, {need} requested")
    return bank[:, :need].reshape(-1, groups, group_dim).astype(np.float32)


def extract_batch(images: np.ndarray, downsample: int = 8, groups: int = 4, group_dim: int = 4) -> np.ndarray:
    return np.stack([extract_group_features(im, downsample, groups, group_dim) for im in images])


@dataclass
class Codebook:
    vectors: np.ndarray  # [G, K, d_g]
    frozen: bool = True
    history: list = field(default_factory=list)  # per-group error per Lloyd iteration

    @property
    def groups(self) -> int:
        return self.vectors.shape[0]

    @property
    def entries(self) -> int:
        return self.vectors.shape[1]

    @property
    def group_dim(self) -> int:
        return self.vectors.shape[2]


@dataclass
class QuantizedImage:
    indices: np.ndarray  # [P_q, G] int
    q: np.ndarray  # [P_q * G * d_g] float32
    recon_error: float


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # explicit differences (not the expanded form) so ties stay exact
    d = x[:, None, :].astype(np.float64) - c[None, :, :].astype(np.float64)
    return (d * d).sum(axis=2)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = _sqdist(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise QuantizerError(f"only {i} distinct points available for k={k}")
        pick = rng.choice(n, p=d2 / total)
        centers[i] = x[pick]
        d2 = np.minimum(d2, _sqdist(x, centers[i:i + 1])[:, 0])
    return centers


def kmeans(x: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> tuple[np.ndarray, list[float]]:
    """Lloyd iterations from a k-means++ start; returns centers and the error after each assignment."""
    x = np.asarray(x, dtype=np.float64)
    centers = kmeans_pp_init(x, k, rng)
    errors = []
    for _ in range(iters):
        d = _sqdist(x, centers)
        assign = d.argmin(axis=1)
        best = d[np.arange(len(x)), assign]
        errors.append(float(best.mean()))
        new = centers.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[assign == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            # reseed empties at the worst-served points; never raises the error
            order = np.argsort(-best, kind="stable")
            for j, p in zip(empty, order):
                new[j] = x[p]
        centers = new
    d = _sqdist(x, centers)
    errors.append(float(d.min(axis=1).mean()))
    return centers, errors


def fit_codebook(features: np.ndarray, K: int, iters: int = 20, seed: int = 0) -> Codebook:
    """Per-group k-means over every (sample, position) feature; returns a frozen codebook.

    ``features`` is [N, P_q, G, d_g] (or [M, G, d_g] already flattened).
    """
    f = np.asarray(features, dtype=np.float32)
    if f.ndim == 4:
        f = f.reshape(-1, f.shape[2], f.shape[3])
    M, G, dg = f.shape
    if M < K:
        raise QuantizerError(f"need at least K={K} feature vectors per group, got {M}")
    rng = np.random.default_rng(seed)
    vectors = np.empty((G, K, dg), dtype=np.float32)
    history = []
    for g in range(G):
        centers, errs = kmeans(f[:, g, :], K, iters, rng)
        vectors[g] = centers.astype(np.float32)
        history.append(errs)
    for g in range(G):
        d = _sqdist(vectors[g], vectors[g])
        np.fill_diagonal(d, np.inf)
        if d.min() <= 1e-12:
            raise QuantizerError(f"group {g} has duplicate codewords")
    return Codebook(vectors=vectors, frozen=True, history=history)


def quantize(features: np.ndarray, cb: Codebook) -> QuantizedImage:
    """Nearest codeword per (position, group) by squared L2; ties go to the lowest index."""
    if not cb.frozen:
        raise QuantizerError("codebook must be frozen before quantizing")
    f = np.asarray(features, dtype=np.float32)
    if f.ndim != 3 or f.shape[1:] != (cb.groups, cb.group_dim):
        raise QuantizerError(f"features {f.shape} do not match codebook groups/dims "
                             f"({cb.groups}, {cb.group_dim})")
    P, G, _ = f.shape
    idx = np.empty((P, G), dtype=np.int64)
    err = 0.0
    for g in range(G):
        d = _sqdist(f[:, g, :], cb.vectors[g])
        idx[:, g] = d.argmin(axis=1)
        err += float(d[np.arange(P), idx[:, g]].sum())
    chosen = cb.vectors[np.arange(G)[None, :], idx]  # [P, G, d_g]
    return QuantizedImage(indices=idx, q=chosen.reshape(-1).astype(np.float32), recon_error=err / P)


def quantize_batch(features: np.ndarray, cb: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """[N, P_q, G, d_g] -> (indices [N, P_q, G], q [N, P_q*G*d_g])."""
    out = [quantize(f, cb) for f in features]
    return np.stack([o.indices for o in out]), np.stack([o.q for o in out])
