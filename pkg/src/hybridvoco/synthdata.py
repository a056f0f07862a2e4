"""Synthetic scenes with an independent semantic class S and continuous detail D.

S picks a shape and a coarse position (left/right half, then top/bottom when
n_S > 8); D is the phase of a stripe texture that covers the whole image. Each
sample carries a two-token question selecting the S or D task and a
single-token answer.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

SIZE = 32
SHAPES = ("square", "disk", "triangle", "cross")
POSITIONS = ((16, 9), (16, 23), (9, 16), (23, 16))  # (row, col) centres
STRIPE_PERIOD = 4.0
STRIPE_AMP = 0.25
SHAPE_LEVEL = 0.5
BASE_LEVEL = 0.25
NOISE_SIGMA = 0.02
JITTER = 2

TASK_S, TASK_D = 0, 1


@dataclass(frozen=True)
class Vocab:
    """S answers 0..n_S-1, then D answers, then the control tokens.

    Disjoint answer ranges let the task token select an answer group additively.
    """
    n_S: int = 8
    n_D: int = 8

    def s_token(self, s_class: int) -> int:
        return int(s_class)

    def d_token(self, d_bin: int) -> int:
        return self.n_S + int(d_bin)

    @property
    def task_s(self) -> int:
        return self.n_S + self.n_D

    @property
    def task_d(self) -> int:
        return self.n_S + self.n_D + 1

    @property
    def ask(self) -> int:
        return self.n_S + self.n_D + 2

    @property
    def eos(self) -> int:
        return self.n_S + self.n_D + 3

    @property
    def size(self) -> int:
        return self.n_S + self.n_D + 4

    def question(self, task: int) -> list[int]:
        return [self.task_s if task == TASK_S else self.task_d, self.ask]


@dataclass(frozen=True)
class SceneSpec:
    s_class: int
    d_value: float
    seed: int


@dataclass
class QASample:
    image: np.ndarray  # [32, 32, 1] float32
    question: list[int]
    answer: int
    task: int
    spec: SceneSpec


def _shape_mask(shape: str, rr: np.ndarray, cc: np.ndarray, r0: float, c0: float, radius: float) -> np.ndarray:
    dr, dc = rr - r0, cc - c0
    if shape == "square":
        return (np.abs(dr) <= radius * 0.85) & (np.abs(dc) <= radius * 0.85)
    if shape == "disk":
        return dr * dr + dc * dc <= radius * radius
    if shape == "triangle":
        # apex up; base at r0 + radius
        return (dr <= radius * 0.8) & (dr >= -radius) & (np.abs(dc) <= (dr + radius) * 0.55)
    if shape == "cross":
        arm = radius * 0.4
        return ((np.abs(dr) <= arm) & (np.abs(dc) <= radius)) | ((np.abs(dc) <= arm) & (np.abs(dr) <= radius))
    raise ValueError(shape)


def render(spec: SceneSpec, n_S: int = 8) -> np.ndarray:
    """Deterministic image for (s_class, d_value, seed)."""
    if not 0 <= spec.s_class < n_S:
        raise ValueError(f"s_class {spec.s_class} outside [0, {n_S})")
    if not 0.0 <= spec.d_value < 1.0:
        raise ValueError(f"d_value {spec.d_value} outside [0, 1)")
    rng = np.random.default_rng(spec.seed)
    shape = SHAPES[spec.s_class % len(SHAPES)]
    r0, c0 = POSITIONS[spec.s_class // len(SHAPES)]
    jr, jc = rng.integers(-JITTER, JITTER + 1, size=2)
    rr, cc = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    stripes = STRIPE_AMP * np.sin(2 * np.pi * (cc / STRIPE_PERIOD + spec.d_value))
    mask = _shape_mask(shape, rr, cc, r0 + jr, c0 + jc, radius=6.0)
    img = BASE_LEVEL + stripes + SHAPE_LEVEL * mask
    img = img + NOISE_SIGMA * rng.standard_normal(img.shape)
    return img[:, :, None].astype(np.float32)


def d_bin(d_value: float, n_D: int) -> int:
    return min(int(d_value * n_D), n_D - 1)


def answer_for(spec: SceneSpec, task: int, n_S: int = 8, n_D: int = 8) -> int:
    """Answer token for one scene and task."""
    v = Vocab(n_S, n_D)
    return v.s_token(spec.s_class) if task == TASK_S else v.d_token(d_bin(spec.d_value, n_D))


@dataclass
class Split:
    images: np.ndarray  # [N, 32, 32, 1]
    s_class: np.ndarray
    d_value: np.ndarray
    task: np.ndarray
    answer: np.ndarray
    seeds: np.ndarray
    vocab: Vocab
    n_S: int
    n_D: int

    def __len__(self) -> int:
        return len(self.answer)

    def questions(self) -> np.ndarray:
        return np.array([self.vocab.question(t) for t in self.task], dtype=np.int64).reshape(len(self), -1)

    def sample(self, i: int) -> QASample:
        spec = SceneSpec(int(self.s_class[i]), float(self.d_value[i]), int(self.seeds[i]))
        return QASample(self.images[i], self.vocab.question(int(self.task[i])), int(self.answer[i]),
                        int(self.task[i]), spec)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.images[idx], self.s_class[idx], self.d_value[idx], self.task[idx],
                     self.answer[idx], self.seeds[idx], self.vocab, self.n_S, self.n_D)


def _make_split(n: int, n_S: int, n_D: int, seed_seq: np.random.SeedSequence) -> Split:
    rng = np.random.default_rng(seed_seq)
    i = np.arange(n)
    # stratified: class cycles fastest, task alternates per full class cycle
    s_class = i % n_S
    task = (i // n_S) % 2
    d_value = rng.random(n)
    order = rng.permutation(n)
    s_class, task, d_value = s_class[order], task[order], d_value[order]
    seeds = rng.integers(0, 2**62, size=n)
    vocab = Vocab(n_S, n_D)
    images = np.stack([render(SceneSpec(int(s), float(d), int(sd)), n_S)
                       for s, d, sd in zip(s_class, d_value, seeds)]) if n else np.zeros((0, SIZE, SIZE, 1), np.float32)
    answer = np.where(task == TASK_S, s_class, n_S + np.minimum((d_value * n_D).astype(np.int64), n_D - 1))
    return Split(images, s_class.astype(np.int64), d_value, task.astype(np.int64), answer.astype(np.int64),
                 seeds, vocab, n_S, n_D)


def make_dataset(n_train: int, n_test: int, n_S: int = 8, n_D: int = 8, seed: int = 0) -> tuple[Split, Split]:
    if n_S > len(SHAPES) * len(POSITIONS):
        raise ValueError(f"n_S={n_S} exceeds {len(SHAPES) * len(POSITIONS)} shape/position templates")
    train_ss, test_ss = np.random.SeedSequence([seed, 0x5EED]).spawn(2)
    return _make_split(n_train, n_S, n_D, train_ss), _make_split(n_test, n_S, n_D, test_ss)


def image_hash(img: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(img).tobytes()).hexdigest()


def stats(split: Split) -> dict:
    counts = np.bincount(split.s_class, minlength=split.n_S)
    task_frac = float(split.task.mean()) if len(split) else 0.0
    corr = float(np.corrcoef(split.s_class, split.d_value)[0, 1]) if len(split) > 1 else 0.0
    return {"n": len(split), "class_counts": counts.tolist(), "task_D_fraction": task_frac,
            "corr_s_d": corr}
