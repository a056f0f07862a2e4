"""Small model builders shared by the model, training and acceptance tests."""
import numpy as np

from hybridvoco import numerics as nx
from hybridvoco.hybrid import LayoutSpec, build_mask
from hybridvoco.model import ModelConfig, Transformer, TransformerConfig
from hybridvoco.numerics import Tensor


def tiny_model_config(channels="hybrid", **kw) -> ModelConfig:
    tc = TransformerConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32, vocab_size=20, seed=kw.pop("seed", 0))
    return ModelConfig(transformer=tc, channels=channels, d_enc=8, h_d=16, **kw)


def transformer_and_inputs(layout: LayoutSpec, seed=0, n_layers=2, d_model=64, batch=1):
    tc = TransformerConfig(d_model=d_model, n_heads=4, n_layers=n_layers, d_ff=4 * d_model, vocab_size=20, seed=seed)
    tr = Transformer(tc, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    X = rng.standard_normal((batch, layout.total, d_model)).astype(np.float32)
    return tr, X, build_mask(layout)


def voco_interchange_deviation(tr: Transformer, layout: LayoutSpec, X_a: np.ndarray, X_b: np.ndarray) -> float:
    """Feed visuals from B while forcing voco states from A at every layer; compare text logits with A."""
    allow = build_mask(layout).allow
    vis = np.arange(layout.n_visual)
    voco = layout.voco_positions()
    text = layout.text_positions()
    X_b = X_b.copy()
    keep = np.setdiff1d(np.arange(layout.total), vis)
    X_b[:, keep] = X_a[:, keep]  # runs differ only in visual rows
    recorded = {}

    def record(l, h):
        recorded[l] = h.data.copy()
        return h

    with nx.no_grad():
        logits_a, _, _ = tr.forward(Tensor(X_a), allow, record)

        def patch(l, h):
            d = h.data.copy()
            d[:, voco] = recorded[l][:, voco]
            return Tensor(d)

        logits_b, _, _ = tr.forward(Tensor(X_b), allow, patch)
    return float(np.abs(logits_a.data[:, text] - logits_b.data[:, text]).max())
