"""Graph transformer producing RNA embeddings from the spot graph."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .graph import SpotGraph
from .numerics import Tensor


def init_rna_params(rng: np.random.Generator, n_genes: int, hidden: int = 256, embed_dim: int = 128) -> dict[str, Tensor]:
    p = {
        "rna.W1": nx.glorot(rng, n_genes, hidden),
        "rna.Wq": nx.glorot(rng, hidden, hidden),
        "rna.Wk": nx.glorot(rng, hidden, hidden),
        "rna.Wv": nx.glorot(rng, hidden, hidden),
        "rna.Wo": nx.glorot(rng, hidden, hidden),
        "rna.ln_gain": nx.ones(hidden),
        "rna.ln_bias": nx.zeros(hidden),
        "rna.ff_W1": nx.glorot(rng, hidden, hidden),
        "rna.ff_b1": nx.zeros(hidden),
        "rna.ff_W2": nx.glorot(rng, hidden, hidden),
        "rna.ff_b2": nx.zeros(hidden),
        "rna.W_out": nx.glorot(rng, hidden, embed_dim),
    }
    for name, t in p.items():
        t.name = name
    return p


def self_attention(x: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Single-head dense self-attention; returns (output, attention weights)."""
    q, k, v = x @ p["rna.Wq"], x @ p["rna.Wk"], x @ p["rna.Wv"]
    weights = nx.softmax_rows((q @ k.T) / np.sqrt(q.shape[-1]))
    return (weights @ v) @ p["rna.Wo"], weights


def rna_forward(
    g: SpotGraph,
    params: dict[str, Tensor],
    dropout_p: float = 0.2,
    training: bool = False,
    rng_seed: int = 0,
    features: np.ndarray | None = None,
) -> Tensor:
    """Embed every spot: dropout -> W1 -> adjacency mixing -> transformer
    block (attention, layer norm, feed-forward) with a residual around the
    block -> ELU -> output projection.
    """
    v = features if features is not None else g.features.values
    if v.shape[0] != g.n:
        raise nx.ShapeError(f"features have {v.shape[0]} rows for {g.n} spots")
    if v.shape[1] != params["rna.W1"].shape[0]:
        raise nx.ShapeError(f"features width {v.shape[1]} != W1 input {params['rna.W1'].shape[0]}")
    x0 = nx.dropout(Tensor(v), dropout_p, rng_seed, training)
    x1 = x0 @ params["rna.W1"]
    x2 = Tensor(g.normalized_adjacency()) @ x1
    attn, _ = self_attention(x2, params)
    h = nx.layer_norm(attn, params["rna.ln_gain"], params["rna.ln_bias"])
    h = nx.elu(h @ params["rna.ff_W1"] + params["rna.ff_b1"])
    t = h @ params["rna.ff_W2"] + params["rna.ff_b2"]
    x3 = nx.elu(x2 + t)
    return x3 @ params["rna.W_out"]
