"""Neighbourhood cross-attention shared encoder/decoder.

Each spot attends over its own neighbourhood block (itself plus its k
nearest spots). Queries come from one modality's projected block, keys from
the other modality's projected block and values from the other modality's
un-projected block. The rows of the considered spot from both attention
outputs are concatenated, encoded to the latent S and decoded back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .graph import SpotGraph
from .numerics import Tensor


def init_encoder_params(
    rng: np.random.Generator, embed_dim: int = 128, attn_dim: int | None = None, latent_dim: int = 64
) -> dict[str, Tensor]:
    e = attn_dim or embed_dim
    p = {
        "enc.P_R": nx.glorot(rng, embed_dim, embed_dim),
        "enc.P_H": nx.glorot(rng, embed_dim, embed_dim),
    }
    for name in ("q1", "k1", "v1", "q2", "k2", "v2"):
        p[f"enc.W_{name}"] = nx.glorot(rng, embed_dim, e)
    p.update(
        {
            "enc.W_enc": nx.glorot(rng, 2 * e, latent_dim),
            "enc.b_enc": nx.zeros(latent_dim),
            "enc.W_dec": nx.glorot(rng, latent_dim, 2 * e),
            "enc.b_dec": nx.zeros(2 * e),
        }
    )
    for name, t in p.items():
        t.name = name
    return p


def gather(r: Tensor, h: Tensor, index) -> tuple[Tensor, Tensor]:
    """Neighbourhood blocks R_n, H_n for an index vector or an (n, k+1) matrix."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= r.shape[0]):
        raise IndexError("neighbourhood index out of range")
    return nx.take(r, index), nx.take(h, index)


def gather_spot(r: Tensor, h: Tensor, g: SpotGraph, i: int) -> tuple[Tensor, Tensor]:
    if not 0 <= i < g.n:
        raise IndexError(f"spot index {i} out of range for {g.n} spots")
    return gather(r, h, g.neighborhoods()[i])


@dataclass
class AttentionOutputs:
    a1: Tensor  # (..., k+1, E), RNA values weighted by image queries
    a2: Tensor  # (..., k+1, E), image values weighted by RNA queries
    w1: Tensor
    w2: Tensor


def cross_attention(r_n: Tensor, h_n: Tensor, params: dict[str, Tensor]) -> AttentionOutputs:
    """Both attention layers for one block (k+1, d) or a batch (n, k+1, d)."""
    if r_n.shape != h_n.shape:
        raise nx.ShapeError(f"block shapes differ: {r_n.shape} vs {h_n.shape}")
    r_p = r_n @ params["enc.P_R"]
    h_p = h_n @ params["enc.P_H"]
    scale = 1.0 / np.sqrt(params["enc.W_k1"].shape[1])
    w1 = nx.softmax_rows(((h_p @ params["enc.W_q1"]) @ (r_p @ params["enc.W_k1"]).T) * scale)
    w2 = nx.softmax_rows(((r_p @ params["enc.W_q2"]) @ (h_p @ params["enc.W_k2"]).T) * scale)
    a1 = w1 @ (r_n @ params["enc.W_v1"])
    a2 = w2 @ (h_n @ params["enc.W_v2"])
    return AttentionOutputs(a1, a2, w1, w2)


@dataclass
class Fused:
    s: Tensor  # latent, (n, latent)
    d: Tensor  # decoder output, (n, 2E)
    e: Tensor  # encoder input, (n, 2E)


def fuse_encode(a1_center: Tensor, a2_center: Tensor, params: dict[str, Tensor]) -> Fused:
    """Concatenate the considered spot's rows, encode to S and decode to D."""
    e = nx.concat([a1_center, a2_center], axis=-1)
    if e.shape[-1] != params["enc.W_enc"].shape[0]:
        raise nx.ShapeError(f"encoder input width {e.shape[-1]} != {params['enc.W_enc'].shape[0]}")
    s = nx.elu(e @ params["enc.W_enc"] + params["enc.b_enc"])
    d = s @ params["enc.W_dec"] + params["enc.b_dec"]
    return Fused(s, d, e)


def encode_all(
    r: Tensor, h: Tensor, g: SpotGraph, params: dict[str, Tensor], use_cross_attention: bool = True
) -> Fused:
    """Shared encoder over every spot at once.

    With ``use_cross_attention`` off the attention outputs are replaced by
    the spot's own raw (R_i, H_i) rows; encoder and decoder stay in place.
    """
    if not use_cross_attention:
        return fuse_encode(r, h, params)
    r_n, h_n = gather(r, h, g.neighborhoods())
    out = cross_attention(r_n, h_n, params)
    return fuse_encode(out.a1[:, 0, :], out.a2[:, 0, :], params)
