"""Image branch: patch featurizer and trainable projection to embed_dim."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .ingestion import ImageRaster, SpotTable, extract_patch, spot_spacing
from .numerics import Tensor

GRID = 16
N_FEATURES = GRID * GRID * 3


def featurize_patch(patch: np.ndarray, grid: int = GRID) -> np.ndarray:
    """Average-pool an (h, w, 3) patch onto a grid x grid lattice per channel,
    scale to [0, 1] and flatten channel-major.

    Cell boundaries follow ``floor(i * h / grid)``; when the patch is smaller
    than the grid, cells reuse the nearest pixel row/column.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 3 or patch.shape[0] == 0 or patch.shape[1] == 0:
        raise ValueError("patch must be a non-empty (h, w, 3) block")
    h, w, _ = patch.shape
    rows = _cell_bounds(h, grid)
    cols = _cell_bounds(w, grid)
    out = np.empty((3, grid, grid))
    for a, (r0, r1) in enumerate(rows):
        for b, (c0, c1) in enumerate(cols):
            out[:, a, b] = patch[r0:r1, c0:c1].mean(axis=(0, 1))
    return (out / 255.0).ravel()


def _cell_bounds(size: int, grid: int) -> list[tuple[int, int]]:
    bounds = []
    for i in range(grid):
        lo = (i * size) // grid
        hi = max(((i + 1) * size) // grid, lo + 1)
        lo = min(lo, size - 1)
        bounds.append((lo, min(hi, size)))
    return bounds


def featurize_raster(raster: ImageRaster, spots: SpotTable, degree: int = 3) -> np.ndarray:
    spacing = spot_spacing(spots.coords)
    return np.stack([featurize_patch(extract_patch(raster, xy, spacing, degree)) for xy in spots.coords])


def init_image_params(
    rng: np.random.Generator, mode: str, in_dim: int, embed_dim: int = 128, mlp_hidden: int = 256
) -> dict[str, Tensor]:
    if mode == "downsample_mlp":
        p = {
            "img.W_a": nx.glorot(rng, in_dim, mlp_hidden),
            "img.b_a": nx.zeros(mlp_hidden),
            "img.W_b": nx.glorot(rng, mlp_hidden, embed_dim),
            "img.b_b": nx.zeros(embed_dim),
        }
    elif mode == "precomputed":
        p = {"img.W_fc": nx.glorot(rng, in_dim, embed_dim), "img.b_fc": nx.zeros(embed_dim)}
    else:
        raise ValueError(f"unknown image mode {mode!r}")
    for name, t in p.items():
        t.name = name
    return p


def image_forward(features: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Project patch features (n x F) to image embeddings H (n x embed_dim).

    The parameter set decides the mode: ``img.W_a`` for the downsample+MLP
    path, ``img.W_fc`` for precomputed embeddings.
    """
    f = Tensor(features)
    if "img.W_a" in params:
        w_in = params["img.W_a"]
    else:
        w_in = params["img.W_fc"]
    if f.shape[-1] != w_in.shape[0]:
        raise nx.ShapeError(f"image features width {f.shape[-1]} != expected {w_in.shape[0]}")
    if "img.W_a" in params:
        hidden = nx.elu(f @ params["img.W_a"] + params["img.b_a"])
        return hidden @ params["img.W_b"] + params["img.b_b"]
    return f @ params["img.W_fc"] + params["img.b_fc"]
