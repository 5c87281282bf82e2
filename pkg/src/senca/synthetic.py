"""Seeded synthetic tissues with ground-truth regions.

Regions are rectangles on a unit-spaced square grid. Every region owns a
block of signature genes whose Poisson rate is ``base_rate * exp(delta_f)``;
all other genes stay at ``base_rate``. Structural (patch-embedding) features
are Gaussian around a per-class mean; the twinned regions share a structural
class, so only expression tells them apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingestion import ExpressionMatrix, SpotTable, write_expression, write_f32, write_labels, write_spots


class SpecError(ValueError):
    pass


DEFAULT_REGIONS = "0,0,12,12;12,0,24,12;0,12,8,24;8,12,16,24;16,12,24,24"


@dataclass
class SyntheticSpec:
    width: int = 24
    height: int = 24
    regions: str = DEFAULT_REGIONS  # "x0,y0,x1,y1;..." half-open, in spot units
    twins: str = "3,4"
    n_genes: int = 120
    signature_size: int = 10
    delta_f: float = 2.0
    base_rate: float = 1.0
    struct_dim: int = 32
    delta_s: float = 1.5
    sigma: float = 0.5
    seed: int = 0

    def rectangles(self) -> list[tuple[int, int, int, int]]:
        out = []
        for chunk in self.regions.split(";"):
            parts = [int(v) for v in chunk.split(",")]
            if len(parts) != 4:
                raise SpecError(f"region {chunk!r} needs x0,y0,x1,y1")
            out.append(tuple(parts))
        return out

    def twin_pair(self) -> tuple[int, int]:
        a, b = (int(v) for v in self.twins.split(","))
        return a, b


def region_map(spec: SyntheticSpec) -> np.ndarray:
    """(height, width) array of region ids; raises unless it is a partition."""
    grid = np.full((spec.height, spec.width), -1, dtype=np.int64)
    for r, (x0, y0, x1, y1) in enumerate(spec.rectangles()):
        if not (0 <= x0 < x1 <= spec.width and 0 <= y0 < y1 <= spec.height):
            raise SpecError(f"region {r} lies outside the {spec.width}x{spec.height} grid")
        block = grid[y0:y1, x0:x1]
        if np.any(block >= 0):
            raise SpecError(f"region {r} overlaps another region")
        block[...] = r
    if np.any(grid < 0):
        raise SpecError("region layout does not cover the grid")
    return grid


def structural_classes(spec: SyntheticSpec) -> np.ndarray:
    """Structural class per region: the twin shares its partner's class."""
    n_regions = len(spec.rectangles())
    a, b = spec.twin_pair()
    if a == b or not (0 <= a < n_regions and 0 <= b < n_regions):
        raise SpecError(f"invalid twin pair {spec.twins!r}")
    classes, nxt = np.empty(n_regions, dtype=np.int64), 0
    for r in range(n_regions):
        if r == max(a, b):
            classes[r] = classes[min(a, b)]
        else:
            classes[r] = nxt
            nxt += 1
    return classes


def expected_gene_means(spec: SyntheticSpec) -> np.ndarray:
    """(regions, genes) Poisson rates used by :func:`generate`."""
    n_regions = len(spec.rectangles())
    if n_regions * spec.signature_size > spec.n_genes:
        raise SpecError("not enough genes for disjoint signature blocks")
    rates = np.full((n_regions, spec.n_genes), spec.base_rate)
    for r in range(n_regions):
        rates[r, r * spec.signature_size : (r + 1) * spec.signature_size] *= np.exp(spec.delta_f)
    return rates


def expected_struct_means(spec: SyntheticSpec) -> np.ndarray:
    classes = structural_classes(spec)
    if classes.max() >= spec.struct_dim:
        raise SpecError("struct_dim too small for the structural classes")
    means = np.zeros((len(classes), spec.struct_dim))
    means[np.arange(len(classes)), classes] = spec.delta_s
    return means


@dataclass
class SyntheticTissue:
    spots: SpotTable
    expression: ExpressionMatrix
    structure: np.ndarray
    labels: np.ndarray


def generate(spec: SyntheticSpec) -> SyntheticTissue:
    grid = region_map(spec)
    rates = expected_gene_means(spec)
    struct_means = expected_struct_means(spec)
    rng = np.random.default_rng(spec.seed)
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    labels = grid.ravel()
    ids = tuple(f"s{y:03d}x{x:03d}" for x, y in coords.astype(int))
    counts = rng.poisson(rates[labels]).astype(np.float64)
    structure = struct_means[labels] + rng.normal(0.0, spec.sigma, size=(len(labels), spec.struct_dim))
    genes = tuple(f"g{j:03d}" for j in range(spec.n_genes))
    return SyntheticTissue(
        SpotTable(ids, coords),
        ExpressionMatrix(ids, genes, counts, "raw"),
        structure,
        labels,
    )


def write_tissue(out_dir, tissue: SyntheticTissue) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "spots": out / "spots.tsv",
        "expression": out / "expression.tsv",
        "embeddings": out / "embeddings.f32",
        "truth": out / "labels.tsv",
    }
    write_spots(paths["spots"], tissue.spots)
    write_expression(paths["expression"], tissue.expression)
    write_f32(paths["embeddings"], tissue.structure)
    write_labels(paths["truth"], tissue.spots.spot_ids, tissue.labels)
    return paths
