"""Spatial k-nearest-neighbour spot graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingestion import ExpressionMatrix, SpotTable


class GraphParameterError(ValueError):
    pass


@dataclass(frozen=True)
class SpotGraph:
    coords: np.ndarray  # n x 2
    k: int
    knn: np.ndarray  # n x k, ascending distance, directed
    adjacency: np.ndarray  # n x n bool, symmetrized, no self-loops
    features: ExpressionMatrix | None = None

    @property
    def n(self) -> int:
        return len(self.coords)

    def neighborhoods(self) -> np.ndarray:
        """(n, k+1) index matrix: each spot followed by its k nearest."""
        return np.concatenate([np.arange(self.n)[:, None], self.knn], axis=1)

    def normalized_adjacency(self) -> np.ndarray:
        """Row-normalized adjacency with self-loops, D^-1 (A + I)."""
        a = self.adjacency.astype(np.float64) + np.eye(self.n)
        return a / a.sum(axis=1, keepdims=True)

    def edges(self):
        """(src, dst, distance) for every directed k-NN edge."""
        for i in range(self.n):
            for j in self.knn[i]:
                yield i, int(j), float(np.linalg.norm(self.coords[i] - self.coords[j]))


def knn_indices(coords: np.ndarray, k: int) -> np.ndarray:
    n = len(coords)
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = (diff**2).sum(-1)
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        # lexsort: last key is primary -> distance, then lower index
        order = np.lexsort((others, d2[i, others]))
        out[i] = others[order[:k]]
    return out


def build_knn(spots: SpotTable | np.ndarray, k: int = 4, features: ExpressionMatrix | None = None) -> SpotGraph:
    coords = np.asarray(spots.coords if isinstance(spots, SpotTable) else spots, dtype=np.float64)
    n = len(coords)
    if not 1 <= k < n:
        raise GraphParameterError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    knn = knn_indices(coords, k)
    adj = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), k)
    adj[rows, knn.ravel()] = True
    adj |= adj.T
    return SpotGraph(coords, k, knn, adj, features)


def neighborhood(g: SpotGraph, i: int) -> list[int]:
    if not 0 <= i < g.n:
        raise IndexError(f"spot index {i} out of range for {g.n} spots")
    return [i, *map(int, g.knn[i])]


def write_edges(path, g: SpotGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("src\tdst\tdistance\n")
        for s, d, dist in g.edges():
            fh.write(f"{s}\t{d}\t{dist!r}\n")
