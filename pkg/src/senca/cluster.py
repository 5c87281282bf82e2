"""Ward agglomerative clustering, adjusted Rand index and marker-gene tests."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
from scipy.special import ndtr

from .ingestion import ConsistencyError, ExpressionMatrix


class ClusterParameterError(ValueError):
    pass


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    distance: float
    size: int


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    k: int
    dendrogram: tuple[Merge, ...]


def ward_linkage(points: np.ndarray) -> list[Merge]:
    """Ward merges via Lance-Williams updates on Euclidean distances.

    Leaves are nodes 0..n-1 and the m-th merge creates node n+m. Among
    equal-distance candidates the pair with the lexicographically smallest
    (min id, max id) wins.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    total = 2 * n - 1
    d = np.full((total, total), np.inf)
    diff = x[:, None, :] - x[None, :, :]
    d[:n, :n] = np.sqrt((diff**2).sum(-1))
    size = np.zeros(total, dtype=np.int64)
    size[:n] = 1
    active = list(range(n))
    merges = []
    for m in range(n - 1):
        ids = np.array(active)
        sub = d[np.ix_(ids, ids)]
        # ids ascend, so the upper triangle row-major argmin is the lexicographic winner
        sub = np.where(np.triu(np.ones_like(sub, dtype=bool), k=1), sub, np.inf)
        flat = int(np.argmin(sub))
        a, b = ids[flat // len(ids)], ids[flat % len(ids)]
        dist = d[a, b]
        new = n + m
        size[new] = size[a] + size[b]
        rest = ids[(ids != a) & (ids != b)]
        na, nb, nk = size[a], size[b], size[rest]
        upd = np.sqrt(
            np.maximum(((na + nk) * d[a, rest] ** 2 + (nb + nk) * d[b, rest] ** 2 - nk * dist**2) / (na + nb + nk), 0.0)
        )
        d[new, rest] = upd
        d[rest, new] = upd
        merges.append(Merge(int(a), int(b), float(dist), int(size[new])))
        active = [i for i in active if i not in (a, b)] + [new]
    return merges


def cut_tree(merges: Sequence[Merge], n: int, k: int) -> np.ndarray:
    """Labels after applying the first n-k merges.

    Clusters are numbered by ascending smallest member leaf id.
    """
    if not 1 <= k <= n:
        raise ClusterParameterError(f"K must satisfy 1 <= K <= n (K={k}, n={n})")
    parent = list(range(2 * n - 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for m, mg in enumerate(merges[: n - k]):
        parent[mg.left] = n + m
        parent[mg.right] = n + m
    roots = [find(i) for i in range(n)]
    first_seen: dict[int, int] = {}
    for leaf, root in enumerate(roots):
        first_seen.setdefault(root, len(first_seen))
    return np.array([first_seen[r] for r in roots], dtype=np.int64)


def agglomerative(s: np.ndarray, k: int) -> ClusterAssignment:
    s = np.asarray(s, dtype=np.float64)
    n = len(s)
    if not 1 <= k <= n:
        raise ClusterParameterError(f"K must satisfy 1 <= K <= n (K={k}, n={n})")
    merges = ward_linkage(s) if n > 1 else []
    return ClusterAssignment(cut_tree(merges, n, k), k, tuple(merges))


def write_dendrogram(path, merges: Sequence[Merge]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("left\tright\tdistance\tsize\n")
        for mg in merges:
            fh.write(f"{mg.left}\t{mg.right}\t{mg.distance!r}\t{mg.size}\n")


# ---------------------------------------------------------------------------
# adjusted Rand index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray  # pred clusters x truth clusters
    a: np.ndarray
    b: np.ndarray
    n: int


def _is_missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v)) or (isinstance(v, str) and v.strip() in ("", "NA", "nan"))


def contingency(pred: Sequence[Hashable], truth: Sequence[Hashable]) -> ContingencyTable:
    if len(pred) != len(truth):
        raise ConsistencyError(f"label length mismatch: {len(pred)} vs {len(truth)}")
    pairs = [(p, t) for p, t in zip(pred, truth) if not (_is_missing(p) or _is_missing(t))]
    p_levels = {v: i for i, v in enumerate(dict.fromkeys(p for p, _ in pairs))}
    t_levels = {v: i for i, v in enumerate(dict.fromkeys(t for _, t in pairs))}
    counts = np.zeros((len(p_levels), len(t_levels)), dtype=np.int64)
    for p, t in pairs:
        counts[p_levels[p], t_levels[t]] += 1
    return ContingencyTable(counts, counts.sum(axis=1), counts.sum(axis=0), len(pairs))


def _comb2(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def ari(pred: Sequence[Hashable], truth: Sequence[Hashable]) -> float:
    """Adjusted Rand index from the contingency table.

    Unlabelled entries (None, NaN, "", "NA") are dropped pairwise. When the
    denominator vanishes (both partitions trivial) the score is 1.
    """
    table = contingency(pred, truth)
    index = float(_comb2(table.counts).sum())
    sum_a = float(_comb2(table.a).sum())
    sum_b = float(_comb2(table.b).sum())
    pairs = float(_comb2(table.n))
    expected = sum_a * sum_b / pairs if pairs > 0 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    denom = max_index - expected
    if denom == 0:
        return 1.0
    return (index - expected) / denom


# ---------------------------------------------------------------------------
# Wilcoxon rank-sum markers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarkerResult:
    gene: str
    cluster: int
    u: float
    p: float


def rankdata(values: np.ndarray) -> np.ndarray:
    """1-based ranks with mid-ranks for ties."""
    values = np.asarray(values)
    n = len(values)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    stops = np.r_[starts[1:], n]
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(0.5 * (starts + 1 + stops), stops - starts)
    return ranks


def rank_sum_test(x: np.ndarray, y: np.ndarray, alternative: str = "greater") -> tuple[float, float]:
    """Mann-Whitney U of ``x`` against ``y`` with a tie-corrected normal
    approximation and 0.5 continuity correction.

    Returns (U, p). With no rank variance at all (every value tied) p is 0.5.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise ClusterParameterError("both groups must be non-empty")
    ranks = rankdata(np.concatenate([x, y]))
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    n = n1 + n2
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float((tie_counts**3 - tie_counts).sum())
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    mu = n1 * n2 / 2.0
    if var <= 0:
        return float(u), 0.5
    sd = math.sqrt(var)
    if alternative == "greater":
        p = ndtr(-(u - mu - 0.5) / sd)
    elif alternative == "less":
        p = ndtr((u - mu + 0.5) / sd)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    # the normal tail can underflow to 0 for extreme U; keep p strictly positive
    return float(u), float(min(max(p, np.finfo(float).tiny), 1.0))


def wilcoxon_marker(expr: ExpressionMatrix, labels: Sequence[int], cluster: int, gene: str) -> MarkerResult:
    labels = np.asarray(labels)
    if len(labels) != expr.values.shape[0]:
        raise ConsistencyError(f"{len(labels)} labels for {expr.values.shape[0]} spots")
    inside = labels == cluster
    if not inside.any() or inside.all():
        raise ClusterParameterError(f"cluster {cluster} or its complement is empty")
    col = expr.values[:, expr.genes.index(gene)]
    u, p = rank_sum_test(col[inside], col[~inside])
    return MarkerResult(gene, int(cluster), u, p)


def benjamini_hochberg(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    m = len(p)
    order = np.argsort(p)
    scaled = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


def marker_table(
    expr: ExpressionMatrix,
    labels: Sequence[int],
    top_m: int = 5,
    adjust: bool = False,
    workers: int = 1,
) -> list[MarkerResult]:
    """Top ``top_m`` lowest-p genes per cluster, clusters ascending."""
    if top_m <= 0:
        return []
    labels = np.asarray(labels)
    clusters = sorted(set(labels.tolist()))

    def per_cluster(c):
        return [wilcoxon_marker(expr, labels, c, g) for g in expr.genes]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(per_cluster, clusters))
    else:
        blocks = [per_cluster(c) for c in clusters]
    if adjust:
        flat = [r for block in blocks for r in block]
        q = benjamini_hochberg(np.array([r.p for r in flat]))
        it = iter(q)
        blocks = [[MarkerResult(r.gene, r.cluster, r.u, float(next(it))) for r in block] for block in blocks]
    out = []
    for block in blocks:
        out.extend(sorted(block, key=lambda r: (r.p, r.gene))[:top_m])
    return out


def write_markers(path, rows: Sequence[MarkerResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene\tcluster\tU\tp\n")
        for r in rows:
            fh.write(f"{r.gene}\t{r.cluster}\t{r.u!r}\t{r.p!r}\n")
