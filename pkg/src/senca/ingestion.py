"""File formats and gene/patch preprocessing.

Formats: ``spots.tsv``, ``expression.tsv``, binary P6 ``image.ppm`` with an
``image.meta.tsv`` sidecar, ``*.f32`` matrices and ``labels.tsv``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

STAGES = ("raw", "normalized", "log", "hvg-selected")


class ParseError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


class StageError(ValueError):
    pass


class EmptyResultError(ValueError):
    pass


class BoundsError(ValueError):
    pass


@dataclass(frozen=True)
class SpotTable:
    spot_ids: tuple[str, ...]
    coords: np.ndarray  # n x 2

    def __post_init__(self):
        if len(self.spot_ids) < 2:
            raise ParseError("need at least 2 spots")
        if len(set(self.spot_ids)) != len(self.spot_ids):
            raise ParseError("duplicate spot_id")
        if self.coords.shape != (len(self.spot_ids), 2) or not np.all(np.isfinite(self.coords)):
            raise ParseError("coordinates must be finite and n x 2")

    def __len__(self) -> int:
        return len(self.spot_ids)


@dataclass(frozen=True)
class ExpressionMatrix:
    spot_ids: tuple[str, ...]
    genes: tuple[str, ...]
    values: np.ndarray  # spots x genes
    stage: str = "raw"

    def __post_init__(self):
        if self.values.shape != (len(self.spot_ids), len(self.genes)):
            raise ParseError(
                f"matrix shape {self.values.shape} does not match "
                f"{len(self.spot_ids)} spots x {len(self.genes)} genes"
            )
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "raw" and np.any(self.values < 0):
            raise ParseError("raw counts must be nonnegative")


@dataclass(frozen=True)
class ImageRaster:
    width: int
    height: int
    pixels: np.ndarray  # height x width x 3, uint8
    units_per_pixel: float = 1.0


def _read_tsv(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    header = lines[0].split("\t")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(header):
            raise ParseError(
                f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}"
            )
        rows.append(fields)
    return header, rows


def _parse_float(text: str, path, lineno: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: not a number: {text!r}") from None


def load_spots(path) -> SpotTable:
    header, rows = _read_tsv(path)
    if header != ["spot_id", "x", "y"]:
        raise ParseError(f"{path}:1: header must be spot_id, x, y; got {header}")
    ids = tuple(r[0] for r in rows)
    coords = np.array(
        [[_parse_float(r[1], path, i), _parse_float(r[2], path, i)] for i, r in enumerate(rows, start=2)],
        dtype=np.float64,
    ).reshape(-1, 2)
    return SpotTable(ids, coords)


def write_spots(path, spots: SpotTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("spot_id\tx\ty\n")
        for sid, (x, y) in zip(spots.spot_ids, spots.coords):
            fh.write(f"{sid}\t{float(x)!r}\t{float(y)!r}\n")


def load_expression(path) -> ExpressionMatrix:
    header, rows = _read_tsv(path)
    if not header or header[0] != "spot_id":
        raise ParseError(f"{path}:1: first column must be spot_id")
    genes = tuple(header[1:])
    values = np.empty((len(rows), len(genes)), dtype=np.float64)
    for i, r in enumerate(rows):
        for j, text in enumerate(r[1:]):
            v = _parse_float(text, path, i + 2)
            if v < 0 or not np.isfinite(v):
                raise ParseError(f"{path}:{i + 2}: invalid count {text!r} for gene {genes[j]}")
            values[i, j] = v
    return ExpressionMatrix(tuple(r[0] for r in rows), genes, values, "raw")


def _fmt_number(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_expression(path, m: ExpressionMatrix) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("spot_id\t" + "\t".join(m.genes) + "\n")
        for sid, row in zip(m.spot_ids, m.values):
            fh.write(sid + "\t" + "\t".join(_fmt_number(v) for v in row) + "\n")


def align_expression(spots: SpotTable, m: ExpressionMatrix) -> ExpressionMatrix:
    """Reorder expression rows to the spot table order; ids must match exactly."""
    missing = sorted(set(spots.spot_ids) - set(m.spot_ids))
    extra = sorted(set(m.spot_ids) - set(spots.spot_ids))
    if missing or extra:
        raise ConsistencyError(
            f"spot_id mismatch: missing from expression {missing[:10]}, unknown in expression {extra[:10]}"
        )
    pos = {sid: i for i, sid in enumerate(m.spot_ids)}
    order = [pos[sid] for sid in spots.spot_ids]
    return replace(m, spot_ids=spots.spot_ids, values=m.values[order])


# ---------------------------------------------------------------------------
# binary matrices
# ---------------------------------------------------------------------------


def write_f32(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", rows, cols))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def load_f32(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ParseError(f"{path}: truncated header")
    rows, cols = struct.unpack("<QQ", raw[:16])
    expected = 16 + 4 * rows * cols
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for {rows}x{cols}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, cols).copy()


def load_patch_embeddings(path) -> np.ndarray:
    return load_f32(path)


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


def load_labels(path) -> dict[str, str]:
    header, rows = _read_tsv(path)
    if header != ["spot_id", "label"]:
        raise ParseError(f"{path}:1: header must be spot_id, label; got {header}")
    out: dict[str, str] = {}
    for lineno, (sid, label) in enumerate(rows, start=2):
        if sid in out:
            raise ParseError(f"{path}:{lineno}: duplicate spot_id {sid!r}")
        out[sid] = label
    return out


def write_labels(path, spot_ids: Sequence[str], labels: Sequence) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("spot_id\tlabel\n")
        for sid, lab in zip(spot_ids, labels):
            fh.write(f"{sid}\t{lab}\n")


# ---------------------------------------------------------------------------
# raster
# ---------------------------------------------------------------------------


def _ppm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PPM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # single whitespace byte after maxval


def load_raster(path, meta_path=None) -> ImageRaster:
    path = Path(path)
    raw = path.read_bytes()
    tokens, offset = _ppm_tokens(raw, 4)
    if tokens[0] != b"P6":
        raise ParseError(f"{path}: not a binary PPM (P6)")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    data = raw[offset:]
    if len(data) != width * height * 3:
        raise ParseError(f"{path}: expected {width * height * 3} pixel bytes, found {len(data)}")
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()
    meta_path = Path(meta_path) if meta_path else path.with_name(path.stem + ".meta.tsv")
    scale = 1.0
    if meta_path.exists():
        header, rows = _read_tsv(meta_path)
        if "units_per_pixel" not in header or not rows:
            raise ParseError(f"{meta_path}: missing units_per_pixel")
        scale = _parse_float(rows[0][header.index("units_per_pixel")], meta_path, 2)
    return ImageRaster(width, height, pixels, scale)


def write_raster(path, raster: ImageRaster) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{raster.width} {raster.height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(raster.pixels, dtype=np.uint8).tobytes())
    with open(path.with_name(path.stem + ".meta.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"units_per_pixel\n{raster.units_per_pixel!r}\n")


# ---------------------------------------------------------------------------
# gene preprocessing
# ---------------------------------------------------------------------------


def _require_stage(m: ExpressionMatrix, stage: str, op: str) -> None:
    if m.stage != stage:
        raise StageError(f"{op} requires stage {stage!r}, got {m.stage!r}")


def filter_genes(m: ExpressionMatrix, min_total: int = 10) -> ExpressionMatrix:
    """Drop genes whose total count over all spots is below ``min_total``."""
    _require_stage(m, "raw", "filter_genes")
    keep = m.values.sum(axis=0) >= min_total
    if not keep.any():
        raise EmptyResultError(f"no gene has a total count >= {min_total}")
    return replace(m, genes=tuple(np.asarray(m.genes, dtype=object)[keep]), values=m.values[:, keep])


def normalize_log(m: ExpressionMatrix, target_sum: float = 1e4) -> ExpressionMatrix:
    _require_stage(m, "raw", "normalize_log")
    sums = m.values.sum(axis=1, keepdims=True)
    scale = np.divide(target_sum, sums, out=np.zeros_like(sums), where=sums > 0)
    return replace(m, values=np.log1p(m.values * scale), stage="log")


def normalized_dispersion(values_log: np.ndarray, n_bins: int = 20) -> np.ndarray:
    """Per-gene dispersion (var/mean on the expm1 scale), z-scored within
    equal-frequency bins of the gene mean.

    Genes with zero mean get dispersion 0; a bin holding a single gene or
    constant dispersion gets z = 0.
    """
    x = np.expm1(values_log)
    mu = x.mean(axis=0)
    var = x.var(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros_like(mu)
    disp = np.divide(var, mu, out=np.zeros_like(mu), where=mu > 0)
    n_genes = len(mu)
    bins = np.minimum(n_bins, n_genes)
    # equal-frequency bins: rank genes by mean (stable on index), split into near-equal chunks
    order = np.argsort(mu, kind="stable")
    bin_of = np.empty(n_genes, dtype=int)
    for b, chunk in enumerate(np.array_split(order, bins)):
        bin_of[chunk] = b
    z = np.zeros(n_genes)
    for b in range(bins):
        members = bin_of == b
        d = disp[members]
        sd = d.std(ddof=1) if d.size > 1 else 0.0
        z[members] = (d - d.mean()) / sd if sd > 0 else 0.0
    return z


def select_hvg(m: ExpressionMatrix, n_hvg: int = 500, n_bins: int = 20) -> ExpressionMatrix:
    _require_stage(m, "log", "select_hvg")
    n_genes = len(m.genes)
    if n_hvg >= n_genes:
        if n_hvg > n_genes:
            log.warning("n_hvg=%d exceeds %d available genes; keeping all", n_hvg, n_genes)
        return replace(m, stage="hvg-selected")
    z = normalized_dispersion(m.values, n_bins)
    # highest z first; exact ties fall back to gene name
    ranked = sorted(range(n_genes), key=lambda j: (-z[j], m.genes[j]))
    keep = np.sort(np.array(ranked[:n_hvg]))
    return replace(
        m,
        genes=tuple(m.genes[j] for j in keep),
        values=m.values[:, keep],
        stage="hvg-selected",
    )


def preprocess(m: ExpressionMatrix, min_total: int = 10, target_sum: float = 1e4, n_hvg: int = 500) -> ExpressionMatrix:
    return select_hvg(normalize_log(filter_genes(m, min_total), target_sum), n_hvg)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def spot_spacing(coords: np.ndarray) -> float:
    """Minimum pairwise distance between distinct spot positions."""
    diff = coords[:, None, :] - coords[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    d[np.eye(len(coords), dtype=bool)] = np.inf
    positive = d[d > 0]
    if positive.size == 0:
        raise ValueError("all spots share one position")
    return float(positive.min())


def patch_half_side_px(spacing: float, degree: int, units_per_pixel: float) -> int:
    return max(1, int(round(degree * spacing / units_per_pixel)))


def extract_patch(raster: ImageRaster, center_xy, spacing: float, degree: int = 3) -> np.ndarray:
    """Square crop of side ``2 * degree * spacing`` (in pixels) around a spot.

    Pixels outside the raster are filled by edge replication.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    cx = center_xy[0] / raster.units_per_pixel
    cy = center_xy[1] / raster.units_per_pixel
    if not (0 <= cx < raster.width and 0 <= cy < raster.height):
        raise BoundsError(f"spot center ({cx:.1f}, {cy:.1f}) px outside {raster.width}x{raster.height} raster")
    half = patch_half_side_px(spacing, degree, raster.units_per_pixel)
    col0, row0 = int(np.floor(cx)) - half, int(np.floor(cy)) - half
    rows = np.clip(np.arange(row0, row0 + 2 * half), 0, raster.height - 1)
    cols = np.clip(np.arange(col0, col0 + 2 * half), 0, raster.width - 1)
    return raster.pixels[np.ix_(rows, cols)]
