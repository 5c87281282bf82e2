"""Hierarchical contrastive + reconstruction objective and the training loop."""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .encoder import Fused, encode_all, init_encoder_params
from .graph import SpotGraph, build_knn
from .image import init_image_params, image_forward
from .ingestion import ExpressionMatrix, SpotTable, preprocess, spot_spacing
from .numerics import Tensor
from .rna import init_rna_params, rna_forward

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 5e-4
    lam: float = 40.0
    tau: float = 0.5
    window_factor: float = 2.0
    pool_factor: float = 4.0
    dropout: float = 0.2
    seed: int = 0
    k_neighbors: int = 4
    n_hvg: int = 500
    embed_dim: int = 128
    hidden_dim: int = 256
    latent_dim: int = 64
    use_cross_attention: bool = True
    use_hierarchical: bool = True
    steps_per_epoch: int = 1
    min_gene_total: int = 10
    target_sum: float = 1e4
    image_mode: str = "precomputed"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if not self.pool_factor > self.window_factor >= 1:
            raise ConfigError("need pool_factor > window_factor >= 1")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.image_mode not in ("precomputed", "downsample_mlp"):
            raise ConfigError(f"unknown image_mode {self.image_mode!r}")


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind, text: str):
    if kind in (bool, "bool"):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    caster = {"int": int, "float": float, "str": str}.get(kind, kind)
    try:
        return caster(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {getattr(caster, '__name__', caster)}") from None


def parse_flat_config(text: str, cls):
    """Parse ``key = value`` lines into the dataclass ``cls``.

    Blank lines and ``#`` comments are ignored; unknown keys raise.
    """
    kinds = {f.name: f.type for f in dataclasses.fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, kinds[key], val)
    return cls(**values)


def load_config(path, cls=TrainConfig):
    return parse_flat_config(Path(path).read_text(encoding="utf-8"), cls)


def format_flat_config(obj) -> str:
    return "".join(f"{f.name} = {getattr(obj, f.name)}\n" for f in dataclasses.fields(obj))


# ---------------------------------------------------------------------------
# windows and pooling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowGrid:
    level: str
    side: float
    members: tuple[np.ndarray, ...]  # non-empty windows, row-major grid order
    n_spots: int

    def pooling_matrix(self) -> np.ndarray:
        p = np.zeros((len(self.members), self.n_spots))
        for w, idx in enumerate(self.members):
            p[w, idx] = 1.0 / len(idx)
        return p


def build_windows(coords: np.ndarray, side: float, level: str = "windowed") -> WindowGrid:
    """Axis-aligned square windows of ``side`` anchored at the bounding-box minimum."""
    coords = np.asarray(coords, dtype=np.float64)
    if len(coords) == 0:
        raise ValueError("cannot build windows over an empty spot set")
    if side <= 0:
        raise ValueError("window side must be positive")
    rel = (coords - coords.min(axis=0)) / side
    # tolerate round-off on exact multiples of the side
    cell = np.floor(rel + 1e-9).astype(np.int64)
    n_cols = int(cell[:, 0].max()) + 1
    key = cell[:, 1] * n_cols + cell[:, 0]
    members = tuple(np.flatnonzero(key == k) for k in np.unique(key))
    return WindowGrid(level, side, members, len(coords))


def pool_embeddings(m: Tensor, grid: WindowGrid) -> Tensor:
    """Mean of member rows per window."""
    if m.shape[0] != grid.n_spots:
        raise nx.ShapeError(f"{m.shape[0]} rows for a grid over {grid.n_spots} spots")
    return Tensor(grid.pooling_matrix()) @ m


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def nt_xent(a: Tensor, b: Tensor, tau: float = 0.5) -> Tensor:
    """SimCLR NT-Xent over the 2N views of paired rows of ``a`` and ``b``."""
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise nx.ShapeError(f"nt_xent needs matching N x d inputs, got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise nx.ParameterError("nt_xent needs at least 2 pairs")
    z = nx.normalize_rows(nx.concat([a, b], axis=0))
    sim = (z @ z.T) * (1.0 / tau)
    idx = np.arange(2 * n)
    positive = nx.take(sim, (idx, (idx + n) % (2 * n)))
    # -inf on the diagonal is exact: exp(-inf) = 0 and the gradient is masked
    denom = nx.logsumexp_rows(nx.masked_fill(sim, np.eye(2 * n, dtype=bool), -np.inf))
    return nx.mean(denom - positive)


@dataclass
class LossParts:
    pooled: Tensor | None
    windowed: Tensor | None
    mse: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "ntxent_pooled": self.pooled.item() if self.pooled is not None else 0.0,
            "ntxent_windowed": self.windowed.item() if self.windowed is not None else 0.0,
            "mse": self.mse.item(),
            "total": self.total.item(),
        }


def total_loss(
    r: Tensor,
    h: Tensor,
    fused: Fused,
    config: TrainConfig,
    windowed: WindowGrid | None = None,
    pooled: WindowGrid | None = None,
) -> LossParts:
    """Pooled NT-Xent + windowed NT-Xent + lam * mean reconstruction MSE."""
    recon = nx.mse(fused.e, fused.d)
    total = recon * config.lam
    pooled_term = windowed_term = None
    if config.use_hierarchical:
        if windowed is None or pooled is None:
            raise ValueError("hierarchical loss needs both window grids")
        pooled_term = nt_xent(pool_embeddings(h, pooled), pool_embeddings(r, pooled), config.tau)
        windowed_term = nt_xent(pool_embeddings(h, windowed), pool_embeddings(r, windowed), config.tau)
        total = pooled_term + windowed_term + total
    elif config.lam == 0:
        warnings.warn("lam=0 with hierarchical learning off: the loss is identically zero", stacklevel=2)
    return LossParts(pooled_term, windowed_term, recon, total)


# ---------------------------------------------------------------------------
# model and loop
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    spot_ids: tuple[str, ...]
    graph: SpotGraph
    features: np.ndarray  # n x genes, hvg-selected log values
    image_features: np.ndarray  # n x F
    windowed: WindowGrid
    pooled: WindowGrid
    genes: tuple[str, ...] = ()


def prepare(
    spots: SpotTable, expression: ExpressionMatrix, image_features: np.ndarray, config: TrainConfig
) -> PreparedData:
    hvg = preprocess(expression, config.min_gene_total, config.target_sum, config.n_hvg)
    graph = build_knn(spots, config.k_neighbors, hvg)
    if image_features.shape[0] != len(spots):
        raise nx.ShapeError(f"{image_features.shape[0]} image rows for {len(spots)} spots")
    spacing = spot_spacing(spots.coords)
    windowed = build_windows(spots.coords, config.window_factor * spacing, "windowed")
    pooled = build_windows(spots.coords, config.pool_factor * spacing, "pooled")
    if config.use_hierarchical and (len(windowed.members) < 2 or len(pooled.members) < 2):
        raise ConfigError("each window level needs at least 2 non-empty windows")
    return PreparedData(
        spots.spot_ids, graph, hvg.values, np.asarray(image_features, dtype=np.float64), windowed, pooled, hvg.genes
    )


def init_params(data: PreparedData, config: TrainConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)
    params = {}
    params.update(init_rna_params(rng, data.features.shape[1], config.hidden_dim, config.embed_dim))
    params.update(init_image_params(rng, config.image_mode, data.image_features.shape[1], config.embed_dim))
    params.update(init_encoder_params(rng, config.embed_dim, config.embed_dim, config.latent_dim))
    return params


@dataclass
class Forward:
    r: Tensor
    h: Tensor
    fused: Fused


def forward(data: PreparedData, params: dict[str, Tensor], config: TrainConfig, training: bool, step_seed: int = 0) -> Forward:
    r = rna_forward(data.graph, params, config.dropout, training, step_seed, data.features)
    h = image_forward(data.image_features, params)
    if r.shape[1] != h.shape[1]:
        raise nx.ShapeError(f"RNA width {r.shape[1]} != image width {h.shape[1]}")
    return Forward(r, h, encode_all(r, h, data.graph, params, config.use_cross_attention))


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    latent: np.ndarray
    history: list[dict[str, float]] = field(default_factory=list)
    r: np.ndarray | None = None
    h: np.ndarray | None = None


def train(data: PreparedData, config: TrainConfig) -> TrainResult:
    params = init_params(data, config)
    state = nx.AdamState(lr=config.lr)
    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        for _ in range(config.steps_per_epoch):
            with nx.Tape():
                out = forward(data, params, config, training=True, step_seed=_step_seed(config.seed, step))
                parts = total_loss(out.r, out.h, out.fused, config, data.windowed, data.pooled)
                values = parts.values()
                if not np.isfinite(values["total"]):
                    raise TrainingError(f"non-finite loss at epoch {epoch}: {values}")
                nx.backward(parts.total, params.values())
            nx.adam_step(params, state)
            step += 1
        history.append({"epoch": epoch, **values})
        log.info("epoch %d loss %.6f", epoch, values["total"])
    final = forward(data, params, config, training=False)
    return TrainResult(params, final.fused.s.data.copy(), history, final.r.data.copy(), final.h.data.copy())


LOG_COLUMNS = ("epoch", "ntxent_pooled", "ntxent_windowed", "mse", "total")


def write_train_log(path, history: list[dict[str, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(LOG_COLUMNS) + "\n")
        for row in history:
            fh.write("\t".join([str(row["epoch"])] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]]) + "\n")
