"""Command-line entry point: ``senca synth|train|segment|evaluate|markers``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import agglomerative, ari, marker_table, write_dendrogram, write_markers
from .image import featurize_raster
from .ingestion import (
    align_expression,
    filter_genes,
    load_expression,
    load_f32,
    load_labels,
    load_raster,
    load_spots,
    normalize_log,
    write_f32,
    write_labels,
)
from .synthetic import SyntheticSpec, generate, write_tissue
from .training import TrainConfig, format_flat_config, load_config, parse_flat_config, prepare, train, write_train_log

log = logging.getLogger("senca")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SENCA_THREADS", "1")))
    except ValueError:
        return 1


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict, outputs: dict, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest.", suffix=".json")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, out_dir / "manifest.json")


def cmd_synth(args) -> None:
    started = time.time()
    spec = SyntheticSpec()
    if args.spec:
        spec = parse_flat_config(Path(args.spec).read_text(encoding="utf-8"), SyntheticSpec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out)
    paths = write_tissue(out, generate(spec))
    write_manifest(out, "synth", dataclasses.asdict(spec), spec.seed, {"spec": args.spec or "<defaults>"}, paths, started)


def _image_features(data_dir: Path, spots, config: TrainConfig) -> np.ndarray:
    if config.image_mode == "precomputed":
        return load_f32(data_dir / "embeddings.f32").astype(np.float64)
    raster = load_raster(data_dir / "image.ppm")
    return featurize_raster(raster, spots)


def cmd_train(args) -> None:
    started = time.time()
    config = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    data_dir, out = Path(args.data), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spots = load_spots(data_dir / "spots.tsv")
    expression = align_expression(spots, load_expression(data_dir / "expression.tsv"))
    data = prepare(spots, expression, _image_features(data_dir, spots, config), config)
    result = train(data, config)
    outputs = {
        "latent": out / "shared_latent.f32",
        "rna": out / "rna_embeddings.f32",
        "image": out / "image_embeddings.f32",
        "log": out / "train_log.tsv",
        "spots": out / "spots.tsv",
        "config": out / "config.txt",
    }
    write_f32(outputs["latent"], result.latent)
    write_f32(outputs["rna"], result.r)
    write_f32(outputs["image"], result.h)
    write_train_log(outputs["log"], result.history)
    shutil.copyfile(data_dir / "spots.tsv", outputs["spots"])
    outputs["config"].write_text(format_flat_config(config), encoding="utf-8")
    write_manifest(out, "train", dataclasses.asdict(config), config.seed, {"data": data_dir, "config": args.config}, outputs, started)


def cmd_segment(args) -> None:
    started = time.time()
    latent_path = Path(args.latent)
    spots_path = Path(args.spots) if args.spots else latent_path.with_name("spots.tsv")
    spots = load_spots(spots_path)
    s = load_f32(latent_path)
    if s.shape[0] != len(spots):
        raise ValueError(f"latent has {s.shape[0]} rows but {spots_path} lists {len(spots)} spots")
    assignment = agglomerative(s, args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"clusters": out / "clusters.tsv", "dendrogram": out / "dendrogram.tsv"}
    write_labels(outputs["clusters"], spots.spot_ids, assignment.labels)
    write_dendrogram(outputs["dendrogram"], assignment.dendrogram)
    write_manifest(out, "segment", {"k": args.k}, None, {"latent": latent_path, "spots": spots_path}, outputs, started)


def cmd_evaluate(args) -> None:
    pred = load_labels(args.pred)
    truth = load_labels(args.truth)
    unknown = sorted(set(truth) - set(pred))
    if unknown:
        raise ValueError(f"truth spots missing from predictions: {unknown[:10]}")
    ids = list(pred)
    score = ari([pred[i] for i in ids], [truth.get(i) for i in ids])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(f"ari={score!r}\n", encoding="utf-8")


def cmd_markers(args) -> None:
    raw = load_expression(args.expression)
    labels = load_labels(args.labels)
    missing = [s for s in raw.spot_ids if s not in labels]
    if missing:
        raise ValueError(f"spots without a label: {missing[:10]}")
    expr = normalize_log(filter_genes(raw))
    lab = [labels[s] for s in expr.spot_ids]
    try:
        lab = [int(v) for v in lab]
    except ValueError:
        pass
    rows = marker_table(expr, lab, args.top, adjust=args.bh, workers=worker_count())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_markers(out, rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="senca", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic tissue")
    p.add_argument("--spec", help="flat key = value SyntheticSpec file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the shared encoder and write the latent")
    p.add_argument("--config", help="flat key = value TrainConfig file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="Ward clustering of a latent matrix")
    p.add_argument("--latent", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spots", help="spot table (default: spots.tsv next to the latent)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="adjusted Rand index of predictions vs truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("markers", help="Wilcoxon marker genes per cluster")
    p.add_argument("--expression", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--bh", action="store_true", help="Benjamini-Hochberg adjusted p-values")
    p.set_defaults(func=cmd_markers)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = " ".join(str(exc).split())
        print(f"senca {args.command}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
