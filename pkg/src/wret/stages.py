"""Pipeline stages over file artifacts.

Each stage reads documented artifact formats, holds an exclusive lock
on its output directory, and embeds its config hash and seed in every
report. Reports carry no timestamps: re-running a stage with identical
inputs and config reproduces every output byte for byte.
"""

from __future__ import annotations

import csv
import io
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .aggregation import aggregate_pages
from .encoder import backbone_forward, encode_patches, flatten_encoding
from .errors import ArtifactIOError, ValidationError
from .features import (
    PseudoLabeledSet,
    assign_and_filter,
    fit_kmeans,
    fit_pca,
    hellinger_normalize,
    pca_transform,
)
from .fileio import (
    config_hash,
    load_backbone,
    load_codebook,
    load_manifest,
    load_model,
    load_page_descriptors,
    load_pca,
    read_embeddings,
    save_backbone,
    save_codebook,
    save_cluster_model,
    save_model,
    save_pca,
    write_embeddings,
    write_json,
)
from .rerank import RerankConfig, rerank
from .retrieval import evaluate, rank_all, report_to_csv, report_to_json
from .seeds import derive_seed
from .synth import SynthSpec, synth_generate
from .trainer import TrainConfig, train

LOCK_NAME = ".wret.lock"

# stage that produces each artifact, used in missing-file errors
PRODUCERS = {
    "manifest.json": "synth",
    "pca.wrmd": "cluster",
    "kmeans.wrmd": "cluster",
    "labels.wrmd": "cluster",
    "backbone.wrmd": "train",
    "codebook.wrmd": "train",
    "embeddings.json": "encode",
    "embeddings.bin": "encode",
    "reranked.json": "rerank",
}


@dataclass(frozen=True)
class ClusterConfig:
    """Descriptor preprocessing and pseudo-labeling parameters."""

    n_clusters: int = 64
    target_dim: int = 32
    rho: float = 0.9
    cap: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ValidationError("n_clusters must be >= 2")
        if self.target_dim < 1:
            raise ValidationError("target_dim must be >= 1")
        if not 0.0 < self.rho <= 1.0:
            raise ValidationError("rho must be in (0, 1]")
        if self.cap < 1:
            raise ValidationError("cap must be >= 1")


@dataclass(frozen=True)
class EncodeConfig:
    """Page-embedding parameters for the encode stage."""

    page_dim: int = 64
    power_alpha: float = 0.4
    cap: int = 2000
    seed: int = 0
    page_pca: str | None = None  # optional prefit page-level PCA model

    def __post_init__(self):
        if self.page_dim < 1:
            raise ValidationError("page_dim must be >= 1")
        if not 0.0 < self.power_alpha <= 1.0:
            raise ValidationError("power_alpha must be in (0, 1]")
        if self.cap < 1:
            raise ValidationError("cap must be >= 1")


@contextmanager
def output_lock(out_dir: Path):
    """Reject concurrent invocations targeting the same output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ArtifactIOError(
            f"another invocation holds {lock}; remove it if no run is active"
        ) from None
    try:
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require(path: Path, producer: str | None = None) -> Path:
    path = Path(path)
    if path.exists():
        return path
    stage = producer or PRODUCERS.get(path.name)
    if stage:
        raise ArtifactIOError(
            f"missing artifact {path}; it is produced by the '{stage}' stage"
        )
    raise ArtifactIOError(f"missing artifact {path}")


def _guard_cycle(inputs: list[Path], outputs: list[Path]) -> None:
    """No stage may read its own output within one invocation."""
    resolved_in = {Path(p).resolve() for p in inputs}
    for out in outputs:
        if Path(out).resolve() in resolved_in:
            raise ValidationError(f"stage would overwrite its input {out}")


def _stage_hash(stage: str, cfg: dict) -> str:
    return config_hash({"stage": stage, **cfg})


# --------------------------------------------------------------------------
# Stages


def run_synth(spec: SynthSpec, out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    with output_lock(out_dir):
        manifest_path = synth_generate(spec, out_dir)
        cfg = asdict(spec)
        if not isinstance(spec.pages_per_writer, int):
            cfg["pages_per_writer"] = list(spec.page_counts())
        write_json(
            out_dir / "synth_report.json",
            {
                "config_hash": _stage_hash("synth", cfg),
                "n_pages": len(load_manifest(manifest_path).pages),
                "n_writers": spec.n_writers,
                "seed": spec.seed,
            },
        )
    return manifest_path


def run_cluster(manifest_path: Path | str, out_dir: Path | str, cfg: ClusterConfig) -> dict:
    """Hellinger + PCA + k-means pseudo-labels; persists models and labels."""
    manifest_path = _require(Path(manifest_path), "synth")
    out_dir = Path(out_dir)
    outputs = [
        out_dir / "pca.wrmd",
        out_dir / "kmeans.wrmd",
        out_dir / "labels.wrmd",
        out_dir / "cluster_report.json",
    ]
    _guard_cycle([manifest_path], outputs)
    manifest = load_manifest(manifest_path)
    with output_lock(out_dir):
        loaded = load_page_descriptors(manifest, cap=cfg.cap)
        raw = np.vstack([data for _, data in loaded]).astype(np.float64)
        page_index = np.concatenate(
            [np.full(len(data), i, dtype=np.int64) for i, (_, data) in enumerate(loaded)]
        )
        normalized = hellinger_normalize(raw)
        pca = fit_pca(normalized, cfg.target_dim, whiten=False)
        reduced = pca_transform(pca, normalized)
        kmeans = fit_kmeans(
            reduced, cfg.n_clusters, seed=derive_seed(cfg.seed, "cluster/kmeans")
        )
        labeled = assign_and_filter(kmeans, reduced, cfg.rho)
        cfg_hash = _stage_hash("cluster", asdict(cfg))
        save_pca(outputs[0], pca)
        save_cluster_model(outputs[1], kmeans, cfg.seed)
        save_model(
            outputs[2],
            "labels",
            {
                "config_hash": cfg_hash,
                "dataset": manifest.dataset,
                "n_clusters": cfg.n_clusters,
                "rho": cfg.rho,
                "seed": cfg.seed,
            },
            {
                "descriptors": reduced,
                "kept": labeled.kept_indices,
                "labels": labeled.labels,
                "page_index": page_index,
                "rejected": np.array(labeled.rejected, dtype=np.int64),
            },
        )
        report = {
            "config_hash": cfg_hash,
            "inertia": float(kmeans.inertia),
            "n_descriptors": int(len(raw)),
            "n_kept": int(len(labeled.items)),
            "n_rejected": int(len(labeled.rejected)),
            "seed": cfg.seed,
        }
        write_json(outputs[3], report)
    return report


def load_labels(path: Path | str) -> tuple[PseudoLabeledSet, np.ndarray, dict]:
    """Read a labels artifact back into trainer inputs."""
    kind, meta, arrays = load_model(_require(Path(path), "cluster"))
    if kind != "labels":
        raise ArtifactIOError(f"{path} holds a {kind!r} model, expected labels")
    labeled = PseudoLabeledSet(
        items=tuple(zip(arrays["kept"].tolist(), arrays["labels"].tolist())),
        rejected=tuple(arrays["rejected"].tolist()),
    )
    return labeled, arrays["descriptors"], meta


def run_train(labels_path: Path | str, out_dir: Path | str, cfg: TrainConfig) -> dict:
    """Triplet-train the encoder on pseudo-labels; persists model snapshots."""
    labels_path = _require(Path(labels_path), "cluster")
    out_dir = Path(out_dir)
    outputs = [
        out_dir / "backbone.wrmd",
        out_dir / "codebook.wrmd",
        out_dir / "train_report.json",
    ]
    _guard_cycle([labels_path], outputs)
    labeled, descriptors, _ = load_labels(labels_path)
    with output_lock(out_dir):
        backbone, codebook, result = train(labeled, descriptors, cfg)
        cfg_dict = asdict(cfg)
        if cfg_dict["backbone_dims"] is not None:
            cfg_dict["backbone_dims"] = list(cfg_dict["backbone_dims"])
        cfg_hash = _stage_hash("train", cfg_dict)
        save_backbone(outputs[0], backbone, cfg.seed)
        save_codebook(outputs[1], codebook, cfg.seed)
        report = {
            "best_epoch": result.best_epoch,
            "best_val_map": result.best_val_map,
            "config_hash": cfg_hash,
            "learning_rates": list(result.learning_rates),
            "losses": list(result.losses),
            "seed": cfg.seed,
            "steps": result.steps,
            "stopped_epoch": result.stopped_epoch,
            "val_maps": list(result.val_maps),
        }
        write_json(outputs[2], report)
    return report


def run_encode(
    manifest_path: Path | str,
    models_dir: Path | str,
    out_dir: Path | str,
    cfg: EncodeConfig,
) -> Path:
    """Encode every page to a unit-norm global descriptor dump."""
    manifest_path = _require(Path(manifest_path), "synth")
    models_dir = Path(models_dir)
    pca_path = _require(models_dir / "pca.wrmd", "cluster")
    backbone_path = _require(models_dir / "backbone.wrmd", "train")
    codebook_path = _require(models_dir / "codebook.wrmd", "train")
    out_dir = Path(out_dir)
    outputs = [
        out_dir / "embeddings.json",
        out_dir / "embeddings.bin",
        out_dir / "page_pca.wrmd",
    ]
    inputs = [manifest_path, pca_path, backbone_path, codebook_path]
    prefit = None
    if cfg.page_pca is not None:
        prefit_path = _require(Path(cfg.page_pca), "encode")
        inputs.append(prefit_path)
        prefit = load_pca(prefit_path)
    _guard_cycle(inputs, outputs)
    manifest = load_manifest(manifest_path)
    pca = load_pca(pca_path)
    backbone = load_backbone(backbone_path)
    codebook = load_codebook(codebook_path)
    with output_lock(out_dir):
        per_page = []
        page_ids = []
        writer_ids = []
        for record, data in load_page_descriptors(manifest, cap=cfg.cap):
            reduced = pca_transform(pca, hellinger_normalize(data.astype(np.float64)))
            embedded = backbone_forward(backbone, reduced)
            encodings = flatten_encoding(encode_patches(codebook, embedded))
            per_page.append(encodings)
            page_ids.append(record.page_id)
            writer_ids.append(record.writer_id)
        pages, page_pca = aggregate_pages(
            per_page, page_ids, writer_ids, cfg.page_dim, cfg.power_alpha, pca=prefit
        )
        cfg_hash = _stage_hash("encode", asdict(cfg))
        write_embeddings(outputs[0], pages, cfg_hash, cfg.seed)
        save_pca(outputs[2], page_pca)
    return outputs[0]


def run_evaluate(
    embeddings_path: Path | str,
    out_dir: Path | str,
    score_isolated: bool = False,
    per_query: bool = False,
) -> dict:
    """Leave-one-out retrieval metrics over an embedding dump."""
    embeddings_path = _require(Path(embeddings_path), "encode")
    out_dir = Path(out_dir)
    outputs = [out_dir / "eval_report.json", out_dir / "eval_per_query.csv"]
    _guard_cycle([embeddings_path], outputs)
    pages, sidecar = read_embeddings(embeddings_path)
    with output_lock(out_dir):
        ranked = rank_all(pages)
        writers = {p.page_id: p.writer_id for p in pages}
        result = evaluate(ranked, writers, score_isolated_as_zero=score_isolated)
        report = report_to_json(result)
        report["config_hash"] = _stage_hash(
            "evaluate",
            {
                "embeddings_hash": sidecar.get("config_hash", ""),
                "score_isolated": score_isolated,
            },
        )
        report["seed"] = sidecar.get("seed", 0)
        write_json(outputs[0], report)
        if per_query:
            outputs[1].write_text(report_to_csv(result), encoding="utf-8")
    return report


def run_rerank(
    embeddings_path: Path | str, out_dir: Path | str, cfg: RerankConfig
) -> dict:
    """Refine embeddings on the similarity graph; reports before/after metrics."""
    embeddings_path = _require(Path(embeddings_path), "encode")
    out_dir = Path(out_dir)
    outputs = [
        out_dir / "reranked.json",
        out_dir / "reranked.bin",
        out_dir / "rerank_report.json",
    ]
    _guard_cycle([embeddings_path], outputs)
    pages, sidecar = read_embeddings(embeddings_path)
    with output_lock(out_dir):
        writers = {p.page_id: p.writer_id for p in pages}
        before = evaluate(rank_all(pages), writers)
        refined = rerank(pages, cfg)
        after = evaluate(rank_all(refined), writers)
        cfg_hash = _stage_hash(
            "rerank",
            {"embeddings_hash": sidecar.get("config_hash", ""), **asdict(cfg)},
        )
        seed = sidecar.get("seed", 0)
        write_embeddings(outputs[0], refined, cfg_hash, seed)
        report = {
            "after": {"map": after.map, "top1": after.top1},
            "before": {"map": before.map, "top1": before.top1},
            "config_hash": cfg_hash,
            "method": cfg.method,
            "params": asdict(cfg),
            "seed": seed,
        }
        write_json(outputs[2], report)
    return report


def run_sweep(
    embeddings_path: Path | str,
    out_dir: Path | str,
    gammas: list[float],
    layers_grid: list[int],
    ks: list[int],
    method: str = "sgr",
) -> Path:
    """Grid-search rerank parameters; one CSV row per grid point."""
    if not gammas or not layers_grid or not ks:
        raise ValidationError("sweep grid must not be empty")
    embeddings_path = _require(Path(embeddings_path), "encode")
    out_dir = Path(out_dir)
    out_csv = out_dir / "sweep.csv"
    _guard_cycle([embeddings_path], [out_csv])
    pages, _ = read_embeddings(embeddings_path)
    writers = {p.page_id: p.writer_id for p in pages}
    with output_lock(out_dir):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["gamma", "layers", "k", "map", "top1"])
        for gamma in gammas:
            for layers in layers_grid:
                for k in ks:
                    cfg = RerankConfig(method=method, k=k, layers=layers, gamma=gamma)
                    result = evaluate(rank_all(rerank(pages, cfg)), writers)
                    writer.writerow(
                        [repr(float(gamma)), layers, k, repr(result.map), repr(result.top1)]
                    )
        out_csv.write_text(buf.getvalue(), encoding="utf-8")
    return out_csv


def run_report(
    manifest_path: Path | str,
    out_dir: Path | str,
    seeds: list[int],
    cluster_cfg: ClusterConfig,
    train_cfg: TrainConfig,
    encode_cfg: EncodeConfig,
) -> dict:
    """Full pipeline per seed, then mean and spread of the metrics."""
    if not seeds:
        raise ValidationError("report needs at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ValidationError("report seeds must be distinct")
    manifest_path = _require(Path(manifest_path), "synth")
    out_dir = Path(out_dir)
    with output_lock(out_dir):
        per_seed = []
        for seed in seeds:
            run_dir = out_dir / f"seed_{seed}"
            ccfg = replace(cluster_cfg, seed=seed)
            tcfg = replace(train_cfg, seed=seed)
            ecfg = replace(encode_cfg, seed=seed)
            run_cluster(manifest_path, run_dir, ccfg)
            run_train(run_dir / "labels.wrmd", run_dir, tcfg)
            emb = run_encode(manifest_path, run_dir, run_dir, ecfg)
            eval_report = run_evaluate(emb, run_dir)
            per_seed.append(
                {"map": eval_report["map"], "seed": seed, "top1": eval_report["top1"]}
            )
        maps = [r["map"] for r in per_seed]
        top1s = [r["top1"] for r in per_seed]
        cfg_hash = _stage_hash(
            "report",
            {
                "cluster": asdict(cluster_cfg),
                "encode": asdict(encode_cfg),
                "seeds": list(seeds),
                "train": {
                    **asdict(train_cfg),
                    "backbone_dims": (
                        list(train_cfg.backbone_dims)
                        if train_cfg.backbone_dims is not None
                        else None
                    ),
                },
            },
        )
        report = {
            "config_hash": cfg_hash,
            "map_mean": float(np.mean(maps)),
            "map_spread": float(np.max(maps) - np.min(maps)),
            "per_seed": per_seed,
            "seeds": list(seeds),
            "top1_mean": float(np.mean(top1s)),
            "top1_spread": float(np.max(top1s) - np.min(top1s)),
        }
        write_json(out_dir / "report.json", report)
    return report
