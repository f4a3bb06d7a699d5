"""Stage orchestration over a shared output directory.

Every stage records the sha256 of each artifact it consumed, and every
consumer recomputes those hashes before trusting an input, so editing or
regenerating any upstream file is caught at the next stage with an error
naming the expected hash. Artifact bytes depend only on the config and
the interaction data, never on wall-clock state: two runs with the same
config produce identical files.
"""
from __future__ import annotations

import dataclasses
import logging
from collections import Counter
from pathlib import Path

import numpy as np

from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .config import RunConfig
from .encoder import EmbeddingTable, load_table, pretrain_bpr, save_table
from .graph import (DynamicGraph, build_dynamic, read_interactions,
                    read_manifest, verify_manifest, write_manifest)
from .library import SubgraphLibrary, build_library, load_library, \
    save_library
from .metrics import evaluate_snapshots
from .retrieval import FusionConfig, build_inference_state, \
    finetune_position, recommend, write_recommendations
from .tam import TamParams, load_tam, pretrain_tam, save_tam
from .task_eval import build_task_dataset, read_task_dataset, \
    write_task_dataset
from . import plotting

log = logging.getLogger(__name__)

__all__ = ["STAGES", "Paths", "variant_name", "fusion_config", "ingest",
           "run_stage", "load_finetuned"]

STAGES = ("pretrain", "build-library", "label", "train-tam", "finetune",
          "evaluate")


class Paths:
    """Artifact layout inside the run's output directory."""

    def __init__(self, cfg: RunConfig):
        self.root = Path(cfg.output_dir)

    @property
    def manifest(self):
        return self.root / "manifest.txt"

    @property
    def encoder(self):
        return self.root / "encoder.ckpt"

    @property
    def library(self):
        return self.root / "library.ckpt"

    @property
    def dataset(self):
        return self.root / "d_aware.txt"

    @property
    def tam(self):
        return self.root / "tam.ckpt"

    def finetuned(self, position: int):
        return self.root / f"finetune_p{position}.ckpt"

    def report(self, variant: str):
        return self.root / f"report_{variant}.txt"

    def recommendations(self, position: int, variant: str):
        return self.root / f"recommendations_p{position}_{variant}.txt"

    def stage_log(self, stage: str):
        return self.root / f"{stage.replace('-', '_')}.log"


def variant_name(cfg: RunConfig) -> str:
    if cfg.disable_retrieval:
        return "vanilla"
    if cfg.disable_semantic and cfg.disable_structure:
        return "wo-all"
    if cfg.disable_semantic:
        return "wo-sem"
    if cfg.disable_structure:
        return "wo-str"
    return "full"


def fusion_config(cfg: RunConfig, beta_param: float | None = None
                  ) -> FusionConfig:
    return FusionConfig(
        coarse_k=cfg.coarse_k,
        top_m=0 if cfg.disable_retrieval else cfg.top_m,
        alpha_mode=cfg.alpha_mode,
        temperature=cfg.temperature,
        beta_param=cfg.beta_init if beta_param is None else beta_param,
        margin=cfg.margin,
        margin_weight=cfg.margin_weight,
        reg_weight=cfg.reg_weight,
        use_semantic=not cfg.disable_semantic,
        use_structure=not cfg.disable_structure)


def _write_log(path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def _require(path, producer: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"{path} is missing; run `{producer}` "
                                f"first")
    return path


def _check_hash(label: str, expected: str, path) -> str:
    actual = file_sha256(path)
    if actual != expected:
        raise ValueError(f"{label}: expected {path} to have sha256 "
                         f"{expected}, found {actual}")
    return actual


# ---------------------------------------------------------------------------
# data


def ingest(cfg: RunConfig) -> dict:
    """Build the snapshot sequence from the interaction file and persist
    its manifest. Every later stage rebuilds the graph and verifies it
    against this manifest."""
    rows = read_interactions(cfg.interactions)
    dg = build_dynamic(rows, cfg.granularity, cfg.split)
    paths = Paths(cfg)
    paths.root.mkdir(parents=True, exist_ok=True)
    write_manifest(paths.manifest, dg, cfg.granularity)
    info = {"manifest": str(paths.manifest),
            "manifest_sha256": file_sha256(paths.manifest),
            "snapshots": len(dg.snapshots), "users": dg.user_count,
            "items": dg.item_count,
            "edges": sum(s.n_edges for s in dg.snapshots)}
    _write_log(paths.stage_log("ingest"),
               [f"{k} {v}" for k, v in info.items()])
    return info


def _load_graph(cfg: RunConfig, paths: Paths) -> DynamicGraph:
    _require(paths.manifest, "ingest")
    rows = read_interactions(cfg.interactions)
    dg = build_dynamic(rows, cfg.granularity, cfg.split)
    verify_manifest(dg, read_manifest(paths.manifest))
    return dg


# ---------------------------------------------------------------------------
# stages


def stage_pretrain(cfg: RunConfig) -> dict:
    paths = Paths(cfg)
    graph = _load_graph(cfg, paths)
    table, losses = pretrain_bpr(
        graph, d=cfg.d, layers=cfg.layers, epochs=cfg.pretrain_epochs,
        lr=cfg.lr, mu=cfg.reg_weight, batch_size=cfg.batch_size,
        seed=cfg.seed)
    save_table(paths.encoder, table,
               meta={"manifest_sha256": file_sha256(paths.manifest),
                     "seed": cfg.seed, "epochs": cfg.pretrain_epochs})
    _write_log(paths.stage_log("pretrain"),
               [f"epoch {i} loss {v!r}" for i, v in enumerate(losses)])
    return {"checkpoint": str(paths.encoder),
            "checkpoint_sha256": file_sha256(paths.encoder),
            "final_loss": losses[-1]}


def stage_build_library(cfg: RunConfig) -> dict:
    paths = Paths(cfg)
    graph = _load_graph(cfg, paths)
    _require(paths.encoder, "pretrain")
    table, _ = load_table(paths.encoder)
    source = file_sha256(paths.encoder)
    lib = build_library(graph, table, k=cfg.hop, cap=cfg.cap,
                        seed=cfg.seed, source_hash=source)
    save_library(paths.library, lib)
    info = {"library": str(paths.library),
            "library_sha256": file_sha256(paths.library),
            "entries": len(lib), "hop": cfg.hop,
            "encoder_sha256": source}
    _write_log(paths.stage_log("build-library"),
               [f"{k} {v}" for k, v in info.items()])
    return info


def _load_library_checked(paths: Paths) -> SubgraphLibrary:
    _require(paths.library, "build-library")
    _require(paths.encoder, "pretrain")
    lib = load_library(paths.library)
    _check_hash("library was built from a different encoder checkpoint",
                lib.source_hash, paths.encoder)
    return lib


def stage_label(cfg: RunConfig) -> dict:
    paths = Paths(cfg)
    graph = _load_graph(cfg, paths)
    table, _ = load_table(_require(paths.encoder, "pretrain"))
    lib = _load_library_checked(paths)
    triples, skipped = build_task_dataset(
        graph, lib, table, n_q=cfg.n_queries,
        r_sample=cfg.candidates_per_query, n_pos=cfg.n_pos,
        eps=cfg.epsilon, cap=cfg.cap, seed=cfg.seed)
    write_task_dataset(paths.dataset, triples, seed=cfg.seed,
                       eps=cfg.epsilon, n_pos=cfg.n_pos,
                       checkpoint_hash=file_sha256(paths.library),
                       skipped=skipped)
    by_label = Counter(t.label for t in triples)
    info = {"dataset": str(paths.dataset),
            "dataset_sha256": file_sha256(paths.dataset),
            "rows": len(triples), "skipped_queries": skipped}
    info.update({k: by_label.get(k, 0)
                 for k in ("beneficial", "irrelevant", "harmful")})
    _write_log(paths.stage_log("label"),
               [f"{k} {v}" for k, v in info.items()])
    return info


def stage_train_tam(cfg: RunConfig) -> dict:
    paths = Paths(cfg)
    lib = _load_library_checked(paths)
    triples, header = read_task_dataset(_require(paths.dataset, "label"))
    _check_hash("labeled dataset was computed against a different "
                "library", header["checkpoint"], paths.library)
    params, history, skipped = pretrain_tam(
        triples, lib, epochs=cfg.tam_epochs, lr=cfg.tam_lr,
        rho=cfg.rho,
        tau=cfg.tau, batch_size=cfg.tam_batch_size, seed=cfg.seed,
        heads=cfg.heads, structure_layers=cfg.structure_layers,
        d_hid=cfg.d_hid, hidden=cfg.score_hidden)
    save_tam(paths.tam, params,
             extra_meta={"dataset_sha256": file_sha256(paths.dataset),
                         "seed": cfg.seed, "epochs": cfg.tam_epochs})
    _write_log(paths.stage_log("train-tam"),
               [f"epoch {row['epoch']} l_mtl {row['l_mtl']!r} "
                f"l_ocl {row['l_ocl']!r} l_biscl {row['l_biscl']!r}"
                for row in history])
    return {"checkpoint": str(paths.tam),
            "checkpoint_sha256": file_sha256(paths.tam),
            "unresolved_rows": skipped,
            "final_loss": history[-1]["l_biscl"]}


def _verified_stack(paths: Paths, fusion: FusionConfig):
    """Load whatever the configured objective needs, hash-checking the
    whole chain back to the encoder checkpoint."""
    table, _ = load_table(_require(paths.encoder, "pretrain"))
    enc_hash = file_sha256(paths.encoder)
    hashes = {"encoder_sha256": enc_hash}
    needs_tam = not fusion.retrieval_disabled or fusion.margin_weight > 0
    lib = tam = None
    if needs_tam:
        lib = _load_library_checked(paths)
        hashes["library_sha256"] = file_sha256(paths.library)
        _, header = read_task_dataset(_require(paths.dataset, "label"))
        _check_hash("labeled dataset was computed against a different "
                    "library", header["checkpoint"], paths.library)
        tam, tam_meta = load_tam(_require(paths.tam, "train-tam"))
        _check_hash("relevance model was trained on a different labeled "
                    "dataset", tam_meta["dataset_sha256"], paths.dataset)
        hashes["tam_sha256"] = file_sha256(paths.tam)
    return table, lib, tam, hashes


def _test_positions(graph: DynamicGraph) -> list:
    # a snapshot's list index equals the history length that serves it
    return list(range(graph.pretrain_split, len(graph.snapshots)))


def stage_finetune(cfg: RunConfig) -> dict:
    paths = Paths(cfg)
    graph = _load_graph(cfg, paths)
    fusion = fusion_config(cfg)
    table, lib, tam, hashes = _verified_stack(paths, fusion)
    variant = variant_name(cfg)
    written = []
    lines = []
    for position in _test_positions(graph):
        res = finetune_position(
            graph, position, table,
            None if fusion.retrieval_disabled else lib, tam, fusion,
            hop=cfg.hop, cap=cfg.cap, epochs=cfg.finetune_epochs,
            lr=cfg.lr, batch_size=cfg.batch_size,
            drop_rate=cfg.drop_rate, seed=cfg.seed,
            train_tam=cfg.train_tam)
        arrays = {"user_embeddings": res.table.user_embeddings,
                  "item_embeddings": res.table.item_embeddings,
                  "beta_param": np.array([res.beta_param], np.float32)}
        meta = {"position": position, "variant": variant,
                "layers": cfg.layers, **hashes}
        if res.tam is not None:
            arrays.update({f"tam.{k}": v for k, v in res.tam.arrays.items()})
            meta.update(tam_d=res.tam.d, tam_heads=res.tam.heads,
                        tam_structure_layers=res.tam.structure_layers,
                        tam_d_hid=res.tam.d_hid, tam_hidden=res.tam.hidden)
        path = paths.finetuned(position)
        save_checkpoint(path, arrays, meta)
        written.append(str(path))
        for row in res.history:
            lines.append(f"position {position} epoch {row['epoch']} "
                         f"l_total {row['l_total']!r} "
                         f"l_bpr {row['l_bpr']!r} l_mrl {row['l_mrl']!r} "
                         f"triplets {row['triplets']}")
    _write_log(paths.stage_log("finetune"), lines)
    return {"checkpoints": written, "positions": _test_positions(graph),
            "variant": variant}


def load_finetuned(path, expected: dict | None = None):
    """Rebuild (table, tam or None, beta) from a fine-tune checkpoint.

    `expected` maps meta keys to required values; a disagreement means
    the checkpoint was produced by a different upstream chain or
    ablation config.
    """
    arrays, meta = load_checkpoint(path)
    for key, want in (expected or {}).items():
        got = meta.get(key)
        if got != str(want):
            raise ValueError(f"{path}: incompatible checkpoint: expected "
                             f"{key} {want}, found {got}")
    table = EmbeddingTable(user_embeddings=arrays["user_embeddings"],
                           item_embeddings=arrays["item_embeddings"],
                           layers=int(meta["layers"]))
    beta = float(arrays["beta_param"][0])
    tam = None
    tam_arrays = {k[len("tam."):]: v for k, v in arrays.items()
                  if k.startswith("tam.")}
    if tam_arrays:
        tam = TamParams(arrays=tam_arrays, d=int(meta["tam_d"]),
                        heads=int(meta["tam_heads"]),
                        structure_layers=int(meta["tam_structure_layers"]),
                        d_hid=int(meta["tam_d_hid"]),
                        hidden=int(meta["tam_hidden"]))
    return table, tam, beta


def stage_evaluate(cfg: RunConfig) -> dict:
    paths = Paths(cfg)
    graph = _load_graph(cfg, paths)
    variant = variant_name(cfg)
    base = fusion_config(cfg)
    _, lib, _, hashes = _verified_stack(paths, base)
    states = {}
    ckpt_hashes = {}
    for position in _test_positions(graph):
        path = _require(paths.finetuned(position), "finetune")
        table_p, tam_p, beta = load_finetuned(
            path, expected={"variant": variant, **hashes})
        fusion_p = dataclasses.replace(base, beta_param=beta)
        states[position] = build_inference_state(
            graph, position, table_p, lib, tam_p, fusion_p,
            hop=cfg.hop, cap=cfg.cap, seed=cfg.seed)
        ckpt_hashes[position] = file_sha256(path)

    captured = {p: [] for p in states}

    def recommender(user: int, position: int):
        rec = recommend(states[position], user, top_k=cfg.k)
        captured[position].append(rec)
        return rec.item_ids

    report = evaluate_snapshots(recommender, graph, k=cfg.k,
                                seed=cfg.seed, variant=variant)
    if all(r.skipped for r in report.rows):
        raise ValueError("every test snapshot was skipped: no evaluable "
                         "users")
    report.save(paths.report(variant))
    rec_files = []
    for position, recs in captured.items():
        meta = {"variant": variant, "position": position,
                "seed": cfg.seed, "k": cfg.k,
                "coarse_k": base.coarse_k, "top_m": base.top_m,
                "beta_param": repr(states[position].config.beta_param),
                "finetune_sha256": ckpt_hashes[position], **hashes}
        path = paths.recommendations(position, variant)
        write_recommendations(path, recs, meta)
        rec_files.append(str(path))
    figures = plotting.report_figures(report, paths.root,
                                      f"report_{variant}")
    info = {"report": str(paths.report(variant)),
            "mean_recall": report.mean_recall,
            "mean_ndcg": report.mean_ndcg,
            "recommendations": rec_files, "figures": figures,
            "variant": variant}
    _write_log(paths.stage_log("evaluate"),
               [f"{k} {v}" for k, v in info.items()])
    return info


_STAGE_FN = {"pretrain": stage_pretrain,
             "build-library": stage_build_library,
             "label": stage_label,
             "train-tam": stage_train_tam,
             "finetune": stage_finetune,
             "evaluate": stage_evaluate}


def run_stage(stage: str, cfg: RunConfig) -> dict:
    """Dispatch one pipeline stage by name.

    Prerequisite artifacts must exist and hash-match their recorded
    lineage; violations raise with the expected hash in the message.
    """
    if stage not in _STAGE_FN:
        raise ValueError(f"unknown stage {stage!r}; expected one of "
                         f"{STAGES}")
    return _STAGE_FN[stage](cfg)
