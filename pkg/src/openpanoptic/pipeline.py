"""End-to-end runs: dataset synthesis, training, inference, evaluation,
and the uncertainty-method / loss-ladder ablation.

Everything here is deterministic given the run config: scene seeds are
derived from the global seed with fixed split codes, file contents carry
no timestamps, and training consumes scenes in manifest order.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np
from scipy.stats import rankdata

from . import toy_head as th
from .config import RunConfig
from .errors import ConfigError, FormatError, IoError
from .inference import fuse, write_prediction, read_prediction
from .metrics import MetricAccumulator, MetricReport
from .pointcloud_io import (UNKNOWN, Scene, Vocabulary, make_vocabulary,
                            read_kitti_scene, remap_labels, write_kitti_scene)
from .polar_grid import GridSpec, voxelize, voxelize_scene
from .synth import generate_synthetic_scene

MANIFEST_NAME = "manifest.json"
_SPLIT_CODES = {"train": 0, "eval": 1}


def vocab_from_config(cfg: RunConfig) -> Vocabulary:
    v = cfg.vocab
    return make_vocabulary(v.stuff_ids, v.thing_ids,
                           v.unknown_train_ids, v.unknown_eval_ids)


def grid_spec_from_config(cfg: RunConfig) -> GridSpec:
    g = cfg.grid
    return GridSpec(h=g.h, w=g.w, z=g.z, r_min=g.r_min_m, r_max=g.r_max_m,
                    z_min=g.z_min_m, z_max=g.z_max_m)


def scene_seed(base_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([base_seed, _SPLIT_CODES[split], index])
    return int(ss.generate_state(1, np.uint64)[0])


def synth_dataset(cfg: RunConfig, out_dir: str) -> dict:
    """Write train/eval scenes in SemanticKITTI binary format + manifest."""
    manifest = {
        "format_version": 1,
        "seed": cfg.seed,
        "synth": dataclasses.asdict(cfg.synth),
        "vocab": dataclasses.asdict(cfg.vocab),
        "train": [],
        "eval": [],
    }
    for split, count, kinds in (
        ("train", cfg.synth.train_scenes, tuple(cfg.synth.train_unknown_kinds)),
        ("eval", cfg.synth.eval_scenes, tuple(cfg.synth.eval_unknown_kinds)),
    ):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for i in range(count):
            rel = f"{split}/{i:06d}"
            scene = generate_synthetic_scene(
                scene_seed(cfg.seed, split, i), cfg.synth,
                unknown_kinds=kinds, scene_id=rel)
            write_kitti_scene(scene, os.path.join(out_dir, rel + ".bin"),
                              os.path.join(out_dir, rel + ".label"))
            manifest[split].append(rel)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir: str) -> dict:
    path = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise IoError(f"no dataset manifest at {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def load_split(data_dir: str, manifest: dict, split: str) -> list[Scene]:
    scenes = []
    for rel in manifest.get(split, []):
        scenes.append(read_kitti_scene(os.path.join(data_dir, rel + ".bin"),
                                       os.path.join(data_dir, rel + ".label"),
                                       scene_id=rel))
    return scenes


def train_on_dataset(cfg: RunConfig, data_dir: str):
    """Train the head on the manifest's train split (train-mode remap)."""
    manifest = load_manifest(data_dir)
    vocab = vocab_from_config(cfg)
    scenes = [remap_labels(s, vocab, mode="train")
              for s in load_split(data_dir, manifest, "train")]
    tcfg = th.train_config_from_run(cfg)
    params, log = th.train(scenes, vocab, grid_spec_from_config(cfg), tcfg)
    return params, log, tcfg.semantic_mode


def write_train_outputs(params, log, semantic_mode: str, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    th.save_checkpoint(params, os.path.join(out_dir, "checkpoint.bin"),
                       semantic_mode)
    with open(os.path.join(out_dir, "train_log.jsonl"), "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def predict_scene(params, semantic_mode: str, scene: Scene, vocab: Vocabulary,
                  spec: GridSpec, cfg: RunConfig):
    """Voxelize (labels unused), run the head, fuse. Returns (pred, grid, cache)."""
    grid = voxelize(scene, spec)
    cache = th.forward(params, grid.features)
    u = th.scene_uncertainty(cache, semantic_mode)
    scores = cache.alpha if semantic_mode == "dirichlet" else cache.sem_logits
    pred = fuse(scores, u, cache.phi, cache.sigma_sq, cache.center_score,
                grid, vocab, cfg.infer)
    return pred, grid, cache


def infer_on_dataset(cfg: RunConfig, data_dir: str, checkpoint_path: str,
                     out_dir: str, fmt: str = "binary",
                     split: str = "eval") -> list[str]:
    params, semantic_mode = th.load_checkpoint(checkpoint_path)
    vocab = vocab_from_config(cfg)
    if params.k != vocab.K:
        raise FormatError(
            f"checkpoint has K={params.k} classes but the vocabulary has "
            f"K={vocab.K}"
        )
    manifest = load_manifest(data_dir)
    spec = grid_spec_from_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    ext = ".pred" if fmt == "binary" else ".txt"
    written = []
    for scene in load_split(data_dir, manifest, split):
        pred, _, _ = predict_scene(params, semantic_mode, scene, vocab, spec, cfg)
        path = os.path.join(out_dir, scene.scene_id.replace("/", "_") + ext)
        write_prediction(pred, path, fmt)
        written.append(path)
    return written


def evaluate_dataset(cfg: RunConfig, data_dir: str, pred_dir: str,
                     split: str = "eval", point_level: bool = False) -> MetricReport:
    """Compare written predictions against eval-mode ground truth."""
    manifest = load_manifest(data_dir)
    vocab = vocab_from_config(cfg)
    spec = grid_spec_from_config(cfg)
    acc = MetricAccumulator(vocab)
    scenes = load_split(data_dir, manifest, split)
    if not scenes:
        raise IoError(f"dataset has no scenes in split {split!r}")
    found = 0
    for scene in scenes:
        base = os.path.join(pred_dir, scene.scene_id.replace("/", "_"))
        path = next((base + ext for ext in (".pred", ".txt")
                     if os.path.isfile(base + ext)), None)
        if path is None:
            raise IoError(f"no prediction for scene {scene.scene_id} in {pred_dir}")
        found += 1
        pred = read_prediction(path)
        remapped = remap_labels(scene, vocab, mode="eval")
        grid = voxelize_scene(remapped, spec)
        if point_level:
            acc.update_points(pred, grid, remapped.semantic, remapped.instance)
        else:
            acc.update(pred, grid)
    if found == 0:
        raise IoError(f"no predictions found in {pred_dir}")
    return acc.report()


def auroc(scores_positive: np.ndarray, scores_negative: np.ndarray) -> float:
    """Rank-based AUROC with midrank tie handling (Mann-Whitney)."""
    pos = np.asarray(scores_positive, dtype=np.float64)
    neg = np.asarray(scores_negative, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ConfigError("AUROC needs both positive and negative scores")
    ranks = rankdata(np.concatenate([pos, neg]))
    r_pos = ranks[:len(pos)].sum()
    n_pos, n_neg = len(pos), len(neg)
    return float((r_pos - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def heldout_separation(params, semantic_mode: str, scenes: list[Scene],
                       vocab: Vocabulary, spec: GridSpec, cfg: RunConfig):
    """Pooled per-voxel uncertainty split by eval-mode ground truth.

    Returns (delta_u, auroc) where positives are unknown-gt voxels.
    """
    u_known, u_unknown = [], []
    for scene in scenes:
        remapped = remap_labels(scene, vocab, mode="eval")
        grid = voxelize_scene(remapped, spec)
        cache = th.forward(params, grid.features)
        u = th.scene_uncertainty(cache, semantic_mode)
        sem, _ = grid.targets_at_voxels()
        u_known.append(u[(sem >= 0) & (sem < vocab.K)])
        u_unknown.append(u[sem == UNKNOWN])
    uk = np.concatenate(u_known)
    uu = np.concatenate(u_unknown)
    if len(uk) == 0 or len(uu) == 0:
        raise ConfigError("held-out scenes lack known or unknown voxels")
    return float(uu.mean() - uk.mean()), auroc(uu, uk)


ABLATION_VARIANTS = (
    ("softmax_entropy", {"train.semantic_mode": "softmax", "train.w_uniform": 0.0,
                         "train.w_adaptive": 0.0, "train.w_contrastive": 0.0}),
    ("dirichlet_seg_only", {"train.w_uniform": 0.0, "train.w_adaptive": 0.0,
                            "train.w_contrastive": 0.0}),
    ("dirichlet_uniform", {"train.w_adaptive": 0.0, "train.w_contrastive": 0.0}),
    ("dirichlet_uniform_adaptive", {"train.w_contrastive": 0.0}),
    ("dirichlet_full", {}),
)


def run_ablation(cfg: RunConfig, data_dir: str) -> list[dict]:
    """Train the five ablation variants under identical seeds and report
    uncertainty separation (AUROC), UQ, and known PQ for each."""
    from .config import clone, set_key

    manifest = load_manifest(data_dir)
    vocab = vocab_from_config(cfg)
    spec = grid_spec_from_config(cfg)
    train_raw = load_split(data_dir, manifest, "train")
    eval_raw = load_split(data_dir, manifest, "eval")
    if not train_raw or not eval_raw:
        raise ConfigError("ablation needs non-empty train and eval splits")

    rows = []
    for name, overrides in ABLATION_VARIANTS:
        vcfg = clone(cfg)
        for key, value in overrides.items():
            set_key(vcfg, key, value)
        tcfg = th.train_config_from_run(vcfg)
        train_scenes = [remap_labels(s, vocab, mode="train") for s in train_raw]
        params, _ = th.train(train_scenes, vocab, spec, tcfg)

        acc = MetricAccumulator(vocab)
        for scene in eval_raw:
            pred, _, _ = predict_scene(params, tcfg.semantic_mode, scene,
                                       vocab, spec, vcfg)
            remapped = remap_labels(scene, vocab, mode="eval")
            acc.update(pred, voxelize_scene(remapped, spec))
        report = acc.report()
        delta_u, score = heldout_separation(params, tcfg.semantic_mode,
                                            eval_raw, vocab, spec, vcfg)
        rows.append({
            "variant": name,
            "auroc": score,
            "delta_u": delta_u,
            "uq": report.uq,
            "pq": report.pq,
        })
    return rows
