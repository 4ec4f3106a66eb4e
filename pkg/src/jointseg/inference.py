"""Test-time pipeline: argmax semantics, mean-shift instance clustering, and
cross-block merging into scene-level labels.

Mean-shift uses a flat kernel with every point as a seed; converged modes
within half a bandwidth are unified and every point joins its nearest mode.
Block merging maintains a voxel grid over the scene: each block-local
instance adopts the global id already covering enough of its voxels, or mints
a new one, and every scene point finally takes the id of its voxel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Scene, split_into_blocks


@dataclass
class MeanShiftConfig:
    bandwidth: float = 0.6
    max_iter: int = 300
    tol: float = 1e-4
    merge_radius: float | None = None  # defaults to bandwidth / 2

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    @property
    def effective_merge_radius(self) -> float:
        return self.bandwidth / 2 if self.merge_radius is None else self.merge_radius


def mean_shift(points: np.ndarray, cfg: MeanShiftConfig) -> tuple[np.ndarray, np.ndarray]:
    """Cluster points with flat-kernel mean-shift.

    Returns (labels, modes); labels are dense ids ordered by descending mode
    support (points within one bandwidth of the mode), ties by seed index.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError(f"points must be (N, K) with N >= 1, got {pts.shape}")
    n = pts.shape[0]
    bw2 = cfg.bandwidth ** 2

    modes = pts.copy()  # one seed per point
    active = np.ones(n, dtype=bool)
    for _ in range(cfg.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        cur = modes[idx]
        d2 = ((cur[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        within = d2 <= bw2
        new = (within @ pts) / within.sum(axis=1, keepdims=True)
        shift = np.linalg.norm(new - cur, axis=1)
        modes[idx] = new
        active[idx[shift < cfg.tol]] = False

    support = (((modes[:, None, :] - pts[None, :, :]) ** 2).sum(-1) <= bw2).sum(axis=1)
    order = np.lexsort((np.arange(n), -support))  # support desc, seed index asc
    merge_r = cfg.effective_merge_radius
    kept: list[int] = []
    for i in order:
        if all(np.linalg.norm(modes[i] - modes[j]) > merge_r for j in kept):
            kept.append(int(i))
    centers = modes[kept]
    d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    labels = d2.argmin(axis=1)  # first minimum = lowest cluster id on ties
    return labels.astype(np.int64), centers


@dataclass
class BlockPrediction:
    """Per-point predictions of one block with dense block-local instance ids."""

    semantic: np.ndarray
    instance: np.ndarray
    instance_categories: np.ndarray
    point_indices: np.ndarray

    @property
    def num_instances(self) -> int:
        return int(self.instance_categories.shape[0])


def predict_block(logits: np.ndarray, embeddings: np.ndarray,
                  point_indices: np.ndarray, cfg: MeanShiftConfig,
                  num_classes: int | None = None) -> BlockPrediction:
    """Argmax classes, mean-shift instances, and majority-vote categories.

    Category ties within an instance resolve to the lowest class id.
    """
    logits = np.asarray(logits)
    semantic = logits.argmax(axis=1).astype(np.int64)
    instance, _ = mean_shift(np.asarray(embeddings), cfg)
    c = int(num_classes if num_classes is not None else logits.shape[1])
    n_inst = int(instance.max()) + 1
    categories = np.empty(n_inst, dtype=np.int64)
    for k in range(n_inst):
        votes = np.bincount(semantic[instance == k], minlength=c)
        categories[k] = int(votes.argmax())
    return BlockPrediction(semantic=semantic, instance=instance,
                           instance_categories=categories,
                           point_indices=np.asarray(point_indices, dtype=np.int64))


@dataclass
class SceneSegmentation:
    """Scene-level result: a class and a global instance id for every point."""

    semantic: np.ndarray
    instance: np.ndarray
    num_instances: int
    uncovered_points: int  # points resolved via the nearest labeled voxel


def block_merging(predictions: list[BlockPrediction], scene: Scene, num_classes: int,
                  voxel_divisions: int = 400, overlap_threshold: float = 0.3) -> SceneSegmentation:
    """Merge per-block instance ids into scene-level ids over a voxel grid.

    Blocks are processed in order. A block-local instance merges into the
    global id whose labeled voxels overlap its own by at least
    ``overlap_threshold`` of the smaller voxel set (highest overlap wins,
    ties to the lower id); otherwise it mints a new id. The symmetric ratio
    keeps an instance whole when a thin sliver of it was processed first and
    a much larger portion arrives later. Voxels keep their first assignment,
    and per-point semantics are resolved by majority vote across overlapping
    blocks.
    """
    if not 0 < overlap_threshold <= 1:
        raise ValueError(f"overlap_threshold must be in (0, 1], got {overlap_threshold}")
    n = scene.num_points
    voxel_size = scene.room_extent / voxel_divisions
    keys_per_point = np.floor(scene.points / voxel_size).astype(np.int64)

    voxel_gid: dict[tuple[int, int, int], int] = {}
    voxel_votes: dict[tuple[int, int, int], np.ndarray] = {}
    gid_voxel_count: dict[int, int] = {}
    point_votes = np.zeros((n, num_classes), dtype=np.int64)
    next_gid = 0

    for pred in predictions:
        for pt, cls in zip(pred.point_indices, pred.semantic):
            point_votes[pt, cls] += 1
        for local in range(pred.num_instances):
            members = pred.point_indices[pred.instance == local]
            if members.size == 0:
                continue
            vkeys = {tuple(k) for k in keys_per_point[members]}
            overlaps: dict[int, int] = {}
            for k in vkeys:
                gid = voxel_gid.get(k)
                if gid is not None:
                    overlaps[gid] = overlaps.get(gid, 0) + 1
            merged = False
            if overlaps:
                best = min(overlaps, key=lambda g: (-overlaps[g], g))
                denom = min(len(vkeys), gid_voxel_count[best])
                merged = overlaps[best] / denom >= overlap_threshold
            gid = best if merged else next_gid
            if not merged:
                next_gid += 1
                gid_voxel_count[gid] = 0
            cls = int(pred.instance_categories[local])
            for k in vkeys:
                if k not in voxel_gid:
                    voxel_gid[k] = gid
                    gid_voxel_count[gid] += 1
                votes = voxel_votes.get(k)
                if votes is None:
                    votes = np.zeros(num_classes, dtype=np.int64)
                    voxel_votes[k] = votes
                votes[cls] += 1

    labeled_keys = list(voxel_gid.keys())
    labeled_centers = (np.array(labeled_keys, dtype=np.float64) + 0.5) * voxel_size if labeled_keys else None

    instance = np.empty(n, dtype=np.int64)
    semantic = np.empty(n, dtype=np.int64)
    uncovered = 0
    for i in range(n):
        key = tuple(keys_per_point[i])
        gid = voxel_gid.get(key)
        if gid is None:
            uncovered += 1
            if labeled_centers is None:
                instance[i] = 0
                semantic[i] = 0
                continue
            nearest = int(np.argmin(((labeled_centers - scene.points[i]) ** 2).sum(axis=1)))
            key = labeled_keys[nearest]
            gid = voxel_gid[key]
        instance[i] = gid
        if point_votes[i].sum() > 0:
            semantic[i] = int(point_votes[i].argmax())
        else:
            semantic[i] = int(voxel_votes[key].argmax())

    # relabel instances densely in order of first appearance
    remap: dict[int, int] = {}
    for i in range(n):
        g = int(instance[i])
        if g not in remap:
            remap[g] = len(remap)
        instance[i] = remap[g]
    return SceneSegmentation(semantic=semantic, instance=instance,
                             num_instances=len(remap), uncovered_points=uncovered)


def segment_scene(network, scene: Scene, *, block_size: float = 1.0, stride: float = 0.5,
                  points_per_block: int = 512, min_points: int = 64, center_xy: bool = True,
                  mean_shift_cfg: MeanShiftConfig | None = None, seed: int = 0,
                  voxel_divisions: int = 400, overlap_threshold: float = 0.3) -> SceneSegmentation:
    """Split, forward, cluster, and merge one scene; deterministic given seed."""
    if mean_shift_cfg is None:
        mean_shift_cfg = MeanShiftConfig()
    rng = np.random.default_rng(seed)
    blocks = split_into_blocks(scene, block_size, stride, points_per_block,
                               min_points, center_xy, rng)
    predictions = []
    with ad.no_grad():
        for block in blocks:
            out = network.forward(block.features)
            predictions.append(predict_block(out.logits.values, out.embeddings.values,
                                             block.point_indices, mean_shift_cfg,
                                             network.num_classes))
    return block_merging(predictions, scene, network.num_classes,
                         voxel_divisions, overlap_threshold)
