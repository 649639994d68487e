"""Polar BEV voxelization, majority-vote voxel targets, center heatmaps.

A point with planar radius r = sqrt(x^2 + y^2), angle theta = atan2(y, x)
and height z lands in bin

    ( floor((r - r_min) / (r_max - r_min) * H),
      floor((theta + pi) / (2 pi) * W),
      floor((z - z_min) / (z_max - z_min) * Z) )

when r in [r_min, r_max) and z in [z_min, z_max); other points are
dropped and counted. Non-empty voxels carry an 8-dim hand-crafted
feature vector (log occupancy, z mean/std, intensity mean, radius mean,
and the mean in-bin residual in r/theta/z units).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeMismatchError
from .pointcloud_io import EMPTY, IGNORE, UNKNOWN, Scene

FEATURE_DIM = 8


@dataclass(frozen=True)
class GridSpec:
    h: int
    w: int
    z: int
    r_min: float
    r_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if self.h <= 0 or self.w <= 0 or self.z <= 0:
            raise ValueError("grid dimensions must be positive")
        if not (self.r_min < self.r_max) or not (self.z_min < self.z_max):
            raise ValueError("grid ranges must be non-degenerate")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.z)

    @property
    def n_voxels(self) -> int:
        return self.h * self.w * self.z


@dataclass
class VoxelGrid:
    """A voxelized scene: dense occupancy/targets plus per-non-empty-voxel
    features and a CSR index of contributing points."""

    spec: GridSpec
    occupancy: np.ndarray            # (H, W, Z) int32
    voxel_coords: np.ndarray         # (M, 3) int32, lexicographically sorted
    features: np.ndarray             # (M, FEATURE_DIM) float64
    point_order: np.ndarray          # (P_in,) int64, point ids grouped by voxel
    point_start: np.ndarray          # (M + 1,) int64 CSR offsets
    dropped_count: int
    semantic_target: np.ndarray | None = None   # (H, W, Z) int32
    instance_target: np.ndarray | None = None   # (H, W, Z) int32

    @property
    def n_voxels(self) -> int:
        return len(self.voxel_coords)

    def voxel_points(self, i: int) -> np.ndarray:
        return self.point_order[self.point_start[i]:self.point_start[i + 1]]

    def targets_at_voxels(self) -> tuple[np.ndarray, np.ndarray]:
        """Per non-empty voxel (semantic, instance) targets, grid order."""
        if self.semantic_target is None or self.instance_target is None:
            raise ValueError("targets not computed; run majority_vote_targets first")
        h, w, z = self.voxel_coords.T
        return self.semantic_target[h, w, z], self.instance_target[h, w, z]


@dataclass
class CenterHeatmap:
    values: np.ndarray   # (H, W, Z) float64 in [0, 1]
    sigma: float


def polar_coords(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.hypot(xyz[:, 0], xyz[:, 1])
    theta = np.arctan2(xyz[:, 1], xyz[:, 0])
    return r, theta


def bin_indices(xyz: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """(bins (N,3) int64, in_range (N,) bool); bins are valid only where in range."""
    r, theta = polar_coords(xyz)
    z = xyz[:, 2]
    in_range = (r >= spec.r_min) & (r < spec.r_max) & (z >= spec.z_min) & (z < spec.z_max)
    hb = np.floor((r - spec.r_min) / (spec.r_max - spec.r_min) * spec.h).astype(np.int64)
    wb = np.floor((theta + np.pi) / (2 * np.pi) * spec.w).astype(np.int64)
    zb = np.floor((z - spec.z_min) / (spec.z_max - spec.z_min) * spec.z).astype(np.int64)
    # theta = +pi aliases -pi; clamp the r/z edge cases float rounding can produce
    wb %= spec.w
    np.clip(hb, 0, spec.h - 1, out=hb)
    np.clip(zb, 0, spec.z - 1, out=zb)
    return np.column_stack([hb, wb, zb]), in_range


def voxelize(scene: Scene, spec: GridSpec) -> VoxelGrid:
    """Bin a scene into the polar grid and compute per-voxel features."""
    bins, in_range = bin_indices(scene.xyz, spec)
    idx = np.nonzero(in_range)[0]
    dropped = len(scene) - len(idx)

    occupancy = np.zeros(spec.shape, dtype=np.int32)
    if len(idx) == 0:
        return VoxelGrid(
            spec=spec,
            occupancy=occupancy,
            voxel_coords=np.zeros((0, 3), dtype=np.int32),
            features=np.zeros((0, FEATURE_DIM)),
            point_order=np.zeros(0, dtype=np.int64),
            point_start=np.zeros(1, dtype=np.int64),
            dropped_count=dropped,
        )

    b = bins[idx]
    linear = (b[:, 0] * spec.w + b[:, 1]) * spec.z + b[:, 2]
    order = np.argsort(linear, kind="stable")
    point_order = idx[order]
    linear_sorted = linear[order]
    uniq, start, counts = np.unique(linear_sorted, return_index=True, return_counts=True)
    point_start = np.concatenate([start, [len(linear_sorted)]]).astype(np.int64)

    coords = np.empty((len(uniq), 3), dtype=np.int32)
    coords[:, 0] = uniq // (spec.w * spec.z)
    coords[:, 1] = (uniq // spec.z) % spec.w
    coords[:, 2] = uniq % spec.z
    occupancy[coords[:, 0], coords[:, 1], coords[:, 2]] = counts.astype(np.int32)

    rows = np.repeat(np.arange(len(uniq)), counts)  # voxel row per sorted point
    pts = scene.xyz[point_order]
    inten = scene.intensity[point_order]
    r, theta = polar_coords(pts)
    zc = pts[:, 2]

    dr = (spec.r_max - spec.r_min) / spec.h
    dth = 2 * np.pi / spec.w
    dz = (spec.z_max - spec.z_min) / spec.z
    r_center = spec.r_min + (coords[:, 0] + 0.5) * dr
    th_center = -np.pi + (coords[:, 1] + 0.5) * dth
    z_center = spec.z_min + (coords[:, 2] + 0.5) * dz

    def vmean(values):
        return np.bincount(rows, weights=values, minlength=len(uniq)) / counts

    mean_z = vmean(zc)
    std_z = np.sqrt(np.maximum(vmean(zc**2) - mean_z**2, 0.0))
    features = np.column_stack([
        np.log1p(counts.astype(np.float64)),
        mean_z,
        std_z,
        vmean(inten),
        vmean(r),
        (vmean(r) - r_center) / dr,
        (vmean(theta) - th_center) / dth,
        (mean_z - z_center) / dz,
    ])

    return VoxelGrid(
        spec=spec,
        occupancy=occupancy,
        voxel_coords=coords,
        features=features,
        point_order=point_order,
        point_start=point_start,
        dropped_count=dropped,
    )


def modal_per_group(group: np.ndarray, value: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per group id, the most frequent value; ties go to the lowest value.

    Returns (group ids, winning values); group ids come out sorted.
    """
    pairs = np.stack([group, value], axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    # order by (group asc, count desc, value asc): first row per group wins
    order = np.lexsort((uniq[:, 1], -counts, uniq[:, 0]))
    uniq = uniq[order]
    first = np.concatenate([[True], uniq[1:, 0] != uniq[:-1, 0]])
    return uniq[first, 0], uniq[first, 1]


def majority_vote_targets(grid: VoxelGrid, semantic: np.ndarray,
                          instance: np.ndarray) -> VoxelGrid:
    """Fill per-voxel targets by majority vote over the contributing points.

    The semantic winner is the modal label (ties to the lowest id); the
    instance winner is the modal instance id among points carrying the
    winning semantic label (ties to the lowest id).
    """
    if len(semantic) != len(instance):
        raise ShapeMismatchError("semantic/instance label arrays differ in length")
    semantic_target = np.full(grid.spec.shape, EMPTY, dtype=np.int32)
    instance_target = np.zeros(grid.spec.shape, dtype=np.int32)
    m = grid.n_voxels
    if m > 0:
        counts = np.diff(grid.point_start)
        rows = np.repeat(np.arange(m), counts)
        sem = semantic[grid.point_order].astype(np.int64)
        inst = instance[grid.point_order].astype(np.int64)

        groups, win_sem = modal_per_group(rows, sem)
        sem_winner = np.empty(m, dtype=np.int64)
        sem_winner[groups] = win_sem

        keep = sem == sem_winner[rows]
        groups_i, win_inst = modal_per_group(rows[keep], inst[keep])
        inst_winner = np.zeros(m, dtype=np.int64)
        inst_winner[groups_i] = win_inst

        h, w, z = grid.voxel_coords.T
        semantic_target[h, w, z] = sem_winner.astype(np.int32)
        instance_target[h, w, z] = inst_winner.astype(np.int32)
    return replace(grid, semantic_target=semantic_target, instance_target=instance_target)


def voxelize_scene(scene: Scene, spec: GridSpec) -> VoxelGrid:
    """Voxelize and fill majority-vote targets in one step."""
    return majority_vote_targets(voxelize(scene, spec), scene.semantic, scene.instance)


def instance_centroids(grid: VoxelGrid, thing_classes) -> dict[int, np.ndarray]:
    """Mass centroid (mean voxel coordinate, real-valued) per thing instance."""
    sem, inst = grid.targets_at_voxels()
    thing = np.isin(sem, np.asarray(list(thing_classes), dtype=sem.dtype)) & (inst > 0)
    out: dict[int, np.ndarray] = {}
    for iid in np.unique(inst[thing]):
        out[int(iid)] = grid.voxel_coords[thing & (inst == iid)].mean(axis=0)
    return out


def heatmap_values_at(coords: np.ndarray, centroids: np.ndarray,
                      sigma: float) -> np.ndarray:
    """max over centroids of exp(-||v - c||^2 / (2 sigma^2)) at voxel coords."""
    if len(centroids) == 0:
        return np.zeros(len(coords))
    d2 = ((coords[:, None, :].astype(np.float64)
           - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-d2 / (2.0 * sigma**2)).max(axis=1)


def render_center_heatmap(grid: VoxelGrid, sigma: float, thing_classes) -> CenterHeatmap:
    """Dense ground-truth center heatmap; zero when no thing instances exist."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    cents = instance_centroids(grid, thing_classes)
    shape = grid.spec.shape
    if not cents:
        return CenterHeatmap(values=np.zeros(shape), sigma=sigma)
    hh, ww, zz = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]),
                             np.arange(shape[2]), indexing="ij")
    coords = np.column_stack([hh.ravel(), ww.ravel(), zz.ravel()])
    values = heatmap_values_at(coords, np.stack(list(cents.values())), sigma)
    return CenterHeatmap(values=values.reshape(shape), sigma=sigma)


def crop_grid(grid: VoxelGrid, h0: int, h1: int, w0: int, w1: int,
              z0: int, z1: int) -> VoxelGrid:
    """Axis-aligned training window. The crop keeps uniform bin sizes, so the
    radial/height ranges are re-derived; the angular origin is implicit."""
    s = grid.spec
    if not (0 <= h0 < h1 <= s.h and 0 <= w0 < w1 <= s.w and 0 <= z0 < z1 <= s.z):
        raise ValueError("crop window out of grid bounds")
    dr = (s.r_max - s.r_min) / s.h
    dz = (s.z_max - s.z_min) / s.z
    new_spec = GridSpec(h=h1 - h0, w=w1 - w0, z=z1 - z0,
                        r_min=s.r_min + h0 * dr, r_max=s.r_min + h1 * dr,
                        z_min=s.z_min + z0 * dz, z_max=s.z_min + z1 * dz)
    c = grid.voxel_coords
    keep = ((c[:, 0] >= h0) & (c[:, 0] < h1) & (c[:, 1] >= w0) & (c[:, 1] < w1)
            & (c[:, 2] >= z0) & (c[:, 2] < z1))
    kept = np.nonzero(keep)[0]
    counts = np.diff(grid.point_start)
    point_order = np.concatenate([grid.voxel_points(i) for i in kept]) \
        if len(kept) else np.zeros(0, dtype=np.int64)
    point_start = np.concatenate([[0], np.cumsum(counts[kept])]).astype(np.int64)
    dropped = grid.dropped_count + int(counts.sum() - counts[kept].sum())

    sem = grid.semantic_target[h0:h1, w0:w1, z0:z1].copy() \
        if grid.semantic_target is not None else None
    inst = grid.instance_target[h0:h1, w0:w1, z0:z1].copy() \
        if grid.instance_target is not None else None
    return VoxelGrid(
        spec=new_spec,
        occupancy=grid.occupancy[h0:h1, w0:w1, z0:z1].copy(),
        voxel_coords=(c[keep] - np.array([h0, w0, z0], dtype=np.int32)),
        features=grid.features[keep].copy(),
        point_order=point_order,
        point_start=point_start,
        dropped_count=dropped,
        semantic_target=sem,
        instance_target=inst,
    )
