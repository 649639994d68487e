"""Open-set fusion: uncertainty split, prototype association, DBSCAN.

Three sequential steps produce the panoptic prediction:

  1. a voxel is flagged unknown iff u >= max(mu_u + t * sigma_u, u_floor),
     with mu_u / sigma_u the population stats over non-empty voxels;
  2. remaining voxels take the argmax class; thing voxels are grouped by
     highest association score against prototypes extracted at detected
     heatmap centers, and each instance's class is the majority vote of
     its members' argmax classes;
  3. unknown voxels are clustered by DBSCAN on their embeddings into
     unknown instances (cluster noise stays unsegmented).

The unknown decision from step 1 is never overridden by steps 2-3.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import InferConfig
from .errors import (EmptySceneError, FormatError, IoError,
                     ShapeMismatchError)
from .instance_embedding import (InstancePrototype, association_matrix,
                                 extract_prototypes)
from .polar_grid import CenterHeatmap, VoxelGrid, modal_per_group
from .pointcloud_io import Vocabulary

# prediction kinds
STUFF = 0
THING = 1
UNKNOWN_INSTANCE = 2
UNKNOWN_NOISE = 3

DBSCAN_NOISE = -1

PREDICTION_MAGIC = b"OPANPRED"
PREDICTION_VERSION = 1


@dataclass(frozen=True)
class ThresholdConfig:
    t: float = 3.0
    u_floor: float = 0.5

    def __post_init__(self):
        if self.t < 0 or self.u_floor < 0:
            raise ValueError("t and u_floor must be nonnegative")


@dataclass
class PanopticPrediction:
    """Per non-empty voxel assignment plus the uncertainty used to split."""

    voxel_coords: np.ndarray   # (M, 3) int32
    kind: np.ndarray           # (M,) uint8 in {STUFF, THING, UNKNOWN_*, }
    class_id: np.ndarray       # (M,) int32, -1 for unknown kinds
    instance_id: np.ndarray    # (M,) int32, 0 when not an instance member
    uncertainty: np.ndarray    # (M,) float64
    grid_shape: tuple

    def __len__(self) -> int:
        return len(self.kind)


def split_unknown(uncertainties: np.ndarray, cfg: ThresholdConfig) -> np.ndarray:
    """Adaptive unknown mask: u >= max(mu + t * sigma, u_floor)."""
    u = np.asarray(uncertainties, dtype=np.float64)
    if u.size == 0:
        raise EmptySceneError("no non-empty voxels to threshold")
    threshold = max(float(u.mean() + cfg.t * u.std()), cfg.u_floor)
    return u >= threshold


def detect_centers(heatmap, min_score: float, top_k: int) -> np.ndarray:
    """Strict 3x3x3 local maxima, value >= min_score, best-first, <= top_k.

    Neighborhoods are truncated at grid boundaries and do not wrap in the
    angular dimension. Ties are broken by lexicographic voxel coordinate.
    """
    if not 0 < min_score < 1:
        raise ValueError("min_score must lie in (0, 1)")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    values = heatmap.values if isinstance(heatmap, CenterHeatmap) else np.asarray(heatmap)
    padded = np.full(tuple(s + 2 for s in values.shape), -np.inf)
    padded[1:-1, 1:-1, 1:-1] = values
    strict = np.ones(values.shape, dtype=bool)
    for dh in (-1, 0, 1):
        for dw in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dh == dw == dz == 0:
                    continue
                shifted = padded[1 + dh:1 + dh + values.shape[0],
                                 1 + dw:1 + dw + values.shape[1],
                                 1 + dz:1 + dz + values.shape[2]]
                strict &= values > shifted
    strict &= values >= min_score
    coords = np.argwhere(strict)
    if len(coords) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    vals = values[coords[:, 0], coords[:, 1], coords[:, 2]]
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0], -vals))
    return coords[order[:top_k]]


def suppress_centers(centers: np.ndarray, radius: float) -> np.ndarray:
    """Greedy non-maximum suppression of detected centers.

    ``centers`` arrive best-first from detect_centers; a candidate within
    Euclidean voxel distance ``radius`` of an already kept center is
    dropped (0 disables). Plateau-like predicted heatmaps otherwise yield
    several maxima per object, fragmenting it into duplicate instances.
    """
    if radius <= 0 or len(centers) == 0:
        return centers
    kept = [centers[0]]
    for cand in centers[1:]:
        d2 = ((np.asarray(kept, dtype=np.float64) - cand) ** 2).sum(axis=1)
        if (d2 >= radius * radius).all():
            kept.append(cand)
    return np.asarray(kept, dtype=centers.dtype)


def assign_known_instances(phi: np.ndarray, protos: list[InstancePrototype],
                           thing_mask: np.ndarray, argmax_class: np.ndarray,
                           fallback: str = "per_class") -> np.ndarray:
    """Assign masked voxels to the highest-scoring prototype (1-based ids).

    Ties go to the lowest prototype index. With no prototypes, the
    fallback forms one instance per semantic class ("per_class") or
    leaves the voxels unsegmented ("drop", instance 0).
    """
    ids = np.zeros(len(phi), dtype=np.int32)
    rows = np.nonzero(thing_mask)[0]
    if len(rows) == 0:
        return ids
    if protos:
        scores = association_matrix(phi[rows], protos)
        ids[rows] = scores.argmax(axis=1).astype(np.int32) + 1
    elif fallback == "per_class":
        classes = np.unique(argmax_class[rows])
        for next_id, cls in enumerate(np.sort(classes), start=1):
            ids[rows[argmax_class[rows] == cls]] = next_id
    elif fallback != "drop":
        raise ValueError(f"unknown fallback mode {fallback!r}")
    return ids


def dissolve_small_instances(instance_ids: np.ndarray, phi: np.ndarray,
                             protos: list[InstancePrototype],
                             thing_mask: np.ndarray, min_voxels: int) -> np.ndarray:
    """Reassign members of sub-threshold instances to surviving prototypes.

    Stray boundary voxels (typically unknown-object rims that slip under
    the uncertainty threshold) otherwise become tiny spurious instances.
    0 disables; with no surviving instance the ids are left untouched.
    """
    if min_voxels <= 0 or not protos:
        return instance_ids
    ids, counts = np.unique(instance_ids[instance_ids > 0], return_counts=True)
    survivors = set(ids[counts >= min_voxels].tolist())
    if not survivors or len(survivors) == len(ids):
        return instance_ids
    out = instance_ids.copy()
    keep_idx = sorted(i - 1 for i in survivors)  # prototype index = id - 1
    small = thing_mask & (instance_ids > 0) \
        & ~np.isin(instance_ids, np.array(sorted(survivors)))
    rows = np.nonzero(small)[0]
    scores = association_matrix(phi[rows], [protos[i] for i in keep_idx])
    out[rows] = np.array(keep_idx, dtype=np.int32)[scores.argmax(axis=1)] + 1
    return out


def vote_instance_semantics(instance_ids: np.ndarray, argmax_class: np.ndarray,
                            mask: np.ndarray) -> dict[int, int]:
    """Per instance, the modal member argmax class (ties to lowest index)."""
    rows = np.nonzero(mask & (instance_ids > 0))[0]
    if len(rows) == 0:
        return {}
    groups, winners = modal_per_group(instance_ids[rows].astype(np.int64),
                                      argmax_class[rows].astype(np.int64))
    return {int(g): int(w) for g, w in zip(groups, winners)}


def _neighbor_lists(points: np.ndarray, eps: float) -> list[np.ndarray]:
    """Indices within Euclidean distance eps (inclusive), including self."""
    n = len(points)
    sq = (points**2).sum(axis=1)
    out: list[np.ndarray] = []
    chunk = max(1, min(n, 4_000_000 // max(n, 1)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * points[start:stop] @ points.T
        np.maximum(d2, 0.0, out=d2)
        near = d2 <= eps * eps
        out.extend(np.nonzero(row)[0] for row in near)
    return out


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Plain DBSCAN; returns cluster labels, DBSCAN_NOISE for noise.

    A core point has >= min_pts neighbors within eps (inclusive, counting
    itself). Clusters grow breadth-first from the lowest-index unvisited
    core point, so labels are deterministic and order-stable.
    """
    points = np.asarray(points, dtype=np.float64)
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be positive and min_pts >= 1")
    n = len(points)
    labels = np.full(n, DBSCAN_NOISE, dtype=np.int64)
    if n == 0:
        return labels
    neighbors = _neighbor_lists(points, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    cluster = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != DBSCAN_NOISE:
            continue
        labels[seed] = cluster
        queue = [seed]
        while queue:
            p = queue.pop(0)
            for q in neighbors[p]:
                if labels[q] == DBSCAN_NOISE:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(q)
        cluster += 1
    return labels


def _voxel_centers_m(grid: VoxelGrid, rows: np.ndarray) -> np.ndarray:
    """Cartesian centers (meters) of the given non-empty voxel rows."""
    s = grid.spec
    c = grid.voxel_coords[rows].astype(np.float64)
    r = s.r_min + (c[:, 0] + 0.5) * (s.r_max - s.r_min) / s.h
    th = -np.pi + (c[:, 1] + 0.5) * 2.0 * np.pi / s.w
    z = s.z_min + (c[:, 2] + 0.5) * (s.z_max - s.z_min) / s.z
    return np.column_stack([r * np.cos(th), r * np.sin(th), z])


def fuse(class_scores: np.ndarray, uncertainty: np.ndarray, phi: np.ndarray,
         sigma_sq: np.ndarray, center_scores: np.ndarray, grid: VoxelGrid,
         vocab: Vocabulary, cfg: InferConfig) -> PanopticPrediction:
    """Three-step open-set fusion over a grid's non-empty voxels.

    ``class_scores`` may be Dirichlet alphas or softmax logits; only the
    per-voxel argmax is consumed.
    """
    m = grid.n_voxels
    if not (len(class_scores) == len(uncertainty) == len(phi)
            == len(sigma_sq) == len(center_scores) == m):
        raise ShapeMismatchError(
            f"per-voxel inputs must all have length {m} (grid non-empty voxels)"
        )
    u = np.asarray(uncertainty, dtype=np.float64)
    unknown_mask = split_unknown(u, ThresholdConfig(t=cfg.t, u_floor=cfg.u_floor))

    cls = np.asarray(class_scores).argmax(axis=1).astype(np.int32)
    stuff_set = np.asarray(vocab.stuff_class_indices, dtype=np.int32)
    known_mask = ~unknown_mask
    stuff_mask = known_mask & np.isin(cls, stuff_set)
    thing_mask = known_mask & ~np.isin(cls, stuff_set)

    dense = np.zeros(grid.spec.shape)
    hh, ww, zz = grid.voxel_coords.T
    dense[hh, ww, zz] = center_scores
    centers = detect_centers(dense, cfg.center_min_score, cfg.center_top_k)
    if len(centers):
        # step-1 precedence: a center may only seed a known thing instance
        row_of = {tuple(c): i for i, c in enumerate(grid.voxel_coords)}
        keep = np.array([thing_mask[row_of[tuple(c)]] for c in centers], dtype=bool)
        centers = centers[keep]
    centers = suppress_centers(centers, cfg.center_nms_radius)
    protos = extract_prototypes(phi, sigma_sq, grid, centers)

    instance_ids = assign_known_instances(phi, protos, thing_mask, cls,
                                          cfg.no_center_fallback)
    instance_ids = dissolve_small_instances(instance_ids, phi, protos,
                                            thing_mask, cfg.min_instance_voxels)
    votes = vote_instance_semantics(instance_ids, cls, thing_mask)

    kind = np.full(m, STUFF, dtype=np.uint8)
    class_id = cls.copy()
    out_instance = np.zeros(m, dtype=np.int32)

    thing_rows = np.nonzero(thing_mask)[0]
    segmented = thing_rows[instance_ids[thing_rows] > 0]
    kind[segmented] = THING
    for row in segmented:
        iid = int(instance_ids[row])
        out_instance[row] = iid
        class_id[row] = votes[iid]

    unknown_rows = np.nonzero(unknown_mask)[0]
    next_id = int(out_instance.max()) + 1 if len(out_instance) else 1
    if len(unknown_rows):
        x = phi[unknown_rows]
        if cfg.dbscan_use_xyz:
            x = np.concatenate([x, _voxel_centers_m(grid, unknown_rows)], axis=1)
        labels = dbscan(x, cfg.dbscan_eps, cfg.dbscan_min_pts)
        noise = labels == DBSCAN_NOISE
        kind[unknown_rows[noise]] = UNKNOWN_NOISE
        kind[unknown_rows[~noise]] = UNKNOWN_INSTANCE
        out_instance[unknown_rows[~noise]] = labels[~noise].astype(np.int32) + next_id
        class_id[unknown_rows] = -1

    return PanopticPrediction(
        voxel_coords=grid.voxel_coords.copy(),
        kind=kind,
        class_id=class_id,
        instance_id=out_instance,
        uncertainty=u.copy(),
        grid_shape=grid.spec.shape,
    )


def write_prediction(pred: PanopticPrediction, path: str, fmt: str = "binary") -> None:
    """One record per non-empty voxel: h w z kind class instance uncertainty."""
    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(PREDICTION_MAGIC)
            fh.write(struct.pack("<IQIII", PREDICTION_VERSION, len(pred),
                                 *pred.grid_shape))
            rec = np.empty((len(pred), 7), dtype="<f8")
            rec[:, 0:3] = pred.voxel_coords
            rec[:, 3] = pred.kind
            rec[:, 4] = pred.class_id
            rec[:, 5] = pred.instance_id
            rec[:, 6] = pred.uncertainty
            fh.write(rec.tobytes())
    elif fmt == "text":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# grid %d %d %d\n" % pred.grid_shape)
            fh.write("# h w z kind class instance uncertainty\n")
            for i in range(len(pred)):
                fh.write("%d %d %d %d %d %d %s\n" % (
                    *pred.voxel_coords[i], pred.kind[i], pred.class_id[i],
                    pred.instance_id[i], repr(float(pred.uncertainty[i]))))
    else:
        raise ValueError(f"unknown prediction format {fmt!r}")


def read_prediction(path: str) -> PanopticPrediction:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read prediction: {exc}") from exc
    if blob[:len(PREDICTION_MAGIC)] == PREDICTION_MAGIC:
        off = len(PREDICTION_MAGIC)
        version, count, gh, gw, gz = struct.unpack("<IQIII", blob[off:off + 24])
        if version != PREDICTION_VERSION:
            raise FormatError(f"unsupported prediction version {version}")
        rec = np.frombuffer(blob[off + 24:], dtype="<f8")
        if rec.size != count * 7:
            raise FormatError("prediction payload truncated")
        rec = rec.reshape(count, 7)
        return PanopticPrediction(
            voxel_coords=rec[:, 0:3].astype(np.int32),
            kind=rec[:, 3].astype(np.uint8),
            class_id=rec[:, 4].astype(np.int32),
            instance_id=rec[:, 5].astype(np.int32),
            uncertainty=rec[:, 6].copy(),
            grid_shape=(gh, gw, gz),
        )
    # text format
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("unrecognized prediction file") from exc
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# grid"):
        raise FormatError("text prediction missing grid header")
    gh, gw, gz = (int(v) for v in lines[0].split()[2:5])
    rows = [ln.split() for ln in lines if ln and not ln.startswith("#")]
    arr = np.array([[float(v) for v in row] for row in rows]) \
        if rows else np.zeros((0, 7))
    return PanopticPrediction(
        voxel_coords=arr[:, 0:3].astype(np.int32),
        kind=arr[:, 3].astype(np.uint8),
        class_id=arr[:, 4].astype(np.int32),
        instance_id=arr[:, 5].astype(np.int32),
        uncertainty=arr[:, 6].copy() if len(arr) else np.zeros(0),
        grid_shape=(gh, gw, gz),
    )
