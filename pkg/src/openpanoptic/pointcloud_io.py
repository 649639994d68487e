"""Point-cloud data model, SemanticKITTI-format binary I/O, label remapping.

File layout (SemanticKITTI convention):
  * point file: consecutive 16-byte records, four IEEE-754 float32
    little-endian values per point (x, y, z, intensity);
  * label file: consecutive uint32 little-endian words, low 16 bits the
    semantic id and high 16 bits the instance id.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, IoError

# Semantic-target sentinels. Known classes occupy the contiguous range
# [0, K); raw class ids in a Vocabulary must stay clear of that range so
# remapping is idempotent.
UNKNOWN = -1
IGNORE = -2
EMPTY = -3

POINT_RECORD_BYTES = 16
LABEL_RECORD_BYTES = 4


@dataclass(frozen=True)
class Point:
    """A single LiDAR return in the sensor frame (meters, intensity in [0,1])."""

    x: float
    y: float
    z: float
    intensity: float


@dataclass(frozen=True)
class PointLabel:
    semantic_id: int
    instance_id: int


@dataclass(frozen=True)
class Vocabulary:
    """Class-id split into stuff / thing / unknown-at-train / unknown-at-eval.

    Known classes are remapped to a contiguous range: stuff ids (sorted)
    first, then thing ids (sorted). K counts the known classes only.
    """

    stuff_ids: frozenset
    thing_ids: frozenset
    unknown_train_ids: frozenset
    unknown_eval_ids: frozenset

    def __post_init__(self):
        stuff = frozenset(int(i) for i in self.stuff_ids)
        thing = frozenset(int(i) for i in self.thing_ids)
        utrain = frozenset(int(i) for i in self.unknown_train_ids)
        ueval = frozenset(int(i) for i in self.unknown_eval_ids)
        object.__setattr__(self, "stuff_ids", stuff)
        object.__setattr__(self, "thing_ids", thing)
        object.__setattr__(self, "unknown_train_ids", utrain)
        object.__setattr__(self, "unknown_eval_ids", ueval)
        if stuff & thing or stuff & utrain or thing & utrain:
            raise ValueError("stuff, thing and unknown_train id sets must be disjoint")
        k = len(stuff) + len(thing)
        bad = [i for i in stuff | thing | utrain | ueval if 0 <= i < k]
        if bad:
            raise ValueError(
                f"raw class ids {sorted(bad)} collide with the contiguous known "
                f"range [0, {k}); pick raw ids >= K"
            )

    @property
    def K(self) -> int:
        return len(self.stuff_ids) + len(self.thing_ids)

    def known_mapping(self) -> dict[int, int]:
        """raw id -> contiguous known index (stuff sorted, then thing sorted)."""
        ordered = sorted(self.stuff_ids) + sorted(self.thing_ids)
        return {raw: idx for idx, raw in enumerate(ordered)}

    @property
    def stuff_class_indices(self) -> tuple[int, ...]:
        return tuple(range(len(self.stuff_ids)))

    @property
    def thing_class_indices(self) -> tuple[int, ...]:
        return tuple(range(len(self.stuff_ids), self.K))


def make_vocabulary(stuff_ids, thing_ids, unknown_train_ids, unknown_eval_ids) -> Vocabulary:
    return Vocabulary(
        stuff_ids=frozenset(stuff_ids),
        thing_ids=frozenset(thing_ids),
        unknown_train_ids=frozenset(unknown_train_ids),
        unknown_eval_ids=frozenset(unknown_eval_ids),
    )


@dataclass
class Scene:
    """A labeled point cloud.

    Coordinates are float64 internally; files store float32.
    ``semantic`` / ``instance`` run parallel to the rows of ``xyz``.
    """

    xyz: np.ndarray          # (N, 3) float64
    intensity: np.ndarray    # (N,) float64
    semantic: np.ndarray     # (N,) int32
    instance: np.ndarray     # (N,) int32
    scene_id: str = ""

    def __post_init__(self):
        n = len(self.xyz)
        if not (len(self.intensity) == len(self.semantic) == len(self.instance) == n):
            raise FormatError("scene arrays must have equal length")

    def __len__(self) -> int:
        return len(self.xyz)

    def point(self, i: int) -> Point:
        return Point(*(float(v) for v in self.xyz[i]), float(self.intensity[i]))

    def label(self, i: int) -> PointLabel:
        return PointLabel(int(self.semantic[i]), int(self.instance[i]))


def read_kitti_scene(bin_path: str, label_path: str, scene_id: str = "") -> Scene:
    """Read a point/label file pair in SemanticKITTI binary format."""
    for path in (bin_path, label_path):
        if not os.path.isfile(path):
            raise IoError(f"missing file: {path}")
    raw = np.fromfile(bin_path, dtype=np.uint8)
    if raw.size % POINT_RECORD_BYTES != 0:
        raise IoError(
            f"truncated point file {bin_path}: {raw.size} bytes is not a "
            f"multiple of {POINT_RECORD_BYTES}"
        )
    raw_labels = np.fromfile(label_path, dtype=np.uint8)
    if raw_labels.size % LABEL_RECORD_BYTES != 0:
        raise IoError(
            f"truncated label file {label_path}: {raw_labels.size} bytes is "
            f"not a multiple of {LABEL_RECORD_BYTES}"
        )
    pts = raw.view("<f4").reshape(-1, 4)
    words = raw_labels.view("<u4")
    if len(pts) != len(words):
        raise FormatError(
            f"point/label count mismatch: {len(pts)} points vs {len(words)} labels"
        )
    return Scene(
        xyz=pts[:, :3].astype(np.float64),
        intensity=pts[:, 3].astype(np.float64),
        semantic=(words & 0xFFFF).astype(np.int32),
        instance=(words >> 16).astype(np.int32),
        scene_id=scene_id or os.path.splitext(os.path.basename(bin_path))[0],
    )


def write_kitti_scene(scene: Scene, bin_path: str, label_path: str) -> None:
    """Write a scene as a SemanticKITTI point/label file pair."""
    sem = scene.semantic.astype(np.int64)
    inst = scene.instance.astype(np.int64)
    if ((sem < 0) | (sem > 0xFFFF)).any() or ((inst < 0) | (inst > 0xFFFF)).any():
        raise FormatError("semantic/instance ids must fit in 16 bits to be written")
    pts = np.empty((len(scene), 4), dtype="<f4")
    pts[:, :3] = scene.xyz
    pts[:, 3] = scene.intensity
    words = ((inst.astype(np.uint32) << 16) | sem.astype(np.uint32)).astype("<u4")
    pts.tofile(bin_path)
    words.tofile(label_path)


def remap_labels(scene: Scene, vocab: Vocabulary, mode: str = "train") -> Scene:
    """Collapse raw semantic ids onto contiguous knowns / UNKNOWN / IGNORE.

    ``mode`` picks which unknown id set maps to the UNKNOWN sentinel:
    "train" uses ``unknown_train_ids``, "eval" uses ``unknown_eval_ids``
    (the other set falls through to IGNORE). Already-contiguous ids and
    sentinels map to themselves, so the operation is idempotent.
    Instance ids are preserved.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    mapping = vocab.known_mapping()
    unknown_set = vocab.unknown_train_ids if mode == "train" else vocab.unknown_eval_ids
    k = vocab.K

    sem = scene.semantic
    out = np.full(len(sem), IGNORE, dtype=np.int32)
    already = (sem >= 0) & (sem < k)
    out[already] = sem[already]
    out[sem == UNKNOWN] = UNKNOWN
    for raw, idx in mapping.items():
        out[sem == raw] = idx
    for raw in unknown_set:
        out[sem == raw] = UNKNOWN
    return replace(scene, semantic=out, instance=scene.instance.copy())
