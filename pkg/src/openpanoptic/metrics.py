"""Open-set panoptic evaluation: PQ / SQ / RQ for known classes, plus
UQ / Recall / SQ for the class-agnostic unknown class.

Matching follows the standard panoptic protocol: segments of the same
class match when IoU > 0.5, which makes the matching unique. Known
classes score

    PQ = sum_TP IoU / (TP + FP/2 + FN/2),  SQ = mean TP IoU,
    RQ = TP / (TP + FP/2 + FN/2),

so PQ = SQ * RQ. The unknown class drops the FP term (an incomplete
unknown vocabulary makes unknown false positives ill-defined):

    UQ = sum_TP IoU / (TP + FN) = Recall * SQ,  Recall = TP / (TP + FN).

Ground-truth IGNORE elements are excluded before segments are formed.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySceneError, ShapeMismatchError
from .inference import STUFF, THING, UNKNOWN_INSTANCE, UNKNOWN_NOISE, PanopticPrediction
from .pointcloud_io import IGNORE, UNKNOWN, Vocabulary
from .polar_grid import VoxelGrid

UNSEGMENTED = -1  # pred instance marker: element belongs to no predicted segment


@dataclass(frozen=True)
class SegmentMatch:
    pred_segment: int
    gt_segment: int
    intersection: int
    union: int

    @property
    def iou(self) -> float:
        return self.intersection / self.union


def match_segments(pred_class: np.ndarray, pred_inst: np.ndarray,
                   gt_class: np.ndarray, gt_inst: np.ndarray, class_id: int):
    """IoU > 0.5 matching for one class.

    Elements are aligned arrays (IGNORE ground truth already excluded).
    Predicted elements with instance == UNSEGMENTED belong to no segment.
    Returns (matches, fp_segment_ids, fn_segment_ids).
    """
    if not (len(pred_class) == len(pred_inst) == len(gt_class) == len(gt_inst)):
        raise ShapeMismatchError("element arrays must be aligned")
    pred_sel = (pred_class == class_id) & (pred_inst != UNSEGMENTED)
    gt_sel = gt_class == class_id
    pred_sizes = Counter(pred_inst[pred_sel].tolist())
    gt_sizes = Counter(gt_inst[gt_sel].tolist())
    both = pred_sel & gt_sel
    inter = Counter(zip(pred_inst[both].tolist(), gt_inst[both].tolist()))

    matches = []
    matched_pred, matched_gt = set(), set()
    for (p, g), i in sorted(inter.items()):
        union = pred_sizes[p] + gt_sizes[g] - i
        if i / union > 0.5:
            matches.append(SegmentMatch(p, g, i, union))
            matched_pred.add(p)
            matched_gt.add(g)
    fp = sorted(set(pred_sizes) - matched_pred)
    fn = sorted(set(gt_sizes) - matched_gt)
    return matches, fp, fn


def panoptic_quality(matches, fp, fn) -> tuple[float, float, float]:
    """(PQ, SQ, RQ); zeros when the class has no TP, FP or FN."""
    tp = len(matches)
    n_fp = len(fp) if hasattr(fp, "__len__") else int(fp)
    n_fn = len(fn) if hasattr(fn, "__len__") else int(fn)
    denom = tp + 0.5 * n_fp + 0.5 * n_fn
    if denom == 0:
        return 0.0, 0.0, 0.0
    iou_sum = sum(m.iou for m in matches)
    sq = iou_sum / tp if tp else 0.0
    rq = tp / denom
    return iou_sum / denom, sq, rq


def unknown_quality(matches, fn) -> tuple[float, float, float]:
    """(UQ, Recall, SQ) for the class-agnostic unknown class."""
    tp = len(matches)
    n_fn = len(fn) if hasattr(fn, "__len__") else int(fn)
    iou_sum = sum(m.iou for m in matches)
    denom = tp + n_fn
    uq = iou_sum / denom if denom else 0.0
    recall = tp / denom if denom else 0.0
    sq = iou_sum / tp if tp else 0.0
    return uq, recall, sq


@dataclass
class ClassStats:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add_match_result(self, matches, fp, fn) -> None:
        self.iou_sum += sum(m.iou for m in matches)
        self.tp += len(matches)
        self.fp += len(fp)
        self.fn += len(fn)

    @property
    def present(self) -> bool:
        return (self.tp + self.fp + self.fn) > 0

    def pq_sq_rq(self) -> tuple[float, float, float]:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return 0.0, 0.0, 0.0
        sq = self.iou_sum / self.tp if self.tp else 0.0
        return self.iou_sum / denom, sq, self.tp / denom


@dataclass
class MetricReport:
    per_class: dict
    pq: float
    pq_things: float
    pq_stuff: float
    uq: float
    unknown_recall: float
    unknown_sq: float
    unknown_stats: ClassStats

    def to_dict(self) -> dict:
        return {
            "known": {
                "PQ": self.pq,
                "PQ_Th": self.pq_things,
                "PQ_St": self.pq_stuff,
            },
            "unknown": {
                "UQ": self.uq,
                "Recall": self.unknown_recall,
                "SQ": self.unknown_sq,
                "TP": self.unknown_stats.tp,
                "FN": self.unknown_stats.fn,
                "FP": self.unknown_stats.fp,
            },
            "per_class": {
                str(c): {
                    "PQ": v["pq"], "SQ": v["sq"], "RQ": v["rq"],
                    "TP": v["tp"], "FP": v["fp"], "FN": v["fn"],
                }
                for c, v in sorted(self.per_class.items())
            },
        }


def prediction_elements(pred: PanopticPrediction) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel (class, instance) element arrays for matching.

    Unknown kinds map to class UNKNOWN (-1); noise voxels are
    UNSEGMENTED. Stuff-kind voxels form one class-wide segment
    (instance 0).
    """
    cls = pred.class_id.astype(np.int64).copy()
    inst = pred.instance_id.astype(np.int64).copy()
    inst[pred.kind == STUFF] = 0
    cls[(pred.kind == UNKNOWN_INSTANCE) | (pred.kind == UNKNOWN_NOISE)] = UNKNOWN
    inst[pred.kind == UNKNOWN_NOISE] = UNSEGMENTED
    return cls, inst


class MetricAccumulator:
    """Dataset-level TP/FP/FN/IoU accumulation across scenes."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.known = {c: ClassStats() for c in range(vocab.K)}
        self.unknown = ClassStats()

    def update_elements(self, pred_class, pred_inst, gt_class, gt_inst) -> None:
        keep = gt_class != IGNORE
        pc, pi = pred_class[keep], pred_inst[keep]
        gc, gi = gt_class[keep], gt_inst[keep]
        gi = gi.copy()
        stuff = np.isin(gc, np.asarray(self.vocab.stuff_class_indices, dtype=gc.dtype))
        gi[stuff] = 0  # one stuff segment per class per scene
        for c in range(self.vocab.K):
            self.known[c].add_match_result(*match_segments(pc, pi, gc, gi, c))
        self.unknown.add_match_result(*match_segments(pc, pi, gc, gi, UNKNOWN))

    def update(self, pred: PanopticPrediction, grid: VoxelGrid) -> None:
        """Voxel-level update from a prediction and a gt-labeled grid."""
        if grid.n_voxels == 0:
            raise EmptySceneError("ground-truth grid has no non-empty voxels")
        if pred.grid_shape != grid.spec.shape or len(pred) != grid.n_voxels:
            raise ShapeMismatchError("prediction and ground truth grids differ")
        if not np.array_equal(pred.voxel_coords, grid.voxel_coords):
            raise ShapeMismatchError("prediction voxels are not aligned with gt")
        gt_sem, gt_inst = grid.targets_at_voxels()
        pc, pi = prediction_elements(pred)
        self.update_elements(pc, pi, gt_sem.astype(np.int64),
                             gt_inst.astype(np.int64))

    def update_points(self, pred: PanopticPrediction, grid: VoxelGrid,
                      semantic: np.ndarray, instance: np.ndarray) -> None:
        """Point-level update: voxel predictions back-projected to points."""
        if grid.n_voxels == 0:
            raise EmptySceneError("ground-truth grid has no non-empty voxels")
        if not np.array_equal(pred.voxel_coords, grid.voxel_coords):
            raise ShapeMismatchError("prediction voxels are not aligned with gt")
        pc, pi = prediction_elements(pred)
        counts = np.diff(grid.point_start)
        rows = np.repeat(np.arange(grid.n_voxels), counts)
        point_ids = grid.point_order
        self.update_elements(
            pc[rows], pi[rows],
            semantic[point_ids].astype(np.int64),
            instance[point_ids].astype(np.int64),
        )

    def report(self) -> MetricReport:
        per_class = {}
        for c, st in self.known.items():
            pq, sq, rq = st.pq_sq_rq()
            per_class[c] = {"pq": pq, "sq": sq, "rq": rq, "tp": st.tp,
                            "fp": st.fp, "fn": st.fn, "present": st.present}

        def mean_pq(classes):
            vals = [per_class[c]["pq"] for c in classes if per_class[c]["present"]]
            return float(np.mean(vals)) if vals else 0.0

        denom = self.unknown.tp + self.unknown.fn
        uq = self.unknown.iou_sum / denom if denom else 0.0
        recall = self.unknown.tp / denom if denom else 0.0
        sq = self.unknown.iou_sum / self.unknown.tp if self.unknown.tp else 0.0
        return MetricReport(
            per_class=per_class,
            pq=mean_pq(range(self.vocab.K)),
            pq_things=mean_pq(self.vocab.thing_class_indices),
            pq_stuff=mean_pq(self.vocab.stuff_class_indices),
            uq=uq,
            unknown_recall=recall,
            unknown_sq=sq,
            unknown_stats=self.unknown,
        )


def evaluate(pred: PanopticPrediction, grid: VoxelGrid,
             vocab: Vocabulary) -> MetricReport:
    """Single-scene voxel-level evaluation."""
    acc = MetricAccumulator(vocab)
    acc.update(pred, grid)
    return acc.report()
