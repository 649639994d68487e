"""Embedding-space instance math: prototype association, discriminative
(pull/push) and prototype-alignment losses, center-heatmap regression.

A prototype summarizes one instance as the embedding mu at its center
voxel and a positive scalar variance sigma^2. Association between a
voxel embedding phi and prototype c is the variance-scaled kernel

    S(v, c) = exp(-||phi - mu_c||^2 / (2 sigma_c^2))  in (0, 1].

Instance losses (members[i] holds the voxel rows of instance i, mus[i]
its prototype mean):

    pull  = (1 / sum_c |C_c|) sum_c sum_{v in C_c} ||phi_v - mu_c||^2
    push  = (1 / (N (N-1))) sum_{c != c'} max(0, margin - ||mu_c - mu_c'||^2)
    proto = (1 / N) sum_c ||mu_c - mean_{v in C_c} phi_v||^2

combined as pull + push + 0.001 * proto by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (DomainError, EmptyInstanceError, MissingPrototypeError,
                     OutOfBoundsError, ShapeMismatchError)
from .polar_grid import CenterHeatmap, VoxelGrid

# lambda_pull, lambda_push, lambda_proto
DEFAULT_EMBEDDING_WEIGHTS = (1.0, 1.0, 0.001)


@dataclass
class InstancePrototype:
    mu: np.ndarray           # (F,)
    sigma_sq: float          # > 0
    center_voxel: tuple      # (h, w, z)

    def __post_init__(self):
        if self.sigma_sq <= 0:
            raise DomainError("prototype variance must be strictly positive")


def association_score(phi: np.ndarray, proto: InstancePrototype) -> float:
    """exp(-||phi - mu||^2 / (2 sigma^2)); 1 iff phi equals mu."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != proto.mu.shape:
        raise ShapeMismatchError("embedding and prototype dimensions differ")
    d2 = float(((phi - proto.mu) ** 2).sum())
    return float(np.exp(-d2 / (2.0 * proto.sigma_sq)))


def association_matrix(phi: np.ndarray, protos: list[InstancePrototype]) -> np.ndarray:
    """(M, N) association scores between voxel embeddings and prototypes."""
    if not protos:
        return np.zeros((len(phi), 0))
    mus = np.stack([p.mu for p in protos])
    sig = np.array([p.sigma_sq for p in protos])
    d2 = ((phi[:, None, :] - mus[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-d2 / (2.0 * sig[None, :]))


def extract_prototypes(phi: np.ndarray, sigma_sq: np.ndarray, grid: VoxelGrid,
                       centers) -> list[InstancePrototype]:
    """Read (mu, sigma^2) off the embedding arrays at each center voxel.

    ``phi`` and ``sigma_sq`` run over the grid's non-empty voxels.
    Centers at out-of-grid or empty voxels raise OutOfBoundsError;
    duplicates are returned as-is (deduplication is the caller's concern).
    """
    lookup = {tuple(c): i for i, c in enumerate(grid.voxel_coords)}
    protos = []
    for center in centers:
        c = tuple(int(v) for v in center)
        h, w, z = c
        if not (0 <= h < grid.spec.h and 0 <= w < grid.spec.w and 0 <= z < grid.spec.z):
            raise OutOfBoundsError(f"center {c} outside grid {grid.spec.shape}")
        row = lookup.get(c)
        if row is None:
            raise OutOfBoundsError(f"center {c} is an empty voxel (no embedding)")
        protos.append(InstancePrototype(mu=phi[row].copy(),
                                        sigma_sq=float(sigma_sq[row]),
                                        center_voxel=c))
    return protos


def _check_members(members, n_instances: int) -> None:
    if len(members) != n_instances:
        raise MissingPrototypeError(
            f"{len(members)} instances vs {n_instances} prototypes"
        )


def pull_loss(phi: np.ndarray, members: list, mus: np.ndarray):
    """Intra-instance compactness. Returns (loss, d_phi, d_mus)."""
    _check_members(members, len(mus))
    total = sum(len(m) for m in members)
    d_phi = np.zeros_like(phi)
    d_mus = np.zeros_like(mus)
    if total == 0:
        return 0.0, d_phi, d_mus
    loss = 0.0
    for c, rows in enumerate(members):
        if len(rows) == 0:
            continue
        diff = phi[rows] - mus[c]
        loss += float((diff**2).sum())
        d_phi[rows] += 2.0 * diff / total
        d_mus[c] -= 2.0 * diff.sum(axis=0) / total
    return loss / total, d_phi, d_mus


def push_loss(mus: np.ndarray, margin: float):
    """Inter-prototype hinge on squared distance. Returns (loss, d_mus)."""
    n = len(mus)
    d_mus = np.zeros_like(mus)
    if n < 2:
        return 0.0, d_mus
    norm = 1.0 / (n * (n - 1))
    loss = 0.0
    for c in range(n):
        for c2 in range(c + 1, n):
            gap = margin - float(((mus[c] - mus[c2]) ** 2).sum())
            if gap > 0:
                loss += 2.0 * gap * norm  # both ordered pairs
                g = -2.0 * (mus[c] - mus[c2]) * 2.0 * norm
                d_mus[c] += g
                d_mus[c2] -= g
    return loss, d_mus


def prototype_loss(phi: np.ndarray, members: list, mus: np.ndarray):
    """Anchor each prototype to its members' mean embedding."""
    _check_members(members, len(mus))
    n = len(mus)
    d_phi = np.zeros_like(phi)
    d_mus = np.zeros_like(mus)
    if n == 0:
        return 0.0, d_phi, d_mus
    loss = 0.0
    for c, rows in enumerate(members):
        if len(rows) == 0:
            raise EmptyInstanceError(f"instance {c} has no voxels")
        mean = phi[rows].mean(axis=0)
        diff = mus[c] - mean
        loss += float((diff**2).sum())
        d_mus[c] += 2.0 * diff / n
        d_phi[rows] -= 2.0 * diff / (n * len(rows))
    return loss / n, d_phi, d_mus


def embedding_loss(pull: float, push: float, proto: float,
                   weights=DEFAULT_EMBEDDING_WEIGHTS) -> float:
    """Weighted combination; defaults are pull 1, push 1, proto 0.001."""
    w_pull, w_push, w_proto = weights
    return w_pull * pull + w_push * push + w_proto * proto


def variance_alignment_loss(phi: np.ndarray, members: list, mus: np.ndarray,
                            sigma_sq: np.ndarray):
    """Auxiliary regularizer pulling each prototype variance toward its
    instance's mean squared member distance.

    L = (1/N) sum_c (sigma_c^2 - mean_{v in C_c} ||phi_v - mu_c||^2)^2.
    Returns (loss, d_phi, d_mus, d_sigma_sq); all paths carry gradient.
    """
    _check_members(members, len(mus))
    n = len(mus)
    d_phi = np.zeros_like(phi)
    d_mus = np.zeros_like(mus)
    d_sig = np.zeros_like(sigma_sq)
    if n == 0:
        return 0.0, d_phi, d_mus, d_sig
    loss = 0.0
    for c, rows in enumerate(members):
        if len(rows) == 0:
            raise EmptyInstanceError(f"instance {c} has no voxels")
        diff = phi[rows] - mus[c]
        mean_d2 = float((diff**2).sum() / len(rows))
        resid = sigma_sq[c] - mean_d2
        loss += resid**2
        d_sig[c] += 2.0 * resid / n
        # d mean_d2 / d phi_v = 2 (phi_v - mu_c) / |C_c|, and the negation for mu
        scale = -2.0 * resid / n
        d_phi[rows] += scale * 2.0 * diff / len(rows)
        d_mus[c] -= scale * 2.0 * diff.sum(axis=0) / len(rows)
    return loss / n, d_phi, d_mus, d_sig


def _values(hm) -> np.ndarray:
    return hm.values if isinstance(hm, CenterHeatmap) else np.asarray(hm, dtype=np.float64)


def center_loss(predicted, target, mask: np.ndarray | None = None):
    """Mean squared error between predicted and target heatmaps.

    With a boolean mask, the mean runs over masked voxels only (used at
    training time where the head emits scores only at non-empty voxels).
    Returns (loss, gradient w.r.t. the predicted values).
    """
    pred = _values(predicted)
    tgt = _values(target)
    if pred.shape != tgt.shape:
        raise ShapeMismatchError(f"heatmap shapes differ: {pred.shape} vs {tgt.shape}")
    if mask is not None:
        if mask.shape != pred.shape:
            raise ShapeMismatchError("mask shape differs from heatmap shape")
        n = int(np.count_nonzero(mask))
        if n == 0:
            return 0.0, np.zeros_like(pred)
        diff = np.where(mask, pred - tgt, 0.0)
    else:
        n = pred.size
        diff = pred - tgt
    return float((diff**2).sum() / n), 2.0 * diff / n
