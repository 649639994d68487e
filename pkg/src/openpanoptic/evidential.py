"""Dirichlet evidential head math with closed-form gradients.

Per voxel the semantic head emits K logits x_k; concentration parameters
are alpha_k = softplus(x_k) > 0, evidence is e_k = alpha_k - 1, and the
scalar uncertainty is

    u = K / sum_k alpha_k,

which grows as total evidence shrinks and equals 1 at zero evidence
(alpha = 1). Losses:

  * segmentation (known voxels):   psi(sum alpha) - psi(alpha_y)
  * uniform evidence (unknowns):   ||alpha - 1||^2
  * adaptive separation (batch):   w * exp(-(mu_unk - mu_known) / sigma_known)
  * contrastive (sampled pairs):   mean -log sigmoid(u_unk - u_known - delta)

The adaptive loss treats sigma_known as a per-step constant: gradients
flow only through the two means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, polygamma

from .errors import DomainError, EmptyMaskError, NumericalError


@dataclass
class EvidentialOutput:
    alpha: np.ndarray        # (..., K) strictly positive
    uncertainty: np.ndarray  # (...,) = K / sum(alpha)


@dataclass
class UncertaintyBatchStats:
    mu_known: float
    mu_unknown: float
    sigma_known: float
    delta_u: float
    n_known: int
    n_unknown: int


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def uncertainty_from_alpha(alpha: np.ndarray) -> np.ndarray:
    return alpha.shape[-1] / alpha.sum(axis=-1)


def d_uncertainty_d_alpha(alpha: np.ndarray) -> np.ndarray:
    """du/dalpha_k = -K / S^2, identical across k."""
    k = alpha.shape[-1]
    s = alpha.sum(axis=-1, keepdims=True)
    return np.broadcast_to(-k / s**2, alpha.shape)


def alpha_from_logits(logits: np.ndarray) -> EvidentialOutput:
    """alpha = softplus(logits), overflow-safe; u = K / sum(alpha)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise NumericalError("logits must be finite")
    alpha = softplus(logits)
    return EvidentialOutput(alpha=alpha, uncertainty=uncertainty_from_alpha(alpha))


def _check_alpha(alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if (alpha <= 0).any():
        raise DomainError("alpha must be strictly positive")
    return alpha


def seg_loss(alpha: np.ndarray, y: int) -> tuple[float, np.ndarray]:
    """Negative expected log-likelihood of class y under Dir(alpha).

    Returns (psi(S) - psi(alpha_y), gradient) with
    dL/dalpha_k = psi'(S) - [k == y] psi'(alpha_y).
    """
    alpha = _check_alpha(alpha)
    if not 0 <= y < alpha.shape[-1]:
        raise DomainError(f"class index {y} out of range")
    s = alpha.sum()
    loss = float(digamma(s) - digamma(alpha[y]))
    grad = np.full_like(alpha, polygamma(1, s))
    grad[y] -= polygamma(1, alpha[y])
    return loss, grad


def seg_loss_batch(alpha: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized seg_loss over rows: (losses (M,), gradients (M, K))."""
    alpha = _check_alpha(alpha)
    y = np.asarray(y)
    s = alpha.sum(axis=1)
    rows = np.arange(len(alpha))
    losses = digamma(s) - digamma(alpha[rows, y])
    grads = np.repeat(polygamma(1, s)[:, None], alpha.shape[1], axis=1)
    grads[rows, y] -= polygamma(1, alpha[rows, y])
    return losses, grads


def uniform_evidence_loss(alpha: np.ndarray) -> tuple[float, np.ndarray]:
    """||alpha - 1||^2 with gradient 2 (alpha - 1); flat-Dirichlet target."""
    alpha = np.asarray(alpha, dtype=np.float64)
    diff = alpha - 1.0
    return float((diff**2).sum()), 2.0 * diff


def uniform_evidence_loss_batch(alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = np.asarray(alpha, dtype=np.float64) - 1.0
    return (diff**2).sum(axis=1), 2.0 * diff


def batch_uncertainty_stats(u: np.ndarray, mask_known: np.ndarray,
                            mask_unknown: np.ndarray) -> UncertaintyBatchStats:
    """Population mean/std over the known mask, mean over the unknown mask."""
    u = np.asarray(u, dtype=np.float64)
    n_known = int(np.count_nonzero(mask_known))
    n_unknown = int(np.count_nonzero(mask_unknown))
    if n_known == 0 or n_unknown == 0:
        raise EmptyMaskError(
            f"need both known and unknown voxels (got {n_known} known, "
            f"{n_unknown} unknown)"
        )
    uk = u[mask_known]
    mu_known = float(uk.mean())
    mu_unknown = float(u[mask_unknown].mean())
    return UncertaintyBatchStats(
        mu_known=mu_known,
        mu_unknown=mu_unknown,
        sigma_known=float(uk.std()),
        delta_u=mu_unknown - mu_known,
        n_known=n_known,
        n_unknown=n_unknown,
    )


def adaptive_separation_loss(stats: UncertaintyBatchStats, epoch_weight: float,
                             sigma_floor: float = 1e-6) -> tuple[float, float, float]:
    """w * exp(-delta_u / sigma_known), sigma clamped below at sigma_floor.

    Returns (loss, g_known, g_unknown): every known voxel's uncertainty
    receives gradient g_known and every unknown voxel's g_unknown
    (gradients flow through the two means; sigma_known is a constant).
    """
    sigma = max(stats.sigma_known, sigma_floor)
    loss = epoch_weight * float(np.exp(-stats.delta_u / sigma))
    # dL/d mu_unknown = -loss / sigma, dL/d mu_known = +loss / sigma
    g_unknown = -loss / sigma / stats.n_unknown
    g_known = loss / sigma / stats.n_known
    return loss, g_known, g_unknown


def contrastive_uncertainty_loss(u_known: np.ndarray, u_unknown: np.ndarray,
                                 delta: float) -> tuple[float, np.ndarray, np.ndarray]:
    """mean_p -log sigmoid(u_unknown_p - u_known_p - delta) over sampled pairs.

    Returns (loss, grad wrt u_known values, grad wrt u_unknown values).
    """
    if delta < 0:
        raise DomainError("margin delta must be nonnegative")
    u_known = np.asarray(u_known, dtype=np.float64)
    u_unknown = np.asarray(u_unknown, dtype=np.float64)
    if u_known.shape != u_unknown.shape:
        raise DomainError("pair arrays must have equal shape")
    x = u_unknown - u_known - delta
    losses = np.logaddexp(0.0, -x)          # -log sigmoid(x)
    p = len(x) if x.ndim else 1
    coef = sigmoid(-x) / p                  # (1 - sigmoid(x)) / P
    return float(losses.mean()), coef, -coef


def sample_pairs(rng: np.random.Generator, known_rows: np.ndarray,
                 unknown_rows: np.ndarray, n_pairs: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform (known, unknown) row pairs, with replacement."""
    ki = rng.integers(0, len(known_rows), n_pairs)
    ui = rng.integers(0, len(unknown_rows), n_pairs)
    return known_rows[ki], unknown_rows[ui]


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_entropy_uncertainty(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy of softmax(logits), normalized to [0, 1] by ln K."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise NumericalError("logits must be finite")
    k = logits.shape[-1]
    if k == 1:
        return np.zeros(logits.shape[:-1])
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    p = softmax(logits)
    h = lse - (p * shifted).sum(axis=-1)
    return h / np.log(k)


def cross_entropy_loss_batch(logits: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row -log softmax(logits)[y] and gradient p - onehot(y).

    Softmax baseline for the uncertainty-method ablation.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(logits))
    losses = lse - shifted[rows, y]
    grads = softmax(logits)
    grads[rows, y] -= 1.0
    return losses, grads


def warmup_weight(epoch: int, warmup_epochs: int) -> float:
    """Epoch-based schedule for the adaptive loss: ramps 0 -> 1 linearly."""
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)
