"""Central finite-difference verification of every analytic gradient.

Each registered check draws seeded random inputs, evaluates the
analytic gradient, and compares against central differences with step
1e-5 in float64. Quantities a loss explicitly treats as per-step
constants (the adaptive loss's sigma_known, the sampled contrastive
pairs) are frozen at the base point so the oracle differentiates the
same function the implementation does.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import evidential as ev
from . import instance_embedding as emb
from . import toy_head as th

FD_STEP = 1e-5
TOLERANCE = 1e-4


def finite_difference(f, x0: np.ndarray, coords=None, step: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar f at x0 over the given coordinates."""
    x0 = np.asarray(x0, dtype=np.float64)
    flat = x0.ravel()
    coords = list(range(flat.size)) if coords is None else list(coords)
    grad = np.zeros(len(coords))
    for j, c in enumerate(coords):
        xp = flat.copy()
        xp[c] += step
        xm = flat.copy()
        xm[c] -= step
        grad[j] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2 * step)
    return grad


def max_rel_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    fd = np.asarray(fd, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-4)
    return float((np.abs(analytic - fd) / denom).max())


def _check_seg(rng, n_inputs, perturb=0.0):
    worst = 0.0
    for _ in range(n_inputs):
        k = int(rng.integers(2, 7))
        alpha = rng.uniform(0.2, 5.0, k)
        y = int(rng.integers(0, k))
        _, grad = ev.seg_loss(alpha, y)
        fd = finite_difference(lambda a: ev.seg_loss(a, y)[0], alpha)
        worst = max(worst, max_rel_error(grad + perturb, fd))
    return worst


def _check_uniform(rng, n_inputs, perturb=0.0):
    worst = 0.0
    for _ in range(n_inputs):
        alpha = rng.uniform(0.1, 4.0, int(rng.integers(2, 7)))
        _, grad = ev.uniform_evidence_loss(alpha)
        fd = finite_difference(lambda a: ev.uniform_evidence_loss(a)[0], alpha)
        worst = max(worst, max_rel_error(grad + perturb, fd))
    return worst


def _check_adaptive(rng, n_inputs, perturb=0.0):
    worst = 0.0
    for _ in range(n_inputs):
        nk = int(rng.integers(2, 20))
        nu = int(rng.integers(2, 20))
        u = rng.uniform(0.05, 1.5, nk + nu)
        w = float(rng.uniform(0.1, 1.0))
        mask_k = np.zeros(nk + nu, bool)
        mask_k[:nk] = True
        base = ev.batch_uncertainty_stats(u, mask_k, ~mask_k)
        sigma0 = base.sigma_known  # frozen: per-step constant by contract

        def f(uvec):
            stats = ev.batch_uncertainty_stats(uvec, mask_k, ~mask_k)
            stats = replace(stats, sigma_known=sigma0)
            return ev.adaptive_separation_loss(stats, w)[0]

        _, gk, gu = ev.adaptive_separation_loss(base, w)
        analytic = np.where(mask_k, gk, gu)
        fd = finite_difference(f, u)
        worst = max(worst, max_rel_error(analytic + perturb, fd))
    return worst


def _check_contrastive(rng, n_inputs, perturb=0.0):
    worst = 0.0
    for _ in range(n_inputs):
        p = int(rng.integers(1, 12))
        uk = rng.uniform(0.0, 1.0, p)
        uu = rng.uniform(0.0, 1.5, p)
        delta = float(rng.uniform(0.0, 0.4))
        _, gk, gu = ev.contrastive_uncertainty_loss(uk, uu, delta)

        def f(vec):
            return ev.contrastive_uncertainty_loss(vec[:p], vec[p:], delta)[0]

        fd = finite_difference(f, np.concatenate([uk, uu]))
        worst = max(worst, max_rel_error(np.concatenate([gk, gu]) + perturb, fd))
    return worst


def _random_instances(rng):
    f = int(rng.integers(2, 6))
    n_inst = int(rng.integers(1, 4))
    members, pos = [], 0
    for _ in range(n_inst):
        size = int(rng.integers(1, 5))
        members.append(np.arange(pos, pos + size))
        pos += size
    phi = rng.normal(0.0, 1.0, (pos, f))
    mus = rng.normal(0.0, 1.0, (n_inst, f))
    return phi, members, mus


def _check_pull(rng, n_inputs, perturb=0.0):
    worst = 0.0
    for _ in range(n_inputs):
        phi, members, mus = _random_instances(rng)
        _, dphi, dmus = emb.pull_loss(phi, members, mus)

        def f(vec):
            p = vec[:phi.size].reshape(phi.shape)
            m = vec[phi.size:].reshape(mus.shape)
            return emb.pull_loss(p, members, m)[0]

        fd = finite_difference(f, np.concatenate([phi.ravel(), mus.ravel()]))
        analytic = np.concatenate([dphi.ravel(), dmus.ravel()])
        worst = max(worst, max_rel_error(analytic + perturb, fd))
    return worst


def _check_push(rng, n_inputs, perturb=0.0):
    worst = 0.0
    margin = 1.5
    for _ in range(n_inputs):
        while True:  # stay clear of the hinge kink
            n = int(rng.integers(2, 6))
            mus = rng.normal(0.0, 0.8, (n, int(rng.integers(2, 6))))
            d2 = ((mus[:, None] - mus[None, :]) ** 2).sum(-1)
            off = np.abs(margin - d2[np.triu_indices(n, 1)])
            if off.min() > 1e-3:
                break
        _, dmus = emb.push_loss(mus, margin)
        fd = finite_difference(lambda m: emb.push_loss(m.reshape(mus.shape), margin)[0],
                               mus)
        worst = max(worst, max_rel_error(dmus.ravel() + perturb, fd))
    return worst


def _check_proto(rng, n_inputs, perturb=0.0):
    worst = 0.0
    for _ in range(n_inputs):
        phi, members, mus = _random_instances(rng)
        _, dphi, dmus = emb.prototype_loss(phi, members, mus)

        def f(vec):
            p = vec[:phi.size].reshape(phi.shape)
            m = vec[phi.size:].reshape(mus.shape)
            return emb.prototype_loss(p, members, m)[0]

        fd = finite_difference(f, np.concatenate([phi.ravel(), mus.ravel()]))
        analytic = np.concatenate([dphi.ravel(), dmus.ravel()])
        worst = max(worst, max_rel_error(analytic + perturb, fd))
    return worst


def _check_variance_reg(rng, n_inputs, perturb=0.0):
    worst = 0.0
    for _ in range(n_inputs):
        phi, members, mus = _random_instances(rng)
        sig = rng.uniform(0.2, 2.0, len(mus))
        _, dphi, dmus, dsig = emb.variance_alignment_loss(phi, members, mus, sig)

        def f(vec):
            p = vec[:phi.size].reshape(phi.shape)
            m = vec[phi.size:phi.size + mus.size].reshape(mus.shape)
            s = vec[phi.size + mus.size:]
            return emb.variance_alignment_loss(p, members, m, s)[0]

        fd = finite_difference(f, np.concatenate([phi.ravel(), mus.ravel(), sig]))
        analytic = np.concatenate([dphi.ravel(), dmus.ravel(), dsig])
        worst = max(worst, max_rel_error(analytic + perturb, fd))
    return worst


def _check_center(rng, n_inputs, perturb=0.0):
    worst = 0.0
    for _ in range(n_inputs):
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 4)))
        pred = rng.uniform(0.0, 1.0, shape)
        tgt = rng.uniform(0.0, 1.0, shape)
        _, grad = emb.center_loss(pred, tgt)
        fd = finite_difference(lambda p: emb.center_loss(p, tgt)[0], pred)
        worst = max(worst, max_rel_error(grad.ravel() + perturb, fd))
    return worst


def _check_cross_entropy(rng, n_inputs, perturb=0.0):
    worst = 0.0
    for _ in range(n_inputs):
        k = int(rng.integers(2, 6))
        logits = rng.normal(0.0, 2.0, (1, k))
        y = np.array([int(rng.integers(0, k))])
        losses, grads = ev.cross_entropy_loss_batch(logits, y)
        fd = finite_difference(
            lambda l: float(ev.cross_entropy_loss_batch(l.reshape(1, k), y)[0][0]),
            logits)
        worst = max(worst, max_rel_error(grads.ravel() + perturb, fd))
    return worst


def _random_head_batch(rng):
    """A tiny SceneBatch + params with pre-activations clear of ReLU kinks."""
    k, f, d_in = 3, 4, 5
    while True:
        m = int(rng.integers(14, 26))
        feats = rng.normal(0.0, 1.0, (m, d_in))
        y = rng.integers(0, k, m)
        unknown = np.zeros(m, bool)
        unknown[rng.choice(m, size=max(2, m // 4), replace=False)] = True
        known = ~unknown
        if known.sum() < 4:
            continue
        yfull = np.where(unknown, -1, y).astype(np.int64)
        inst_rows = np.nonzero(known)[0][:6]
        members = [inst_rows[:3], inst_rows[3:6]]
        center_rows = np.array([members[0][0], members[1][0]])
        batch = th.SceneBatch(
            scene_id="gradcheck", grid=None, features=feats, y=yfull,
            known_mask=known, unknown_mask=unknown,
            center_target=rng.uniform(0.0, 1.0, m),
            members=members, center_rows=center_rows,
        )
        params = th.init_params(int(rng.integers(0, 2**31)), d_in, k, f)
        cache = th.forward(params, feats)
        margin_ok = (np.abs(cache.pre1).min() > 50 * FD_STEP
                     and np.abs(cache.pre2).min() > 50 * FD_STEP)
        if margin_ok:
            return batch, params


def _head_settings(rng, batch):
    k_rows = np.nonzero(batch.known_mask)[0]
    u_rows = np.nonzero(batch.unknown_mask)[0]
    pairs = ev.sample_pairs(rng, k_rows, u_rows, 16)
    return th.LossSettings(
        w_seg=1.0, w_center=2.0, w_uniform=0.5, w_adaptive=0.5,
        w_contrastive=0.7, w_embed=1.0, var_reg_weight=0.05,
        push_margin=1.5, delta_margin=0.1, epoch_weight=0.8,
        pairs=pairs,
    )


def _check_toy_head(rng, n_inputs, perturb=0.0, coords_per_input=24):
    """End-to-end parameter gradients on micro-batches, sampled coordinates."""
    worst = 0.0
    for _ in range(n_inputs):
        batch, params = _random_head_batch(rng)
        settings = _head_settings(rng, batch)
        cache = th.forward(params, batch.features)
        u = th.scene_uncertainty(cache, "dirichlet")
        base = ev.batch_uncertainty_stats(u, batch.known_mask, batch.unknown_mask)
        settings = replace(settings, frozen_sigma=base.sigma_known)
        _, grads = th.compute_scene_loss(params, batch, settings)
        gvec = np.concatenate([grads[n].ravel() for n in params.names()])
        vec0 = params.to_vector()
        if coords_per_input is None:
            coords = list(range(vec0.size))
        else:
            coords = sorted(rng.choice(vec0.size, coords_per_input, replace=False))

        def f(v):
            bd, _ = th.compute_scene_loss(params.from_vector(v), batch,
                                          settings, want_grads=False)
            return bd.total

        fd = finite_difference(f, vec0, coords=coords)
        worst = max(worst, max_rel_error(gvec[coords] + perturb, fd))
    return worst


def check_toy_head_full(seed: int = 0, n_inputs: int = 1) -> float:
    """All-coordinate end-to-end check (slower; used by the test suite)."""
    rng = np.random.default_rng([seed, 99])
    return _check_toy_head(rng, n_inputs, coords_per_input=None)


CHECKS = {
    "seg_loss": _check_seg,
    "uniform_evidence_loss": _check_uniform,
    "adaptive_separation_loss": _check_adaptive,
    "contrastive_uncertainty_loss": _check_contrastive,
    "pull_loss": _check_pull,
    "push_loss": _check_push,
    "prototype_loss": _check_proto,
    "variance_alignment_loss": _check_variance_reg,
    "center_loss": _check_center,
    "cross_entropy_loss": _check_cross_entropy,
    "toy_head_backprop": _check_toy_head,
}


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


def run_all(seed: int = 7, n_inputs: int = 100,
            corrupt: str | None = None) -> list[CheckResult]:
    """Run every registered check; ``corrupt`` biases one analytic gradient
    (negative control for the harness itself)."""
    results = []
    for index, (name, fn) in enumerate(CHECKS.items()):
        rng = np.random.default_rng([seed, index])
        perturb = 1e-3 if corrupt == name else 0.0
        err = fn(rng, n_inputs, perturb=perturb)
        results.append(CheckResult(name=name, max_rel_err=err,
                                   passed=err < TOLERANCE))
    return results
