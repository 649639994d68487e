"""A small per-voxel network with hand-derived backprop and Adam.

Architecture (per non-empty voxel, no spatial receptive field):

    features (D_in) -> affine 64 -> ReLU -> affine 64 -> ReLU
        -> semantic head  : affine 64 -> K logits (alpha via softplus)
        -> embedding head : affine 64 -> F + 1 (F dims + variance channel)
        -> center head    : affine 64 -> 1, logistic output

It stands in for a learned backbone so the full loss stack trains
end-to-end at desk scale. All math is float64 numpy; training is
bit-deterministic given the seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import evidential as ev
from . import instance_embedding as emb
from .config import RunConfig
from .errors import ConfigError, FormatError, IoError, ShapeMismatchError
from .pointcloud_io import UNKNOWN, Scene, Vocabulary
from .polar_grid import GridSpec, VoxelGrid, heatmap_values_at, voxelize_scene

HIDDEN = 64
CHECKPOINT_MAGIC = b"OPANHEAD"
CHECKPOINT_VERSION = 1
_MODES = {"dirichlet": 0, "softmax": 1}
_MODE_NAMES = {v: k for k, v in _MODES.items()}


@dataclass
class HeadParams:
    d_in: int
    k: int
    f: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_sem: np.ndarray
    b_sem: np.ndarray
    w_emb: np.ndarray
    b_emb: np.ndarray
    w_cen: np.ndarray
    b_cen: np.ndarray

    def names(self) -> list[str]:
        return ["w1", "b1", "w2", "b2", "w_sem", "b_sem", "w_emb", "b_emb",
                "w_cen", "b_cen"]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.names()}

    def copy(self) -> "HeadParams":
        return replace(self, **{n: a.copy() for n, a in self.arrays().items()})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.arrays()[n].ravel() for n in self.names()])

    def from_vector(self, vec: np.ndarray) -> "HeadParams":
        out = {}
        pos = 0
        for n, a in self.arrays().items():
            out[n] = vec[pos:pos + a.size].reshape(a.shape).copy()
            pos += a.size
        if pos != len(vec):
            raise ShapeMismatchError("parameter vector has wrong length")
        return replace(self, **out)


def init_params(seed: int, d_in: int, k: int, f: int) -> HeadParams:
    """Glorot-uniform weights (seeded), zero biases."""
    rng = np.random.default_rng([seed, 0])

    def glorot(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, (fan_in, fan_out))

    return HeadParams(
        d_in=d_in, k=k, f=f,
        w1=glorot(d_in, HIDDEN), b1=np.zeros(HIDDEN),
        w2=glorot(HIDDEN, HIDDEN), b2=np.zeros(HIDDEN),
        w_sem=glorot(HIDDEN, k), b_sem=np.zeros(k),
        w_emb=glorot(HIDDEN, f + 1), b_emb=np.zeros(f + 1),
        w_cen=glorot(HIDDEN, 1), b_cen=np.zeros(1),
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray
    sem_logits: np.ndarray    # (M, K)
    emb_raw: np.ndarray       # (M, F + 1)
    cen_pre: np.ndarray       # (M,)
    alpha: np.ndarray         # (M, K)
    uncertainty: np.ndarray   # (M,) Dirichlet u = K / sum(alpha)
    phi: np.ndarray           # (M, F)
    sigma_sq: np.ndarray      # (M,)
    center_score: np.ndarray  # (M,)


def forward(params: HeadParams, features: np.ndarray) -> ForwardCache:
    """Run the head on per-voxel features (rows = non-empty voxels)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ShapeMismatchError(
            f"features must be (M, {params.d_in}), got {x.shape}"
        )
    pre1 = x @ params.w1 + params.b1
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ params.w2 + params.b2
    h2 = np.maximum(pre2, 0.0)
    sem = h2 @ params.w_sem + params.b_sem
    emb_raw = h2 @ params.w_emb + params.b_emb
    cen = (h2 @ params.w_cen)[:, 0] + params.b_cen[0]
    alpha = ev.softplus(sem)
    return ForwardCache(
        x=x, pre1=pre1, h1=h1, pre2=pre2, h2=h2,
        sem_logits=sem, emb_raw=emb_raw, cen_pre=cen,
        alpha=alpha,
        uncertainty=ev.uncertainty_from_alpha(alpha) if params.k else np.zeros(len(x)),
        phi=emb_raw[:, :params.f],
        sigma_sq=ev.softplus(emb_raw[:, params.f]),
        center_score=ev.sigmoid(cen),
    )


def backward(params: HeadParams, cache: ForwardCache, d_sem: np.ndarray,
             d_emb: np.ndarray, d_cen_pre: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients given head-space (pre-activation) gradients."""
    g = {}
    h2, h1, x = cache.h2, cache.h1, cache.x
    g["w_sem"] = h2.T @ d_sem
    g["b_sem"] = d_sem.sum(axis=0)
    g["w_emb"] = h2.T @ d_emb
    g["b_emb"] = d_emb.sum(axis=0)
    g["w_cen"] = (h2.T @ d_cen_pre)[:, None]
    g["b_cen"] = np.array([d_cen_pre.sum()])
    gh2 = d_sem @ params.w_sem.T + d_emb @ params.w_emb.T \
        + d_cen_pre[:, None] @ params.w_cen.T
    gpre2 = gh2 * (cache.pre2 > 0)
    g["w2"] = h1.T @ gpre2
    g["b2"] = gpre2.sum(axis=0)
    gh1 = gpre2 @ params.w2.T
    gpre1 = gh1 * (cache.pre1 > 0)
    g["w1"] = x.T @ gpre1
    g["b1"] = gpre1.sum(axis=0)
    return g


@dataclass
class SceneBatch:
    """Per-scene constants precomputed once before training."""
    scene_id: str
    grid: VoxelGrid
    features: np.ndarray        # (M, D_in)
    y: np.ndarray               # (M,) semantic target (contiguous / sentinels)
    known_mask: np.ndarray      # (M,) bool, target in [0, K)
    unknown_mask: np.ndarray    # (M,) bool, target == UNKNOWN
    center_target: np.ndarray   # (M,) gt heatmap at non-empty voxels
    members: list               # list of row-index arrays, one per instance
    center_rows: np.ndarray     # (N_inst,) prototype row per instance


def build_scene_batch(scene: Scene, vocab: Vocabulary, grid_spec: GridSpec,
                      heatmap_sigma: float,
                      include_unknown_instances: bool = True) -> SceneBatch:
    """Voxelize a remapped scene and precompute all training targets."""
    grid = voxelize_scene(scene, grid_spec)
    sem, inst = (grid.targets_at_voxels() if grid.n_voxels
                 else (np.zeros(0, np.int32), np.zeros(0, np.int32)))
    k = vocab.K
    known = (sem >= 0) & (sem < k)
    unknown = sem == UNKNOWN

    thing = np.isin(sem, np.asarray(vocab.thing_class_indices, dtype=sem.dtype))
    inst_mask = thing & (inst > 0)
    if include_unknown_instances:
        inst_mask |= unknown & (inst > 0)

    members, center_rows, thing_centroids = [], [], []
    for iid in np.unique(inst[inst_mask]):
        rows = np.nonzero(inst_mask & (inst == iid))[0]
        members.append(rows)
        coords = grid.voxel_coords[rows].astype(np.float64)
        centroid = coords.mean(axis=0)
        nearest = rows[np.argmin(((coords - centroid) ** 2).sum(axis=1))]
        center_rows.append(nearest)
        if thing[rows[0]]:
            thing_centroids.append(centroid)

    center_target = heatmap_values_at(
        grid.voxel_coords,
        np.stack(thing_centroids) if thing_centroids else np.zeros((0, 3)),
        heatmap_sigma,
    )
    return SceneBatch(
        scene_id=scene.scene_id,
        grid=grid,
        features=grid.features,
        y=sem.astype(np.int64),
        known_mask=known,
        unknown_mask=unknown,
        center_target=center_target,
        members=members,
        center_rows=np.asarray(center_rows, dtype=np.int64),
    )


@dataclass
class LossSettings:
    """Loss weights and per-step constants for one backward pass."""
    w_seg: float = 1.0
    w_center: float = 200.0
    w_uniform: float = 0.1
    w_adaptive: float = 0.1
    w_contrastive: float = 0.7
    w_embed: float = 1.0
    var_reg_weight: float = 0.01
    push_margin: float = 1.5
    delta_margin: float = 0.1
    embedding_weights: tuple = emb.DEFAULT_EMBEDDING_WEIGHTS
    epoch_weight: float = 1.0
    sigma_floor: float = 1e-6
    semantic_mode: str = "dirichlet"
    seg_class_balance: bool = False
    pairs: tuple | None = None          # (known_rows, unknown_rows), absolute
    frozen_sigma: float | None = None   # fixes sigma_known (finite differences)


@dataclass
class LossBreakdown:
    seg: float = 0.0
    center: float = 0.0
    uniform: float = 0.0
    adaptive: float = 0.0
    contrastive: float = 0.0
    pull: float = 0.0
    push: float = 0.0
    proto: float = 0.0
    embed: float = 0.0
    var_reg: float = 0.0
    total: float = 0.0
    mu_known: float | None = None
    mu_unknown: float | None = None
    delta_u: float | None = None


def scene_uncertainty(cache: ForwardCache, mode: str) -> np.ndarray:
    if mode == "softmax":
        return ev.softmax_entropy_uncertainty(cache.sem_logits)
    return cache.uncertainty


def compute_scene_loss(params: HeadParams, batch: SceneBatch, s: LossSettings,
                       want_grads: bool = True):
    """Total weighted loss (and parameter gradients) on one scene batch.

    Known voxels feed the segmentation loss, UNKNOWN voxels the uniform
    evidence loss; IGNORE and EMPTY voxels contribute to nothing. The
    adaptive and contrastive terms are skipped when either mask is empty.
    """
    cache = forward(params, batch.features)
    m = len(batch.features)
    bd = LossBreakdown()
    d_sem = np.zeros_like(cache.sem_logits)
    d_alpha = np.zeros_like(cache.alpha)
    d_u = np.zeros(m)

    known_rows = np.nonzero(batch.known_mask)[0]
    unknown_rows = np.nonzero(batch.unknown_mask)[0]
    dirichlet = s.semantic_mode == "dirichlet"
    u = scene_uncertainty(cache, s.semantic_mode)

    if len(known_rows):
        yk = batch.y[known_rows]
        if s.seg_class_balance:
            # weighted mean: rare classes carry the same total weight as
            # dominant ones (ground outnumbers posts ~250:1 here)
            _, inverse, counts = np.unique(yk, return_inverse=True,
                                           return_counts=True)
            weights = 1.0 / (len(counts) * counts[inverse])
        else:
            weights = np.full(len(known_rows), 1.0 / len(known_rows))
        if dirichlet:
            losses, grads = ev.seg_loss_batch(cache.alpha[known_rows], yk)
            bd.seg = float(losses @ weights)
            d_alpha[known_rows] += s.w_seg * grads * weights[:, None]
        else:
            losses, grads = ev.cross_entropy_loss_batch(
                cache.sem_logits[known_rows], yk)
            bd.seg = float(losses @ weights)
            d_sem[known_rows] += s.w_seg * grads * weights[:, None]

    if dirichlet and len(unknown_rows):
        losses, grads = ev.uniform_evidence_loss_batch(cache.alpha[unknown_rows])
        bd.uniform = float(losses.mean())
        d_alpha[unknown_rows] += s.w_uniform * grads / len(unknown_rows)

    if len(known_rows) and len(unknown_rows):
        stats = ev.batch_uncertainty_stats(u, batch.known_mask, batch.unknown_mask)
        if s.frozen_sigma is not None:
            stats = replace(stats, sigma_known=s.frozen_sigma)
        bd.mu_known, bd.mu_unknown = stats.mu_known, stats.mu_unknown
        bd.delta_u = stats.delta_u
        if dirichlet:
            bd.adaptive, g_known, g_unknown = ev.adaptive_separation_loss(
                stats, s.epoch_weight, s.sigma_floor)
            d_u[known_rows] += s.w_adaptive * g_known
            d_u[unknown_rows] += s.w_adaptive * g_unknown
            if s.pairs is not None and len(s.pairs[0]):
                pk, pu = s.pairs
                bd.contrastive, gk, gu = ev.contrastive_uncertainty_loss(
                    u[pk], u[pu], s.delta_margin)
                np.add.at(d_u, pk, s.w_contrastive * gk)
                np.add.at(d_u, pu, s.w_contrastive * gu)

    if dirichlet:
        d_alpha += d_u[:, None] * ev.d_uncertainty_d_alpha(cache.alpha)
        d_sem += d_alpha * ev.sigmoid(cache.sem_logits)

    sc = cache.center_score
    diff = sc - batch.center_target
    bd.center = float((diff**2).mean()) if m else 0.0
    d_score = s.w_center * 2.0 * diff / max(m, 1)
    d_cen_pre = d_score * sc * (1.0 - sc)

    d_phi = np.zeros_like(cache.phi)
    d_sigma = np.zeros(m)
    if batch.members:
        mus = cache.phi[batch.center_rows]
        sig = cache.sigma_sq[batch.center_rows]
        bd.pull, dphi_p, dmus_p = emb.pull_loss(cache.phi, batch.members, mus)
        bd.push, dmus_q = emb.push_loss(mus, s.push_margin)
        bd.proto, dphi_r, dmus_r = emb.prototype_loss(cache.phi, batch.members, mus)
        bd.var_reg, dphi_v, dmus_v, dsig_v = emb.variance_alignment_loss(
            cache.phi, batch.members, mus, sig)
        lp, lq, lr = s.embedding_weights
        bd.embed = emb.embedding_loss(bd.pull, bd.push, bd.proto, s.embedding_weights)
        d_phi += s.w_embed * (lp * dphi_p + lr * dphi_r) + s.var_reg_weight * dphi_v
        d_mus = s.w_embed * (lp * dmus_p + lq * dmus_q + lr * dmus_r) \
            + s.var_reg_weight * dmus_v
        np.add.at(d_phi, batch.center_rows, d_mus)
        np.add.at(d_sigma, batch.center_rows, s.var_reg_weight * dsig_v)

    bd.total = (s.w_seg * bd.seg + s.w_center * bd.center
                + s.w_uniform * bd.uniform + s.w_adaptive * bd.adaptive
                + s.w_contrastive * bd.contrastive + s.w_embed * bd.embed
                + s.var_reg_weight * bd.var_reg)
    if not want_grads:
        return bd, None

    d_var_pre = d_sigma * ev.sigmoid(cache.emb_raw[:, params.f])
    d_emb_raw = np.concatenate([d_phi, d_var_pre[:, None]], axis=1)
    grads = backward(params, cache, d_sem, d_emb_raw, d_cen_pre)
    return bd, grads


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def init(cls, params: HeadParams) -> "AdamState":
        return cls(m={n: np.zeros_like(a) for n, a in params.arrays().items()},
                   v={n: np.zeros_like(a) for n, a in params.arrays().items()})


def adam_step(params: HeadParams, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> HeadParams:
    state.t += 1
    out = {}
    for n, a in params.arrays().items():
        g = grads[n]
        state.m[n] = beta1 * state.m[n] + (1 - beta1) * g
        state.v[n] = beta2 * state.v[n] + (1 - beta2) * g * g
        mhat = state.m[n] / (1 - beta1**state.t)
        vhat = state.v[n] / (1 - beta2**state.t)
        out[n] = a - lr * mhat / (np.sqrt(vhat) + eps)
    return replace(params, **out)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_scenes: int = 1
    learning_rate: float = 0.01
    lr_decay_epochs: list = field(default_factory=lambda: [45, 55])
    lr_decay_factor: float = 10.0
    seed: int = 7
    w_seg: float = 1.0
    w_center: float = 200.0
    w_uniform: float = 0.1
    w_adaptive: float = 0.1
    w_contrastive: float = 0.7
    w_embed: float = 1.0
    seg_class_balance: bool = True
    semantic_mode: str = "dirichlet"
    pairs_per_batch: int = 256
    warmup_epochs: int = 10
    sigma_floor: float = 1e-6
    delta_margin: float = 0.1
    push_margin: float = 1.5
    var_reg_weight: float = 0.01
    include_unknown_instances: bool = True
    embed_dim: int = 32
    heatmap_sigma: float = 2.0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_scenes < 1:
            raise ConfigError("epochs must be >= 0 and batch_scenes >= 1")
        if self.learning_rate <= 0 or self.lr_decay_factor <= 0:
            raise ConfigError("learning rate and decay factor must be positive")
        for name in ("w_seg", "w_center", "w_uniform", "w_adaptive",
                     "w_contrastive", "w_embed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")
        if self.semantic_mode not in _MODES:
            raise ConfigError(f"unknown semantic_mode {self.semantic_mode!r}")


def train_config_from_run(cfg: RunConfig) -> TrainConfig:
    t, lo, e = cfg.train, cfg.loss, cfg.embed
    return TrainConfig(
        epochs=t.epochs, batch_scenes=t.batch_scenes,
        learning_rate=t.learning_rate,
        lr_decay_epochs=list(t.lr_decay_epochs),
        lr_decay_factor=t.lr_decay_factor, seed=cfg.seed,
        w_seg=t.w_seg, w_center=t.w_center, w_uniform=t.w_uniform,
        w_adaptive=t.w_adaptive, w_contrastive=t.w_contrastive,
        w_embed=t.w_embed, seg_class_balance=t.seg_class_balance,
        semantic_mode=t.semantic_mode,
        pairs_per_batch=lo.pairs_per_batch, warmup_epochs=lo.warmup_epochs,
        sigma_floor=lo.sigma_floor, delta_margin=lo.delta_margin,
        push_margin=e.push_margin, var_reg_weight=e.var_reg_weight,
        include_unknown_instances=e.include_unknown_instances,
        embed_dim=e.dim, heatmap_sigma=cfg.heatmap.sigma_voxels,
    )


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for mstone in cfg.lr_decay_epochs if epoch > mstone)
    return cfg.learning_rate / (cfg.lr_decay_factor ** drops)


def train(scenes: list[Scene], vocab: Vocabulary, grid_spec: GridSpec,
          cfg: TrainConfig) -> tuple[HeadParams, list[dict]]:
    """Train the head on remapped scenes; deterministic given cfg.seed.

    Returns the final parameters and one log record per epoch with every
    loss component, the learning rate, and the batch uncertainty stats.
    """
    cfg.validate()
    from .polar_grid import FEATURE_DIM
    params = init_params(cfg.seed, FEATURE_DIM, vocab.K, cfg.embed_dim)
    if cfg.epochs == 0 or not scenes:
        return params, []

    batches = [build_scene_batch(sc, vocab, grid_spec, cfg.heatmap_sigma,
                                 cfg.include_unknown_instances)
               for sc in scenes]
    state = AdamState.init(params)
    log: list[dict] = []

    for epoch in range(1, cfg.epochs + 1):
        lr = _epoch_lr(cfg, epoch)
        epoch_bd: list[LossBreakdown] = []
        for chunk_start in range(0, len(batches), cfg.batch_scenes):
            chunk = batches[chunk_start:chunk_start + cfg.batch_scenes]
            acc: dict[str, np.ndarray] = {}
            for offset, batch in enumerate(chunk):
                si = chunk_start + offset
                pair_rng = np.random.default_rng([cfg.seed, 1, epoch, si])
                pairs = None
                k_rows = np.nonzero(batch.known_mask)[0]
                u_rows = np.nonzero(batch.unknown_mask)[0]
                if len(k_rows) and len(u_rows) and cfg.pairs_per_batch > 0:
                    pairs = ev.sample_pairs(pair_rng, k_rows, u_rows,
                                            cfg.pairs_per_batch)
                settings = LossSettings(
                    w_seg=cfg.w_seg, w_center=cfg.w_center,
                    w_uniform=cfg.w_uniform, w_adaptive=cfg.w_adaptive,
                    w_contrastive=cfg.w_contrastive, w_embed=cfg.w_embed,
                    var_reg_weight=cfg.var_reg_weight,
                    push_margin=cfg.push_margin, delta_margin=cfg.delta_margin,
                    epoch_weight=ev.warmup_weight(epoch, cfg.warmup_epochs),
                    sigma_floor=cfg.sigma_floor,
                    semantic_mode=cfg.semantic_mode,
                    seg_class_balance=cfg.seg_class_balance, pairs=pairs,
                )
                bd, grads = compute_scene_loss(params, batch, settings)
                epoch_bd.append(bd)
                for n, g in grads.items():
                    acc[n] = acc.get(n, 0.0) + g / len(chunk)
            params = adam_step(params, acc, state, lr)
        log.append(_epoch_record(epoch, lr, epoch_bd))
    return params, log


def _epoch_record(epoch: int, lr: float, bds: list[LossBreakdown]) -> dict:
    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    rec = {"epoch": epoch, "lr": lr}
    for name in ("total", "seg", "center", "uniform", "adaptive",
                 "contrastive", "embed", "var_reg"):
        rec[f"loss_{name}"] = mean([getattr(b, name) for b in bds])
    rec["mu_known"] = mean([b.mu_known for b in bds])
    rec["mu_unknown"] = mean([b.mu_unknown for b in bds])
    rec["delta_u"] = mean([b.delta_u for b in bds])
    return rec


def save_checkpoint(params: HeadParams, path: str,
                    semantic_mode: str = "dirichlet") -> None:
    """Write the versioned binary checkpoint (header + float64 LE tensors)."""
    header = CHECKPOINT_MAGIC + struct.pack(
        "<IIIII", CHECKPOINT_VERSION, params.d_in, params.k, params.f,
        _MODES[semantic_mode])
    with open(path, "wb") as fh:
        fh.write(header)
        for name in params.names():
            fh.write(params.arrays()[name].astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[HeadParams, str]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint: {exc}") from exc
    hdr = len(CHECKPOINT_MAGIC) + 20
    if len(blob) < hdr or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not a head checkpoint (bad magic)")
    version, d_in, k, f, mode = struct.unpack("<IIIII", blob[len(CHECKPOINT_MAGIC):hdr])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if mode not in _MODE_NAMES:
        raise FormatError(f"unknown semantic mode tag {mode}")
    template = init_params(0, d_in, k, f)
    expected = template.to_vector().size
    payload = np.frombuffer(blob[hdr:], dtype="<f8")
    if payload.size != expected:
        raise FormatError(
            f"checkpoint payload has {payload.size} values, expected {expected}"
        )
    return template.from_vector(payload.astype(np.float64)), _MODE_NAMES[mode]
