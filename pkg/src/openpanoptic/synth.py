"""Seeded synthetic desk-scale scenes with known and unknown objects.

Scenes contain a ground disc and wall segments (stuff), box and post
shapes (known things), and sphere / cylinder shapes (unknown objects).
Spheres and cylinders use disjoint raw ids so a vocabulary can hold out
one geometry family for training and the other for evaluation.

Generation is bit-deterministic given (seed, spec): all draws come from
one ``numpy.random.Generator`` in a fixed documented order (counts,
then placements, then per-object surface points).
"""

from __future__ import annotations

import numpy as np

from .config import SynthConfig
from .errors import SpecError
from .pointcloud_io import Scene

RAW_GROUND = 40
RAW_WALL = 52
RAW_BOX = 10
RAW_POST = 18
RAW_SPHERE = 80
RAW_CYLINDER = 81

# Reflectivity bands per surface kind; unknown geometries share a band so
# uncertainty learned on one family transfers to the held-out one.
INTENSITY_BANDS = {
    RAW_GROUND: (0.05, 0.18),
    RAW_WALL: (0.22, 0.34),
    RAW_POST: (0.36, 0.46),
    RAW_BOX: (0.48, 0.58),
    RAW_SPHERE: (0.78, 0.98),
    RAW_CYLINDER: (0.78, 0.98),
}
_INTENSITY_JITTER = 0.02

_UNKNOWN_RAW = {"sphere": RAW_SPHERE, "cylinder": RAW_CYLINDER}


def validate_spec(spec: SynthConfig) -> None:
    if spec.ground_density <= 0 or spec.wall_density <= 0 or spec.object_density <= 0:
        raise SpecError("point densities must be positive")
    if spec.noise_sigma_m < 0:
        raise SpecError("noise sigma must be nonnegative")
    if not (0 <= spec.ground_hole_m < spec.ground_radius_m):
        raise SpecError("ground hole must be nonnegative and smaller than the radius")
    ranges = [
        ("walls", spec.walls_min, spec.walls_max),
        ("boxes", spec.boxes_min, spec.boxes_max),
        ("posts", spec.posts_min, spec.posts_max),
        ("unknowns", spec.unknowns_min, spec.unknowns_max),
    ]
    for name, lo, hi in ranges:
        if lo < 0 or hi < lo:
            raise SpecError(f"invalid count range for {name}: [{lo}, {hi}]")
    extents = [
        ("wall length", spec.wall_length_min_m, spec.wall_length_max_m),
        ("wall height", spec.wall_height_min_m, spec.wall_height_max_m),
        ("box side", spec.box_side_min_m, spec.box_side_max_m),
        ("box height", spec.box_height_min_m, spec.box_height_max_m),
        ("post side", spec.post_side_min_m, spec.post_side_max_m),
        ("post height", spec.post_height_min_m, spec.post_height_max_m),
        ("sphere radius", spec.sphere_radius_min_m, spec.sphere_radius_max_m),
        ("cylinder radius", spec.cylinder_radius_min_m, spec.cylinder_radius_max_m),
        ("cylinder height", spec.cylinder_height_min_m, spec.cylinder_height_max_m),
    ]
    for name, lo, hi in extents:
        if lo <= 0 or hi < lo:
            raise SpecError(f"degenerate extent range for {name}: [{lo}, {hi}]")
    if not (0 < spec.place_r_min_m < spec.place_r_max_m):
        raise SpecError("object placement radii must satisfy 0 < r_min < r_max")
    for kind in list(spec.train_unknown_kinds) + list(spec.eval_unknown_kinds):
        if kind not in _UNKNOWN_RAW:
            raise SpecError(f"unknown object kind {kind!r}; expected sphere/cylinder")


class _Placer:
    """Samples object center radii with pairwise radial body separation.

    Radial separation keeps distinct objects apart in the per-voxel
    feature space (radius is the only absolute planar coordinate the
    voxel features carry), which instance grouping relies on.
    """

    def __init__(self, rng, r_min, r_max, gap):
        self.rng = rng
        self.r_min = r_min
        self.r_max = r_max
        self.gap = gap
        self.placed: list[tuple[float, float]] = []  # (radius, half extent)

    def place(self, half_extent: float) -> tuple[float, float]:
        lo = max(self.r_min + half_extent, self.r_min)
        hi = self.r_max - half_extent
        r = None
        for _ in range(200):
            cand = self.rng.uniform(lo, hi)
            if all(abs(cand - r0) >= half_extent + h0 + self.gap
                   for r0, h0 in self.placed):
                r = cand
                break
        if r is None:  # best effort: presence beats separation
            r = self.rng.uniform(lo, hi)
        theta = self.rng.uniform(-np.pi, np.pi)
        self.placed.append((r, half_extent))
        return r, theta


def _intensity(rng, raw_id: int, n: int) -> np.ndarray:
    lo, hi = INTENSITY_BANDS[raw_id]
    base = rng.uniform(lo, hi)
    return np.clip(base + rng.normal(0.0, _INTENSITY_JITTER, n), 0.0, 1.0)


def _ground(rng, spec: SynthConfig) -> np.ndarray:
    area = np.pi * (spec.ground_radius_m**2 - spec.ground_hole_m**2)
    n = max(1, int(round(spec.ground_density * area)))
    r = np.sqrt(rng.uniform(spec.ground_hole_m**2, spec.ground_radius_m**2, n))
    theta = rng.uniform(-np.pi, np.pi, n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), np.zeros(n)])


def _wall(rng, spec: SynthConfig) -> np.ndarray:
    theta_c = rng.uniform(-np.pi, np.pi)
    dist = rng.uniform(spec.place_r_max_m + 0.5, spec.ground_radius_m - 0.2)
    length = rng.uniform(spec.wall_length_min_m, spec.wall_length_max_m)
    height = rng.uniform(spec.wall_height_min_m, spec.wall_height_max_m)
    n = max(1, int(round(spec.wall_density * length * height)))
    u = np.array([np.cos(theta_c), np.sin(theta_c)])
    tangent = np.array([-u[1], u[0]])
    s = rng.uniform(-length / 2, length / 2, n)
    z = rng.uniform(0.0, height, n)
    xy = dist * u[None, :] + s[:, None] * tangent[None, :]
    return np.column_stack([xy, z])


def _cuboid_surface(rng, sx, sy, h, density) -> np.ndarray:
    """Points on the four sides and the top of an axis-aligned cuboid
    footprint [-sx/2,sx/2] x [-sy/2,sy/2] x [0,h], before yaw/translation."""
    areas = np.array([sy * h, sy * h, sx * h, sx * h, sx * sy])  # -x,+x,-y,+y,top
    n = max(1, int(round(density * areas.sum())))
    faces = rng.choice(5, size=n, p=areas / areas.sum())
    a = rng.uniform(-0.5, 0.5, n)
    b = rng.uniform(0.0, 1.0, n)
    pts = np.empty((n, 3))
    for f in range(5):
        m = faces == f
        if f == 0:
            pts[m] = np.column_stack([np.full(m.sum(), -sx / 2), a[m] * sy, b[m] * h])
        elif f == 1:
            pts[m] = np.column_stack([np.full(m.sum(), sx / 2), a[m] * sy, b[m] * h])
        elif f == 2:
            pts[m] = np.column_stack([a[m] * sx, np.full(m.sum(), -sy / 2), b[m] * h])
        elif f == 3:
            pts[m] = np.column_stack([a[m] * sx, np.full(m.sum(), sy / 2), b[m] * h])
        else:
            pts[m] = np.column_stack([a[m] * sx, (b[m] - 0.5) * sy, np.full(m.sum(), h)])
    return pts


def _sphere_surface(rng, radius, density) -> np.ndarray:
    n = max(1, int(round(density * 4 * np.pi * radius**2)))
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = v * radius
    pts[:, 2] += radius  # rest on the ground
    return pts

def _cylinder_surface(rng, radius, height, density) -> np.ndarray:
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    n = max(1, int(round(density * (lateral + cap))))
    on_cap = rng.uniform(size=n) < cap / (lateral + cap)
    theta = rng.uniform(-np.pi, np.pi, n)
    pts = np.empty((n, 3))
    side = ~on_cap
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = rng.uniform(0.0, height, side.sum())
    rr = radius * np.sqrt(rng.uniform(size=on_cap.sum()))
    pts[on_cap, 0] = rr * np.cos(theta[on_cap])
    pts[on_cap, 1] = rr * np.sin(theta[on_cap])
    pts[on_cap, 2] = height
    return pts


def _yaw_translate(pts, yaw, xc, yc):
    c, s = np.cos(yaw), np.sin(yaw)
    out = pts.copy()
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + xc
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + yc
    return out


def generate_synthetic_scene(seed: int, spec: SynthConfig,
                             unknown_kinds=("sphere",),
                             scene_id: str = "") -> Scene:
    """Generate one labeled scene; deterministic given (seed, spec, kinds)."""
    validate_spec(spec)
    for kind in unknown_kinds:
        if kind not in _UNKNOWN_RAW:
            raise SpecError(f"unknown object kind {kind!r}")
    rng = np.random.default_rng(seed)

    n_walls = int(rng.integers(spec.walls_min, spec.walls_max + 1))
    n_boxes = int(rng.integers(spec.boxes_min, spec.boxes_max + 1))
    n_posts = int(rng.integers(spec.posts_min, spec.posts_max + 1))
    n_unknown = int(rng.integers(spec.unknowns_min, spec.unknowns_max + 1))

    placer = _Placer(rng, spec.place_r_min_m, spec.place_r_max_m, spec.place_gap_m)
    chunks, sems, insts, intens = [], [], [], []

    def emit(pts, raw_id, instance_id):
        n = len(pts)
        chunks.append(pts)
        sems.append(np.full(n, raw_id, dtype=np.int32))
        insts.append(np.full(n, instance_id, dtype=np.int32))
        intens.append(_intensity(rng, raw_id, n))

    emit(_ground(rng, spec), RAW_GROUND, 0)
    for _ in range(n_walls):
        emit(_wall(rng, spec), RAW_WALL, 0)

    next_instance = 1
    for _ in range(n_boxes):
        sx = rng.uniform(spec.box_side_min_m, spec.box_side_max_m)
        sy = rng.uniform(spec.box_side_min_m, spec.box_side_max_m)
        h = rng.uniform(spec.box_height_min_m, spec.box_height_max_m)
        r, th = placer.place(0.5 * float(np.hypot(sx, sy)))
        yaw = rng.uniform(0.0, 2 * np.pi)
        pts = _yaw_translate(_cuboid_surface(rng, sx, sy, h, spec.object_density),
                             yaw, r * np.cos(th), r * np.sin(th))
        emit(pts, RAW_BOX, next_instance)
        next_instance += 1
    for _ in range(n_posts):
        sx = rng.uniform(spec.post_side_min_m, spec.post_side_max_m)
        sy = rng.uniform(spec.post_side_min_m, spec.post_side_max_m)
        h = rng.uniform(spec.post_height_min_m, spec.post_height_max_m)
        r, th = placer.place(0.5 * float(np.hypot(sx, sy)))
        yaw = rng.uniform(0.0, 2 * np.pi)
        pts = _yaw_translate(_cuboid_surface(rng, sx, sy, h, spec.object_density),
                             yaw, r * np.cos(th), r * np.sin(th))
        emit(pts, RAW_POST, next_instance)
        next_instance += 1
    for i in range(n_unknown):
        kind = unknown_kinds[i % len(unknown_kinds)]
        if kind == "sphere":
            radius = rng.uniform(spec.sphere_radius_min_m, spec.sphere_radius_max_m)
            r, th = placer.place(radius)
            pts = _sphere_surface(rng, radius, spec.object_density)
            pts[:, 0] += r * np.cos(th)
            pts[:, 1] += r * np.sin(th)
        else:
            radius = rng.uniform(spec.cylinder_radius_min_m, spec.cylinder_radius_max_m)
            height = rng.uniform(spec.cylinder_height_min_m, spec.cylinder_height_max_m)
            r, th = placer.place(radius)
            pts = _cylinder_surface(rng, radius, height, spec.object_density)
            pts[:, 0] += r * np.cos(th)
            pts[:, 1] += r * np.sin(th)
        emit(pts, _UNKNOWN_RAW[kind], next_instance)
        next_instance += 1

    xyz = np.concatenate(chunks, axis=0)
    if spec.noise_sigma_m > 0:
        xyz = xyz + rng.normal(0.0, spec.noise_sigma_m, xyz.shape)
    return Scene(
        xyz=xyz,
        intensity=np.concatenate(intens),
        semantic=np.concatenate(sems),
        instance=np.concatenate(insts),
        scene_id=scene_id or f"synth_{seed}",
    )


def default_vocabulary_ids() -> dict:
    """Raw-id sets matching the synthetic generator's label scheme."""
    return {
        "stuff_ids": [RAW_GROUND, RAW_WALL],
        "thing_ids": [RAW_BOX, RAW_POST],
        "unknown_train_ids": [RAW_SPHERE],
        "unknown_eval_ids": [RAW_CYLINDER],
    }
