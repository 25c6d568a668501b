"""Synthetic ground-truth generator and brute-force validity oracle.

Stands in for the preprocessing a real video would need: analytic SDF worlds
are sphere-traced into a monocular clip, and the per-object training signals
(masks, camera-to-object poses, depths) are emitted under a hidden per-object
gauge factor so that, exactly as with per-object SfM, no consumer can read a
shared metric off the data. The generator keeps the ground truth on the side
for evaluation: true gauge, per-object full depth maps, an exhaustive
valid-scale grid, and alternative world configurations with held-out views.

Shading uses a fixed directional light, so uniformly rescaling an object
about the per-frame camera center leaves every training pixel untouched --
the scale ambiguity is exact, not approximate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (Intrinsics, Pose, ScaleBounds, denormalize_all,
                       poses_from_bytes, poses_to_bytes, rotation_about_axis)

TRACE_TOL = 1e-4
TRACE_STEPS = 256
ORACLE_THETA = 0.999
BOUND_PAD = 0.1        # per-object near/far padding around observed depths
SCENE_PAD = 0.05       # scene bounds padding around per-object bounds


# --------------------------------------------------------------------- shapes


class Sphere:
    def __init__(self, radius: float):
        self.radius = radius

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p, axis=-1) - self.radius


class Box:
    def __init__(self, half):
        self.half = np.asarray(half, dtype=np.float64)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


class RoomShell:
    """Interior of a box: positive distance to the walls from inside.

    Grazing rays make pure sphere tracing crawl along the walls, so this
    shape also exposes the closed-form box-exit distance used by the tracer.
    """

    def __init__(self, half):
        self.box = Box(half)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return -self.box.sdf(p)

    def ray_exit(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-self.box.half - o) / d
            t2 = (self.box.half - o) / d
        t_far = np.where(np.isfinite(t1) | np.isfinite(t2),
                         np.nan_to_num(np.maximum(t1, t2), nan=np.inf,
                                       posinf=np.inf, neginf=np.inf),
                         np.inf)
        return t_far.min(axis=-1)


class Capsule:
    def __init__(self, a, b, radius: float):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.radius = radius

    def sdf(self, p: np.ndarray) -> np.ndarray:
        pa = p - self.a
        ba = self.b - self.a
        h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
        return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - self.radius


def solid(color):
    c = np.asarray(color, dtype=np.float64)
    return lambda p: np.broadcast_to(c, (*p.shape[:-1], 3)).copy()


def checker(period, c0, c1):
    a = np.asarray(c0, dtype=np.float64)
    b = np.asarray(c1, dtype=np.float64)

    def tex(p):
        cells = np.floor(p / period).astype(np.int64).sum(axis=-1)
        parity = (cells % 2).astype(np.float64)[..., None]
        return a * (1.0 - parity) + b * parity
    return tex


@dataclass
class Part:
    shape: object
    albedo: object
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def sdf(self, p):
        return self.shape.sdf(p - self.offset)


@dataclass
class PrimitiveObject:
    """One rigid object: unioned SDF parts in canonical coordinates, a
    world-space size multiplier, and a per-frame object-to-world pose track."""

    parts: list
    true_size: float
    trajectory: list  # [N] Pose, object local -> world

    def sdf_local(self, p_local: np.ndarray, parts=None) -> np.ndarray:
        q = p_local / self.true_size
        d = np.stack([part.sdf(q) for part in (parts or self.parts)])
        return d.min(axis=0) * self.true_size

    def albedo_local(self, p_local: np.ndarray) -> np.ndarray:
        q = p_local / self.true_size
        d = np.stack([part.sdf(q) for part in self.parts])
        idx = d.argmin(axis=0)
        out = np.empty((*q.shape[:-1], 3))
        for i, part in enumerate(self.parts):
            m = idx == i
            if m.any():
                out[m] = part.albedo(q[m])
        return out


@dataclass
class World:
    objects: list            # [K] PrimitiveObject; index 0 is the background
    camera: list             # [N] Pose, camera -> world
    intrinsics: Intrinsics
    light_dir: np.ndarray
    ambient: float = 0.35
    diffuse: float = 0.65

    @property
    def num_objects(self):
        return len(self.objects)

    @property
    def num_frames(self):
        return len(self.camera)


@dataclass
class GaugeSpec:
    """Hidden per-object scale factors; the anchor's factor is 1."""

    lam: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        if not np.all(self.lam > 0):
            raise ValueError("gauge factors must be strictly positive")
        if self.lam[0] != 1.0:
            raise ValueError("anchor gauge factor must be 1")


@dataclass
class GroundTruth:
    gauge: GaugeSpec
    full_depths: np.ndarray          # [K, N, H, W] per-object unit-metric, inf = miss
    true_normalized: np.ndarray      # gauge location in normalized scale space
    oracle: dict | None = None
    heldout: list = field(default_factory=list)


@dataclass
class SceneBundle:
    """Everything a training run may see, plus an optional GT sidecar."""

    frames: np.ndarray               # [N, H, W, 3] uint8
    masks: np.ndarray                # [N, H, W] int (0-based owner ids)
    poses: list                      # [N][K] Pose (gauge-divided translations)
    depths: np.ndarray               # [K, N, H, W] float32, 0 off-mask
    bounds: ScaleBounds
    intrinsics: Intrinsics
    manifest: dict
    gt: GroundTruth | None = None

    @property
    def num_objects(self):
        return len(self.poses[0])

    @property
    def num_frames(self):
        return self.frames.shape[0]


# ------------------------------------------------------------------- tracing


def _pixel_rays(intrinsics: Intrinsics, cam_pose: Pose):
    h, w = intrinsics.height, intrinsics.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    x = (cols + 0.5 - intrinsics.cx) / intrinsics.fx
    y = (rows + 0.5 - intrinsics.cy) / intrinsics.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_world = d_cam.reshape(-1, 3) @ cam_pose.rotation.T
    o_world = np.broadcast_to(cam_pose.translation, d_world.shape)
    return o_world, d_world


def _trace_object(obj: PrimitiveObject, pose_idx: int, origins, dirs, t_max: float):
    """Hit distance per ray against one object (inf = miss).

    Closed-form parts (the enclosing room shell) intersect analytically; the
    remaining parts are sphere-traced, stopping once a ray passes the nearest
    analytic hit.
    """
    inv = obj.trajectory[pose_idx].invert()
    o = inv.apply(origins)
    d = inv.rotate(dirs)
    size = obj.true_size

    t_closed = np.full(o.shape[0], np.inf)
    marchable = []
    for part in obj.parts:
        if isinstance(part.shape, RoomShell):
            t_part = part.shape.ray_exit(o / size - part.offset, d) * size
            t_closed = np.minimum(t_closed, np.where(t_part > 0, t_part, np.inf))
        else:
            marchable.append(part)

    t_march = np.full(o.shape[0], np.inf)
    if marchable:
        t = np.zeros(o.shape[0])
        hit = np.zeros(o.shape[0], dtype=bool)
        active = np.ones(o.shape[0], dtype=bool)
        stop = np.minimum(t_max, t_closed)
        for _ in range(TRACE_STEPS):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
            p = o[idx] + t[idx, None] * d[idx]
            dist = obj.sdf_local(p, marchable)
            close = dist < TRACE_TOL
            hit_idx = idx[close]
            hit[hit_idx] = True
            active[hit_idx] = False
            t[idx] += np.maximum(dist, 0.0)
            active &= t <= stop
        t_march[hit] = t[hit]
    return np.minimum(t_march, t_closed)


def _surface_attributes(obj: PrimitiveObject, pose_idx: int, origins, dirs, t):
    """Albedo and world normal at hit points (t finite)."""
    pose = obj.trajectory[pose_idx]
    inv = pose.invert()
    p_local = inv.apply(origins + t[:, None] * dirs)
    eps = 1e-4
    grad = np.empty_like(p_local)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = eps
        grad[:, axis] = obj.sdf_local(p_local + e) - obj.sdf_local(p_local - e)
    n_local = grad / np.maximum(np.linalg.norm(grad, axis=-1, keepdims=True), 1e-12)
    normal = n_local @ pose.rotation.T
    return obj.albedo_local(p_local), normal


def raytrace_frame(world: World, frame_index: int, cam_pose: Pose | None = None):
    """Render one frame: (rgb [H,W,3] in [0,1], metric depth, 0-based mask,
    per-object full depths [K,H,W])."""
    intr = world.intrinsics
    pose = world.camera[frame_index] if cam_pose is None else cam_pose
    origins, dirs = _pixel_rays(intr, pose)
    t_max = 100.0
    per_obj = np.stack([_trace_object(obj, frame_index, origins, dirs, t_max)
                        for obj in world.objects])
    owner = per_obj.argmin(axis=0)
    depth = per_obj[owner, np.arange(per_obj.shape[1])]
    if not np.all(np.isfinite(depth)):
        raise RuntimeError("open scene: some rays escaped the room")

    rgb = np.zeros((per_obj.shape[1], 3))
    light = world.light_dir / np.linalg.norm(world.light_dir)
    for k, obj in enumerate(world.objects):
        m = owner == k
        if not m.any():
            continue
        albedo, normal = _surface_attributes(obj, frame_index, origins[m], dirs[m], depth[m])
        lam = np.clip((normal * -light).sum(axis=-1), 0.0, 1.0)
        rgb[m] = np.clip(albedo * (world.ambient + world.diffuse * lam[:, None]), 0.0, 1.0)

    h, w = intr.height, intr.width
    return (rgb.reshape(h, w, 3), depth.reshape(h, w),
            owner.reshape(h, w).astype(np.int64), per_obj.reshape(-1, h, w))


# --------------------------------------------------------------- scene preset


def _look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose, CV convention (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    z = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    y = -(up - (up @ z) * z)
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    return Pose(np.stack([x, y, z], axis=1), eye)


def _orbit_camera(rng, num_frames, radius, height, target, sweep_deg, phase):
    poses = []
    for i in range(num_frames):
        a = np.deg2rad(phase + sweep_deg * i / max(num_frames - 1, 1))
        eye = np.array([radius * np.cos(a), height + 0.25 * np.sin(2.1 * a),
                        radius * np.sin(a)])
        poses.append(_look_at(eye, target))
    return poses


def _mover_track(num_frames, center_xz, orbit_radius, phase_deg, sweep_deg,
                 height, axis, spin_deg, bob=0.0):
    """Arc around a vertical axis (keeps clearance from the geometry at the
    arc's center) with a slow spin about the object's own axis."""
    poses = []
    for i in range(num_frames):
        s = i / max(num_frames - 1, 1)
        a = np.deg2rad(phase_deg + sweep_deg * s)
        pos = np.array([center_xz[0] + orbit_radius * np.cos(a),
                        height + bob * np.sin(2.0 * np.pi * s),
                        center_xz[1] + orbit_radius * np.sin(a)])
        rot = rotation_about_axis(axis, np.deg2rad(spin_deg) * s)
        poses.append(Pose(rot, pos))
    return poses


def _background_object(num_frames, room_half, pillar_half, pillar_center) -> PrimitiveObject:
    parts = [
        Part(RoomShell(room_half), checker(0.9, (0.82, 0.80, 0.74), (0.38, 0.42, 0.50))),
        Part(Box(pillar_half), checker(0.45, (0.72, 0.30, 0.24), (0.30, 0.12, 0.10)),
             offset=np.asarray(pillar_center)),
    ]
    ident = [Pose.identity() for _ in range(num_frames)]
    return PrimitiveObject(parts=parts, true_size=1.0, trajectory=ident)


def build_scene(seed: int, num_objects: int = 2, num_frames: int = 15,
                image_size: int = 64, fov_deg: float = 62.0) -> World:
    """One candidate world (no occlusion guarantees; see generate_scene)."""
    rng = np.random.default_rng(seed)
    room_half = np.array([3.0, 2.0, 3.0])
    pillar_center = np.array([-1.05, -0.85, 0.55])
    pillar_half = np.array([0.38, 1.15, 0.38])
    objects = [_background_object(num_frames, room_half, pillar_half, pillar_center)]

    palettes = [((0.95, 0.83, 0.25), (0.24, 0.20, 0.70)),
                ((0.30, 0.85, 0.45), (0.85, 0.30, 0.60)),
                ((0.95, 0.55, 0.20), (0.20, 0.60, 0.85))]
    for j in range(num_objects - 1):
        c0, c1 = palettes[j % len(palettes)]
        if j % 2 == 0:
            shape = Sphere(1.0)
        else:
            shape = Box((0.8, 0.8, 0.8))
        size = 0.40 + 0.08 * rng.random() + 0.05 * j
        # arc around the pillar: the mover passes behind it relative to the
        # orbiting camera without 3D contact (contact would pin its scale)
        orbit_r = 1.15 + 0.12 * rng.random() + 0.25 * j
        phase = float(rng.uniform(0.0, 360.0))
        sweep = float(rng.uniform(200.0, 320.0)) * (1 if rng.random() < 0.5 else -1)
        height = -0.95 + 0.15 * rng.random() + 0.3 * j
        spin = float(rng.uniform(40, 160))
        axis = rng.normal(size=3)
        objects.append(PrimitiveObject(
            parts=[Part(shape, checker(0.5, c0, c1))],
            true_size=size,
            trajectory=_mover_track(num_frames, pillar_center[[0, 2]], orbit_r,
                                    phase, sweep, height, axis, spin, bob=0.1)))

    camera = _orbit_camera(rng, num_frames, radius=2.35,
                           height=0.45 + 0.2 * rng.random(),
                           target=np.array([-0.75, -0.75, 0.35]),
                           sweep_deg=115.0, phase=25.0 + 14.0 * rng.random())
    intr = Intrinsics.from_fov(image_size, image_size, fov_deg)
    light = np.array([-0.35, -1.0, 0.25])
    return World(objects=objects, camera=camera, intrinsics=intr, light_dir=light)


def mutual_occlusion_pixels(per_obj_depths: np.ndarray, owner: np.ndarray) -> int:
    """Pixels where a mover is hidden behind another object (any pair where
    the front-most is not the only hit and at least one mover participates)."""
    finite = np.isfinite(per_obj_depths)
    multi = finite.sum(axis=0) >= 2
    hidden_mover = 0
    k = per_obj_depths.shape[0]
    for j in range(1, k):
        hidden_mover += int((multi & finite[j] & (owner != j)).sum())
    return hidden_mover


def generate_scene(seed: int, num_objects: int = 2, num_frames: int = 15,
                   image_size: int = 64, min_occlusion_pixels: int | None = None,
                   max_retries: int = 20) -> World:
    """Build a world guaranteed to contain mutual inter-object occlusion.

    Retries with derived seeds until enough pixels hide a mover behind other
    geometry (that event is what bounds scales from below).
    """
    if num_objects < 1 or num_frames < 2:
        raise ValueError("need num_objects >= 1 and num_frames >= 2")
    if num_objects == 1:
        return build_scene(seed, 1, num_frames, image_size)
    if min_occlusion_pixels is None:
        min_occlusion_pixels = max(10, int(0.007 * num_frames * image_size ** 2))
    for trial in range(max_retries):
        world = build_scene(seed + 1000 * trial, num_objects, num_frames, image_size)
        total = 0
        visible_frames = np.zeros(num_objects, dtype=np.int64)
        for n in range(num_frames):
            _, _, owner, per_obj = raytrace_frame(world, n)
            total += mutual_occlusion_pixels(per_obj.reshape(num_objects, -1),
                                             owner.reshape(-1))
            counts = np.bincount(owner.reshape(-1), minlength=num_objects)
            visible_frames += counts > 30
        # every mover must be decently visible in most frames
        if total >= min_occlusion_pixels and (visible_frames[1:] >= 0.6 * num_frames).all():
            return world
    raise RuntimeError(f"no occluding scene found after {max_retries} retries "
                       f"(seed {seed})")


# ---------------------------------------------------------------- emission


def default_gauge(num_objects: int, seed: int = 0) -> GaugeSpec:
    rng = np.random.default_rng(seed + 77)
    lam = np.concatenate([[1.0], np.exp(rng.uniform(np.log(0.6), np.log(1.8),
                                                    num_objects - 1))])
    return GaugeSpec(lam)


def true_normalized_point(gauge: GaugeSpec, bounds: ScaleBounds) -> np.ndarray:
    """Normalized coordinates whose denormalized scales reproduce the gauge
    ratios relative to the anchor."""
    sbar_anchor = bounds.far_scene / bounds.far_obj[0]  # anchor pinned at s=1
    lo = bounds.near_scene / bounds.near_obj
    hi = bounds.far_scene / bounds.far_obj
    target = gauge.lam * sbar_anchor
    s = (target - lo) / (hi - lo)
    s[0] = 1.0
    return s


def emit_bundle(world: World, gauge: GaugeSpec | None = None,
                heldout_configs: int = 5, heldout_views: int = 6,
                oracle_resolution: int | None = None, seed: int = 0) -> SceneBundle:
    """Ray-trace the clip and emit gauge-divided per-object training data.

    The GT sidecar keeps the gauge, per-object full depths, the brute-force
    valid grid and alternative-configuration held-out views.
    """
    num_k = world.num_objects
    num_n = world.num_frames
    if gauge is None:
        gauge = default_gauge(num_k, seed)
    if gauge.lam.shape[0] != num_k:
        raise ValueError("gauge size mismatch")
    intr = world.intrinsics
    h, w = intr.height, intr.width

    frames = np.empty((num_n, h, w, 3), dtype=np.uint8)
    masks = np.empty((num_n, h, w), dtype=np.int64)
    depths = np.zeros((num_k, num_n, h, w), dtype=np.float32)
    full = np.empty((num_k, num_n, h, w), dtype=np.float32)
    poses = []
    for n in range(num_n):
        rgb, depth, owner, per_obj = raytrace_frame(world, n)
        frames[n] = np.clip(rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)
        masks[n] = owner
        cam = world.camera[n]
        row = []
        for k in range(num_k):
            t_cam_obj = world.objects[k].trajectory[n].invert().compose(cam)
            row.append(Pose(t_cam_obj.rotation, t_cam_obj.translation / gauge.lam[k]))
            on = owner == k
            depths[k, n][on] = (depth[on] / gauge.lam[k]).astype(np.float32)
            full[k, n] = (per_obj[k] / gauge.lam[k]).astype(np.float32)
        poses.append(row)

    near_obj = np.empty(num_k)
    far_obj = np.empty(num_k)
    for k in range(num_k):
        on = depths[k] > 0
        if not on.any():
            raise RuntimeError(f"object {k} never visible")
        near_obj[k] = (1.0 - BOUND_PAD) * float(depths[k][on].min())
        far_obj[k] = (1.0 + BOUND_PAD) * float(depths[k][on].max())
    bounds = ScaleBounds(near_obj, far_obj,
                         (1.0 - SCENE_PAD) * near_obj.min(),
                         (1.0 + SCENE_PAD) * far_obj.max())

    true_norm = true_normalized_point(gauge, bounds)
    if num_k > 1 and not np.all((true_norm[1:] > 0.01) & (true_norm[1:] < 0.99)):
        raise RuntimeError(f"true gauge point {true_norm} not interior; "
                           "regenerate with another seed")

    manifest = {
        "format_version": 1,
        "objects": num_k,
        "frames": num_n,
        "width": w,
        "height": h,
        "intrinsics": intr.as_dict(),
        "bounds": bounds.as_dict(),
        "anchor": 0,
    }
    gt = GroundTruth(gauge=gauge, full_depths=full, true_normalized=true_norm)
    bundle = SceneBundle(frames=frames, masks=masks, poses=poses, depths=depths,
                         bounds=bounds, intrinsics=intr, manifest=manifest, gt=gt)
    if num_k > 1:
        res = oracle_resolution or (101 if num_k == 2 else 21)
        gt.oracle = oracle_valid_region(bundle, res)
        if heldout_configs > 0 and heldout_views > 0:
            gt.heldout = _build_heldout(world, bundle, gauge, heldout_configs,
                                        heldout_views, seed)
    return bundle


# ----------------------------------------------------------------- oracle


def oracle_valid_region(bundle: SceneBundle, grid_resolution: int,
                        theta: float = ORACLE_THETA) -> dict:
    """Exhaustive scale-validity grid from ground-truth depths.

    A combination is valid when, over all occlusion-relevant pixels (rays
    hitting at least two objects), the front-most object under scaled
    per-object depths matches the true mask for at least `theta` of them.
    """
    gt = bundle.gt
    if gt is None:
        raise ValueError("bundle has no GT sidecar")
    num_k = bundle.num_objects
    full = gt.full_depths.astype(np.float64)            # [K, N, H, W]
    finite = np.isfinite(full)
    relevant = finite.sum(axis=0) >= 2
    d_rel = full[:, relevant].T                          # [P, K]
    owner_rel = bundle.masks[relevant]
    coords = np.linspace(0.0, 1.0, grid_resolution)
    grids = np.meshgrid(*[coords] * (num_k - 1), indexing="ij")
    combos = np.stack([g.reshape(-1) for g in grids], axis=-1)
    norm = np.concatenate([np.ones((combos.shape[0], 1)), combos], axis=1)
    agree = np.empty(combos.shape[0])
    chunk = max(1, int(2e7 // max(d_rel.shape[0], 1)))
    for i in range(0, combos.shape[0], chunk):
        sbar = np.stack([denormalize_all(row, bundle.bounds)
                         for row in norm[i:i + chunk]])
        scaled = sbar[:, None, :] * d_rel[None, :, :]
        front = np.argmin(scaled, axis=2)
        agree[i:i + chunk] = (front == owner_rel[None, :]).mean(axis=1)
    shape = (grid_resolution,) * (num_k - 1)
    return {
        "resolution": grid_resolution,
        "coords": coords,
        "agreement": agree.reshape(shape),
        "valid": (agree >= theta).reshape(shape),
        "theta": theta,
        "true_point": gt.true_normalized,
        "relevant_pixels": int(d_rel.shape[0]),
    }


# --------------------------------------------------------------- held-out GT


def scaled_world(world: World, rho: np.ndarray) -> World:
    """Alternative configuration: object k resized by rho[k] about the
    per-frame training camera center, so every training pixel is unchanged."""
    objects = []
    for k, obj in enumerate(world.objects):
        if rho[k] == 1.0:
            objects.append(obj)
            continue
        traj = []
        for n, pose in enumerate(obj.trajectory):
            c = world.camera[n].translation
            traj.append(Pose(pose.rotation, c + rho[k] * (pose.translation - c)))
        objects.append(PrimitiveObject(parts=obj.parts,
                                       true_size=obj.true_size * rho[k],
                                       trajectory=traj))
    return World(objects=objects, camera=world.camera, intrinsics=world.intrinsics,
                 light_dir=world.light_dir, ambient=world.ambient,
                 diffuse=world.diffuse)


def _heldout_cameras(world: World, num_views: int, seed: int):
    rng = np.random.default_rng(seed + 31)
    views = []
    num_n = world.num_frames
    for i in range(num_views):
        n = int(rng.integers(0, num_n))
        a = np.deg2rad(rng.uniform(-30.0, 170.0))
        radius = rng.uniform(1.45, 1.95)
        eye = np.array([radius * np.cos(a), rng.uniform(0.8, 1.35),
                        radius * np.sin(a)])
        target = np.array([-0.8, -0.8, 0.3]) + 0.2 * rng.standard_normal(3)
        views.append((n, _look_at(eye, target)))
    return views


def _sample_valid_lambdas(bundle: SceneBundle, count: int, seed: int) -> list:
    """Gauge configurations drawn from the oracle-valid set (true one first)."""
    gt = bundle.gt
    oracle = gt.oracle
    num_k = bundle.num_objects
    coords = oracle["coords"]
    valid_idx = np.argwhere(oracle["valid"])
    if valid_idx.size == 0:
        raise RuntimeError("oracle found no valid combination")
    rng = np.random.default_rng(seed + 13)
    sbar_anchor = bundle.bounds.far_scene / bundle.bounds.far_obj[0]
    configs = [gt.gauge.lam.copy()]
    picks = rng.choice(valid_idx.shape[0], size=min(count - 1, valid_idx.shape[0]),
                       replace=False)
    for i in picks:
        norm = np.concatenate([[1.0], coords[valid_idx[i]]])
        sbar = denormalize_all(norm, bundle.bounds)
        configs.append(sbar / sbar_anchor)   # lambda ratios relative to anchor
    return configs


def _build_heldout(world: World, bundle: SceneBundle, gauge: GaugeSpec,
                   num_configs: int, num_views: int, seed: int) -> list:
    views = _heldout_cameras(world, num_views, seed)
    out = []
    for lam_new in _sample_valid_lambdas(bundle, num_configs, seed):
        rho = lam_new / gauge.lam
        rho[0] = 1.0
        w_cfg = scaled_world(world, rho)
        entries = []
        for n, cam in views:
            rgb, depth, owner, _ = raytrace_frame(w_cfg, n, cam_pose=cam)
            entries.append({"frame": n, "cam": cam,
                            "rgb": np.clip(rgb * 255.0 + 0.5, 0, 255).astype(np.uint8),
                            "depth": depth.astype(np.float32),
                            "mask": owner.astype(np.int64)})
        out.append({"lam": lam_new, "views": entries})
    return out


def synthesize(seed: int, num_objects: int = 2, num_frames: int = 15,
               image_size: int = 64, heldout_configs: int = 5,
               heldout_views: int = 6, oracle_resolution: int | None = None,
               max_retries: int = 20) -> SceneBundle:
    """Generate + emit in one call, retrying gauges that land the true point
    too close to the edge of the normalized range."""
    world = generate_scene(seed, num_objects, num_frames, image_size,
                           max_retries=max_retries)
    last = None
    for trial in range(max_retries):
        gauge = default_gauge(num_objects, seed + 101 * trial)
        try:
            return emit_bundle(world, gauge, heldout_configs=heldout_configs,
                               heldout_views=heldout_views,
                               oracle_resolution=oracle_resolution, seed=seed)
        except RuntimeError as exc:
            last = exc
    raise RuntimeError(f"no workable gauge after {max_retries} tries: {last}")


STANDARD_TOY_SEED = 15


def standard_toy_bundle(seed: int = STANDARD_TOY_SEED, **overrides) -> SceneBundle:
    """The pinned 2-object desk scene used by the acceptance suite."""
    kw = dict(num_objects=2, num_frames=15, image_size=64)
    kw.update(overrides)
    return synthesize(seed, **kw)


# --------------------------------------------------------------------- disk


def save_bundle(bundle: SceneBundle, path) -> None:
    root = Path(path)
    for sub in ("frames", "masks", "poses", "depths"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    m = dict(bundle.manifest)
    m["files"] = {"frames": "frames/%04d.png", "masks": "masks/%04d.u8",
                  "poses": "poses/obj%02d.f32", "depths": "depths/obj%02d_%04d.f32"}
    (root / "manifest.json").write_text(json.dumps(m, indent=2))
    num_k, num_n = bundle.num_objects, bundle.num_frames
    for n in range(num_n):
        Image.fromarray(bundle.frames[n]).save(root / "frames" / f"{n:04d}.png")
        ((bundle.masks[n] + 1).astype(np.uint8)).tofile(root / "masks" / f"{n:04d}.u8")
    for k in range(num_k):
        track = [bundle.poses[n][k] for n in range(num_n)]
        (root / "poses" / f"obj{k + 1:02d}.f32").write_bytes(poses_to_bytes(track))
        for n in range(num_n):
            bundle.depths[k, n].astype("<f4").tofile(
                root / "depths" / f"obj{k + 1:02d}_{n:04d}.f32")
    if bundle.gt is not None:
        _save_gt(bundle, root / "gt")


def _save_gt(bundle: SceneBundle, root: Path) -> None:
    gt = bundle.gt
    (root / "full_depths").mkdir(parents=True, exist_ok=True)
    payload = {"lambda": gt.gauge.lam.tolist(),
               "true_normalized": gt.true_normalized.tolist()}
    (root / "gauge.json").write_text(json.dumps(payload, indent=2))
    num_k, num_n = bundle.num_objects, bundle.num_frames
    for k in range(num_k):
        for n in range(num_n):
            gt.full_depths[k, n].astype("<f4").tofile(
                root / "full_depths" / f"obj{k + 1:02d}_{n:04d}.f32")
    if gt.oracle is not None:
        o = gt.oracle
        (root / "oracle.json").write_text(json.dumps({
            "resolution": o["resolution"], "theta": o["theta"],
            "coords": o["coords"].tolist(),
            "agreement": o["agreement"].tolist(),
            "valid": np.asarray(o["valid"]).astype(int).tolist(),
            "true_point": np.asarray(o["true_point"]).tolist(),
            "relevant_pixels": o["relevant_pixels"]}, indent=2))
    for c, cfg in enumerate(gt.heldout):
        cdir = root / "heldout" / f"config{c:02d}"
        cdir.mkdir(parents=True, exist_ok=True)
        meta = {"lambda": np.asarray(cfg["lam"]).tolist(),
                "views": [{"frame": int(v["frame"]),
                           "cam": v["cam"].matrix34().reshape(-1).tolist()}
                          for v in cfg["views"]]}
        (cdir / "meta.json").write_text(json.dumps(meta, indent=2))
        for i, v in enumerate(cfg["views"]):
            Image.fromarray(v["rgb"]).save(cdir / f"view{i:03d}.png")
            v["depth"].astype("<f4").tofile(cdir / f"view{i:03d}_depth.f32")
            (v["mask"] + 1).astype(np.uint8).tofile(cdir / f"view{i:03d}_mask.u8")


def load_bundle(path) -> SceneBundle:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    num_k, num_n = manifest["objects"], manifest["frames"]
    h, w = manifest["height"], manifest["width"]
    frames = np.stack([np.asarray(Image.open(root / "frames" / f"{n:04d}.png"))
                       for n in range(num_n)])
    masks = np.stack([np.fromfile(root / "masks" / f"{n:04d}.u8", dtype=np.uint8)
                      .reshape(h, w).astype(np.int64) - 1 for n in range(num_n)])
    tracks = [poses_from_bytes((root / "poses" / f"obj{k + 1:02d}.f32").read_bytes())
              for k in range(num_k)]
    poses = [[tracks[k][n] for k in range(num_k)] for n in range(num_n)]
    depths = np.stack([
        np.stack([np.fromfile(root / "depths" / f"obj{k + 1:02d}_{n:04d}.f32",
                              dtype="<f4").reshape(h, w) for n in range(num_n)])
        for k in range(num_k)])
    intr = Intrinsics(**manifest["intrinsics"])
    bounds = ScaleBounds.from_dict(manifest["bounds"])
    gt = _load_gt(root / "gt", num_k, num_n, h, w) if (root / "gt").exists() else None
    return SceneBundle(frames=frames, masks=masks, poses=poses, depths=depths,
                       bounds=bounds, intrinsics=intr, manifest=manifest, gt=gt)


def _load_gt(root: Path, num_k, num_n, h, w) -> GroundTruth:
    payload = json.loads((root / "gauge.json").read_text())
    full = np.stack([
        np.stack([np.fromfile(root / "full_depths" / f"obj{k + 1:02d}_{n:04d}.f32",
                              dtype="<f4").reshape(h, w) for n in range(num_n)])
        for k in range(num_k)])
    gt = GroundTruth(gauge=GaugeSpec(np.asarray(payload["lambda"])),
                     full_depths=full,
                     true_normalized=np.asarray(payload["true_normalized"]))
    opath = root / "oracle.json"
    if opath.exists():
        o = json.loads(opath.read_text())
        gt.oracle = {"resolution": o["resolution"], "theta": o["theta"],
                     "coords": np.asarray(o["coords"]),
                     "agreement": np.asarray(o["agreement"]),
                     "valid": np.asarray(o["valid"], dtype=bool),
                     "true_point": np.asarray(o["true_point"]),
                     "relevant_pixels": o["relevant_pixels"]}
    hdir = root / "heldout"
    if hdir.exists():
        for cdir in sorted(hdir.iterdir()):
            meta = json.loads((cdir / "meta.json").read_text())
            views = []
            for i, v in enumerate(meta["views"]):
                cam = Pose.from_matrix34(np.asarray(v["cam"]).reshape(3, 4))
                rgb = np.asarray(Image.open(cdir / f"view{i:03d}.png"))
                depth = np.fromfile(cdir / f"view{i:03d}_depth.f32",
                                    dtype="<f4").reshape(h, w)
                mask = np.fromfile(cdir / f"view{i:03d}_mask.u8",
                                   dtype=np.uint8).reshape(h, w).astype(np.int64) - 1
                views.append({"frame": v["frame"], "cam": cam, "rgb": rgb,
                              "depth": depth, "mask": mask})
            gt.heldout.append({"lam": np.asarray(meta["lambda"]), "views": views})
    return gt
