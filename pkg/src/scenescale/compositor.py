"""Scene-level rendering under a chosen scale combination.

A ray owned by object k is sampled once in k's frame, every sample is mapped
into all other object frames through the shared camera frame, and densities
are merged per sample in the denormalized scene metric. A density queried in
object k̂'s frame is extinction per unit of k̂-space length, so it is divided
by s̄_k̂ before merging; that keeps an object's opacity invariant under
rescaling, which is the whole point of the scale-invariant representation.

The soft Z-buffer path renders each object's depth independently on the
transformed ray (scale-free, so one pass serves any number of scale
hypotheses) and ranks scaled depths through a softmax.

Sums over the object axis are computed on value-sorted summands so the merge
is bitwise invariant under permutations of the object order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Pose, Ray, ScaleBounds, ScaleCombination, denormalize_all
from .objectfield import RenderConfig, VMField, integrate_rays, sample_segments

SOFT_Z_EMPTY_OPACITY = 0.01  # below this an object is absent along the ray
SEG_CLIP = 1e-7
_SAFE_DENOM = 1e-30


@dataclass(frozen=True)
class RenderOutput:
    """Per-ray composite result: color, scene-metric depth, soft one-hot seg."""

    color: np.ndarray
    depth: float
    segmentation: np.ndarray
    opacity: float = 1.0


@dataclass
class SoftZConfig:
    combos_per_batch: int = 64  # H
    samples_per_ray: int = 64

    def __post_init__(self):
        if self.combos_per_batch < 1:
            raise ValueError("need H >= 1")


class ScenePoses:
    """Camera-to-object pose tracks, stacked for batched gathers: [N, K]."""

    def __init__(self, poses):
        if isinstance(poses, ScenePoses):
            self.rotations = poses.rotations
            self.translations = poses.translations
        else:
            self.rotations = np.stack([[p.rotation for p in row] for row in poses])
            self.translations = np.stack([[p.translation for p in row] for row in poses])
        self.num_frames, self.num_objects = self.rotations.shape[:2]
        self._torch_cache = {}

    def pose(self, n: int, k: int) -> Pose:
        return Pose(self.rotations[n, k], self.translations[n, k])

    def frame(self, n: int) -> list:
        return [self.pose(n, k) for k in range(self.num_objects)]

    def torch(self, dtype):
        if dtype not in self._torch_cache:
            self._torch_cache[dtype] = (
                torch.as_tensor(self.rotations, dtype=dtype),
                torch.as_tensor(self.translations, dtype=dtype))
        return self._torch_cache[dtype]

    @staticmethod
    def from_frame(poses_at_frame) -> "ScenePoses":
        return ScenePoses([list(poses_at_frame)])


@dataclass
class RayBatch:
    """Rays in their owners' frames with per-ray sampling ranges."""

    origins: np.ndarray
    dirs: np.ndarray
    frame: np.ndarray
    owner: np.ndarray
    near: np.ndarray
    far: np.ndarray
    pixels: np.ndarray | None = None

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.dirs = np.asarray(self.dirs, dtype=np.float64).reshape(-1, 3)
        r = self.origins.shape[0]
        self.frame = np.broadcast_to(np.asarray(self.frame, dtype=np.int64), (r,)).copy()
        self.owner = np.broadcast_to(np.asarray(self.owner, dtype=np.int64), (r,)).copy()
        self.near = np.broadcast_to(np.asarray(self.near, dtype=np.float64), (r,)).copy()
        self.far = np.broadcast_to(np.asarray(self.far, dtype=np.float64), (r,)).copy()

    def __len__(self):
        return self.origins.shape[0]

    @staticmethod
    def single(ray: Ray, near: float, far: float) -> "RayBatch":
        return RayBatch(ray.origin[None], ray.direction[None],
                        np.array([ray.frame_index]), np.array([ray.owner_object]),
                        np.array([near]), np.array([far]))


def _sorted_sum(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Sum reduced in value order: bitwise invariant to input permutation."""
    vals, _ = torch.sort(x, dim=dim)
    return vals.sum(dim=dim)


def scene_sampling_range(bounds: ScaleBounds, sbar_owner):
    """Owner-frame near/far covering the whole scaled scene.

    Content of object k lies within scene-metric [near_scene, far_scene] for
    every normalized combination by the bound construction, so sampling
    [near_scene, far_scene]/s̄_owner in owner units sees everything.
    """
    s = np.asarray(sbar_owner, dtype=np.float64)
    return bounds.near_scene / s, bounds.far_scene / s


def _check_scene(fields, poses: ScenePoses, scales: np.ndarray, batch: RayBatch):
    k = len(fields)
    if poses.num_objects != k or scales.shape[0] != k:
        raise ValueError(f"object count mismatch: {k} fields, "
                         f"{poses.num_objects} pose columns, {scales.shape[0]} scales")
    if batch.frame.max(initial=0) >= poses.num_frames or batch.frame.min(initial=0) < 0:
        raise ValueError("ray frame index without poses")
    if batch.owner.max(initial=0) >= k or batch.owner.min(initial=0) < 0:
        raise ValueError("ray owner index out of range")


def composite_render_batch(fields, poses, batch: RayBatch, scales_denorm,
                           cfg: RenderConfig, generator=None, with_colors=True):
    """Merged rendering of all K fields along owner-space rays.

    scales_denorm: K denormalized scales. Returns dict with color [R, 3]
    (zeros when with_colors=False), depth [R] in the scene metric,
    seg [R, K], opacity [R]; tensors carry gradients into every field.
    """
    poses = poses if isinstance(poses, ScenePoses) else ScenePoses(poses)
    scales_np = np.asarray(scales_denorm, dtype=np.float64).reshape(-1)
    _check_scene(fields, poses, scales_np, batch)
    num_k = len(fields)
    dtype = fields[0].aabb.dtype
    rot_all, tr_all = poses.torch(dtype)
    sbar = torch.as_tensor(scales_np, dtype=dtype)

    origins = torch.as_tensor(batch.origins, dtype=dtype)
    dirs = torch.as_tensor(batch.dirs, dtype=dtype)
    frame = torch.as_tensor(batch.frame)
    owner = torch.as_tensor(batch.owner)
    num_r = len(batch)
    s_own = sbar[owner]

    t_own, delta_own = sample_segments(
        torch.as_tensor(batch.near, dtype=dtype), torch.as_tensor(batch.far, dtype=dtype),
        cfg.samples_per_ray, num_r, cfg.jitter, generator, dtype)
    pts_own = origins[:, None, :] + t_own[..., None] * dirs[:, None, :]

    rot_own = rot_all[frame, owner]
    c_own = tr_all[frame, owner]

    sig_tilde, obj_pts, obj_dirs = [], [], []
    for k in range(num_k):
        rel = rot_all[frame, k] @ rot_own.transpose(-1, -2)
        ratio = (s_own / sbar[k])[:, None, None]
        p_k = torch.einsum("rij,rmj->rmi", rel, pts_own - c_own[:, None, :]) * ratio \
            + tr_all[frame, k][:, None, :]
        # rotations preserve unit length; renormalizing here would perturb the
        # K=1 identity case away from bitwise equality with independent rendering
        d_k = torch.einsum("rij,rj->ri", rel, dirs)
        sigma = fields[k].density(p_k.reshape(-1, 3)).reshape(num_r, cfg.samples_per_ray)
        sig_tilde.append(sigma / sbar[k])
        obj_pts.append(p_k)
        obj_dirs.append(d_k)

    st = torch.stack(sig_tilde)                       # [K, R, M]
    sigma_tot = _sorted_sum(st, dim=0)
    phi = st / sigma_tot.clamp_min(_SAFE_DENOM)       # exact where sigma_tot > 0

    t_scene = s_own[:, None] * t_own
    delta_scene = s_own[:, None] * delta_own
    far_scene = s_own * torch.as_tensor(batch.far, dtype=dtype)

    def color_fn(sel):
        idx_r, _ = torch.nonzero(sel, as_tuple=True)
        terms = []
        for k in range(num_k):
            phik = phi[k][sel]
            active = phik > 0
            ck = torch.zeros((phik.shape[0], 3), dtype=dtype)
            if bool(active.any()):
                vals = fields[k].color(obj_pts[k][sel][active], obj_dirs[k][idx_r][active])
                ck = torch.index_put(ck, (torch.nonzero(active, as_tuple=True)[0],), vals)
            terms.append(phik[:, None] * ck)
        return _sorted_sum(torch.stack(terms), dim=0)

    cutoff = cfg.color_weight_cutoff if with_colors else float("inf")
    rgb, depth, opacity, weights = integrate_rays(
        sigma_tot, delta_scene, t_scene, color_fn, cfg.background(dtype),
        far_scene, cutoff)

    masses = (weights[None, :, :] * phi).sum(dim=2)   # [K, R]
    safe_op = opacity.clamp_min(_SAFE_DENOM)
    seg = (masses / safe_op).transpose(0, 1)
    empty = opacity <= 1e-12
    if bool(empty.any()):
        uniform = torch.full_like(seg, 1.0 / num_k)
        seg = torch.where(empty[:, None], uniform, seg)
    return {"color": rgb, "depth": depth, "seg": seg, "opacity": opacity,
            "weights": weights}


def scaled_composite_render(fields, poses_at_frame, ray: Ray,
                            scales: ScaleCombination, cfg: RenderConfig,
                            bounds: ScaleBounds | None = None,
                            generator=None) -> RenderOutput:
    """Single-ray composite render.

    With bounds given, the ray is sampled over the scene range mapped into the
    owner frame; otherwise cfg.near/far are used directly as the owner-frame
    range (the K=1 degeneracy contract).
    """
    poses = ScenePoses.from_frame(poses_at_frame)
    b = bounds if bounds is not None else scales.bounds
    denorm = scales.denorm(b) if b is not None else scales.normalized.astype(np.float64)
    if b is not None:
        near, far = scene_sampling_range(b, denorm[ray.owner_object])
    else:
        near, far = cfg.near, cfg.far
    ray0 = Ray(ray.origin, ray.direction, frame_index=0,
               owner_object=ray.owner_object, pixel=ray.pixel)
    batch = RayBatch.single(ray0, near, far)
    with torch.no_grad():
        out = composite_render_batch(fields, poses, batch, denorm, cfg, generator)
    return RenderOutput(color=out["color"][0].cpu().numpy(),
                        depth=float(out["depth"][0]),
                        segmentation=out["seg"][0].cpu().numpy(),
                        opacity=float(out["opacity"][0]))


def scene_losses(pred: dict, gt_color, gt_depth, gt_owner, scales_denorm,
                 weights=(1.0, 1.0, 0.01)):
    """Composite scene-level losses, summed over the ray batch.

    RGB: Euclidean norm of the color residual per ray. Depth: the up-to-scale
    target is multiplied by the owner's denormalized scale to land in the
    scene metric. Segmentation: cross-entropy against the one-hot mask owner.
    Returns (l_rgb, l_depth, l_seg) torch scalars.
    """
    color, depth, seg = pred["color"], pred["depth"], pred["seg"]
    dtype = color.dtype
    c_bar = torch.as_tensor(np.asarray(gt_color, dtype=np.float64), dtype=dtype).reshape(color.shape)
    d_bar = torch.as_tensor(np.asarray(gt_depth, dtype=np.float64), dtype=dtype).reshape(depth.shape)
    owner = torch.as_tensor(np.asarray(gt_owner, dtype=np.int64))
    if owner.shape[0] != seg.shape[0]:
        raise ValueError("mask/pixel count mismatch")
    sbar = torch.as_tensor(np.asarray(scales_denorm, dtype=np.float64), dtype=dtype)

    resid = color - c_bar
    l_rgb = torch.sqrt((resid * resid).sum(dim=-1) + 1e-24).sum()
    l_depth = torch.abs(depth - sbar[owner] * d_bar).sum()
    p_owner = seg.gather(1, owner[:, None]).squeeze(1).clamp_min(SEG_CLIP)
    l_seg = -(torch.log(p_owner)).sum()
    w = weights
    return l_rgb * w[0], l_depth * w[1], l_seg * w[2]


# ------------------------------------------------------------------- soft Z


def soft_z_depths_batch(fields, poses, batch: RayBatch, bounds: ScaleBounds,
                        cfg: RenderConfig):
    """Independent per-object depths along transformed rays.

    Each ray is moved into every object frame (camera centers map to camera
    centers, directions rotate) and rendered against that object alone over
    its own near/far. Absent objects (opacity < 0.01) report their far plane.
    Returns (depths [R, K] in each object's own metric, opacities [R, K]).
    """
    poses = poses if isinstance(poses, ScenePoses) else ScenePoses(poses)
    num_k = len(fields)
    _check_scene(fields, poses, np.ones(num_k), batch)
    dtype = fields[0].aabb.dtype
    rot_all, tr_all = poses.torch(dtype)
    frame = torch.as_tensor(batch.frame)
    owner = torch.as_tensor(batch.owner)
    dirs = torch.as_tensor(batch.dirs, dtype=dtype)
    rot_own = rot_all[frame, owner]
    num_r = len(batch)

    depths = torch.empty((num_r, num_k), dtype=dtype)
    opac = torch.empty((num_r, num_k), dtype=dtype)
    with torch.no_grad():
        for k in range(num_k):
            rel = rot_all[frame, k] @ rot_own.transpose(-1, -2)
            d_k = torch.einsum("rij,rj->ri", rel, dirs)
            o_k = tr_all[frame, k]
            near_k = float(bounds.near_obj[k])
            far_k = float(bounds.far_obj[k])
            t, delta = sample_segments(near_k, far_k, cfg.samples_per_ray,
                                       num_r, False, None, dtype)
            pts = o_k[:, None, :] + t[..., None] * d_k[:, None, :]
            sigma = fields[k].density(pts.reshape(-1, 3)).reshape(num_r, cfg.samples_per_ray)
            _, depth_k, op_k, _ = integrate_rays(
                sigma, delta, t, lambda sel: None, torch.zeros(3, dtype=dtype),
                far_k, float("inf"))
            depth_k = torch.where(op_k < SOFT_Z_EMPTY_OPACITY,
                                  torch.as_tensor(far_k, dtype=dtype), depth_k)
            depths[:, k] = depth_k
            opac[:, k] = op_k
    return depths.cpu().numpy().astype(np.float64), opac.cpu().numpy().astype(np.float64)


def soft_z_depths(fields, poses_at_frame, ray: Ray, bounds: ScaleBounds,
                  cfg: RenderConfig):
    """Single-ray soft-Z depths: (K depths in object metrics, K opacities)."""
    ray0 = Ray(ray.origin, ray.direction, frame_index=0,
               owner_object=ray.owner_object, pixel=ray.pixel)
    batch = RayBatch.single(ray0, cfg.near, cfg.far)
    d, o = soft_z_depths_batch(fields, ScenePoses.from_frame(poses_at_frame),
                               batch, bounds, cfg)
    return d[0], o[0]


def soft_z_segmentation(per_object_depths, scales: ScaleCombination,
                        bounds: ScaleBounds | None = None) -> np.ndarray:
    """Softmax over negated scaled depths; the nearest object gets the mass.

    Computed in float64 with max-subtraction, so equal scaled depths give
    exactly 1/K each and common additive shifts cancel exactly whenever the
    input additions are exact.
    """
    d = np.asarray(per_object_depths, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("depths must be finite")
    sbar = scales.denorm(bounds) if (bounds is not None or scales.bounds is not None) \
        else scales.normalized.astype(np.float64)
    z = -(sbar * d)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pseudo_label(seg, gt_onehot) -> int:
    """1 when the hardened segmentation picks the ground-truth object.

    Ties break toward the lowest index (first argmax).
    """
    seg = np.asarray(seg, dtype=np.float64)
    gt = np.asarray(gt_onehot, dtype=np.float64)
    return int(np.argmax(seg) == np.argmax(gt))


def labels_from_depths(depths: np.ndarray, opacities: np.ndarray,
                       denorm_combos: np.ndarray, gt_owner: np.ndarray,
                       far_scene: float) -> np.ndarray:
    """Vectorized pseudo-labels for H combos over R pooled rays.

    depths/opacities: [R, K]; denorm_combos: [H, K]. Objects absent along a
    ray are pushed to the scene far plane before ranking (their own scaled
    far plane could otherwise undercut real geometry at small scales).
    Returns labels [H, R] in {0, 1}.
    """
    scaled = _scaled_ranking_depths(depths, opacities, denorm_combos, far_scene)
    front = np.argmin(scaled, axis=2)
    return (front == np.asarray(gt_owner, dtype=np.int64)[None, :]).astype(np.int64)


def _scaled_ranking_depths(depths, opacities, denorm_combos, far_scene):
    scaled = denorm_combos[:, None, :] * depths[None, :, :]
    absent = (opacities < SOFT_Z_EMPTY_OPACITY)[None, :, :]
    return np.where(absent, far_scene, scaled)


def label_margins(depths: np.ndarray, opacities: np.ndarray,
                  denorm_combos: np.ndarray, far_scene: float) -> np.ndarray:
    """Relative gap between the two front-most scaled depths, [H, R].

    A small margin means the depth ordering (hence the pseudo-label) can flip
    under the rendered-depth noise of the frozen fields; consumers may choose
    not to train on such coin-flip pairs.
    """
    scaled = _scaled_ranking_depths(depths, opacities, denorm_combos, far_scene)
    part = np.partition(scaled, 1, axis=2)
    best, second = part[..., 0], part[..., 1]
    return (second - best) / np.maximum(best, 1e-9)


def batch_pseudo_labels(fields, poses, batch: RayBatch, combos,
                        gt_owner, bounds: ScaleBounds, cfg: RenderConfig) -> np.ndarray:
    """Labels for H scale combinations over a ray batch.

    One soft-Z pass per ray (field queries independent of H), then H cheap
    rankings. combos: list of ScaleCombination or [H, K] normalized array.
    """
    if isinstance(combos, np.ndarray):
        norm = combos.reshape(-1, len(fields))
    else:
        norm = np.stack([c.normalized for c in combos])
    if norm.shape[0] < 1:
        raise ValueError("need H >= 1")
    denorm = np.stack([denormalize_all(row, bounds) for row in norm])
    depths, opac = soft_z_depths_batch(fields, poses, batch, bounds, cfg)
    return labels_from_depths(depths, opac, denorm, gt_owner, bounds.far_scene)


def composite_labels_reference(fields, poses, batch: RayBatch, combos,
                               gt_owner, bounds: ScaleBounds,
                               cfg: RenderConfig) -> np.ndarray:
    """H full composite renders per ray, hardened to labels.

    The slow reference path for the soft-Z approximation (and the benchmark
    baseline): queries every field once per combination.
    """
    if isinstance(combos, np.ndarray):
        norm = combos.reshape(-1, len(fields))
    else:
        norm = np.stack([c.normalized for c in combos])
    owner = np.asarray(gt_owner, dtype=np.int64)
    labels = np.empty((norm.shape[0], len(batch)), dtype=np.int64)
    with torch.no_grad():
        for h, row in enumerate(norm):
            denorm = denormalize_all(row, bounds)
            near, far = scene_sampling_range(bounds, denorm[batch.owner])
            b = RayBatch(batch.origins, batch.dirs, batch.frame, batch.owner, near, far)
            out = composite_render_batch(fields, poses, b, denorm, cfg,
                                         with_colors=False)
            front = out["seg"].argmax(dim=1).cpu().numpy()
            labels[h] = (front == owner).astype(np.int64)
    return labels


def render_full_image(fields, frame_poses, intrinsics, scales_denorm,
                      bounds: ScaleBounds, cfg: RenderConfig,
                      width: int | None = None, height: int | None = None,
                      anchor: int = 0, chunk: int = 4096):
    """Composite-render a whole view, rays parametrized in the anchor frame.

    frame_poses: K camera-to-object poses for the view (training frame poses
    or poses derived via object_poses_for_camera). Returns numpy arrays:
    color [H, W, 3], depth [H, W] (scene metric), seg [H, W, K].
    """
    w = width or intrinsics.width
    h = height or intrinsics.height
    sbar = np.asarray(scales_denorm, dtype=np.float64)
    poses = ScenePoses.from_frame(frame_poses)
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    x = ((cols + 0.5) / w * intrinsics.width - intrinsics.cx) / intrinsics.fx
    y = ((rows + 0.5) / h * intrinsics.height - intrinsics.cy) / intrinsics.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    pose_a = poses.pose(0, anchor)
    dirs = d_cam @ pose_a.rotation.T
    origins = np.broadcast_to(pose_a.camera_center(), dirs.shape)
    near, far = scene_sampling_range(bounds, sbar[anchor])

    num_px = dirs.shape[0]
    num_k = len(fields)
    color = np.empty((num_px, 3), dtype=np.float32)
    depth = np.empty(num_px, dtype=np.float32)
    seg = np.empty((num_px, num_k), dtype=np.float32)
    with torch.no_grad():
        for i in range(0, num_px, chunk):
            batch = RayBatch(origins[i:i + chunk], dirs[i:i + chunk],
                             0, anchor, near, far)
            out = composite_render_batch(fields, poses, batch, sbar, cfg)
            color[i:i + chunk] = out["color"].cpu().numpy()
            depth[i:i + chunk] = out["depth"].cpu().numpy()
            seg[i:i + chunk] = out["seg"].cpu().numpy()
    return {"color": color.reshape(h, w, 3).clip(0.0, 1.0),
            "depth": depth.reshape(h, w),
            "seg": seg.reshape(h, w, num_k)}


def object_poses_for_camera(poses, frame: int, scales_denorm,
                            cam_rotation, cam_translation,
                            anchor: int = 0) -> list:
    """Per-object camera-to-object poses for a novel camera.

    The novel camera pose (cam_rotation, cam_translation) is given in the
    anchor object's frame. Under denormalized scales s̄ the implied rigid
    world places object k so that training rays are reproduced; the returned
    poses feed the standard composite path unchanged.
    """
    poses = poses if isinstance(poses, ScenePoses) else ScenePoses(poses)
    sbar = np.asarray(scales_denorm, dtype=np.float64)
    r_c = np.asarray(cam_rotation, dtype=np.float64).reshape(3, 3)
    t_c = np.asarray(cam_translation, dtype=np.float64).reshape(3)
    rot_a = poses.rotations[frame, anchor]
    tr_a = poses.translations[frame, anchor]
    out = []
    for k in range(poses.num_objects):
        rel = poses.rotations[frame, k] @ rot_a.T
        rot = rel @ r_c
        tr = (sbar[anchor] / sbar[k]) * (rel @ (t_c - tr_a)) + poses.translations[frame, k]
        out.append(Pose(rot, tr))
    return out
