"""Two-stage joint optimization.

Stage 1 fits each object's field independently on its own masked pixels
(colors plus up-to-scale depth, no cross-object terms). Stage 2 alternates R
rounds of (a) scale-network training on soft-Z pseudo-labels with the fields
frozen and (b) field training on composite scene losses under scale
combinations drawn through the rejection sampler. Field optimizer state
persists across rounds (rebuilt only when grids are upsampled); the scale
network's optimizer is reset each phase since its target distribution moves.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np
import torch

from . import compositor as comp
from .geometry import ScaleBounds, denormalize_all
from .objectfield import RenderConfig, VMField, render_rays, upsample_field
from .scalenet import (SamplerConfig, SamplerStarvation, ScaleMLP,
                       make_optimizer, predict_validity_batch,
                       sample_valid_combination, train_step_bce)
from .scenegen import SceneBundle


@dataclass
class TrainConfig:
    rounds: int = 5
    stage1_iters: int = 1000
    stage2_field_iters: int = 1000
    stage2_scalenet_iters: int = 1000
    stage1_weights: tuple = (1.0, 1.0)           # rgb, depth
    stage2_weights: tuple = (1.0, 1.0, 0.01)     # rgb, depth, seg
    lr: float = 1e-3
    grid_lr_multiplier: float = 20.0   # factor grids learn faster than MLPs
    rays_per_batch: int = 1024
    label_rays_per_batch: int = 1024
    label_pool_size: int = 16384
    label_samples_per_ray: int = 192     # finer quadrature for pooled depths
    label_margin: float = 0.03           # abstain from near-tie rankings
    relevance_opacity: float = 0.9       # solid-presence cut for the pool mix
    ambiguity_band: tuple = (0.02, 0.9)  # limbo opacity: ray left out of pool
    pseudo_label_combos: int = 64                # H
    samples_per_ray: int = 64
    start_resolution: int = 64
    final_resolution: int = 128
    upsample_schedule: tuple = ("stage1:0.5", "round:3")
    density_channels: int = 16
    app_channels: int = 48
    validity_threshold: float = 0.95
    warmup_threshold_start: float = 0.5
    max_rejection_attempts: int = 20000
    # label-batch mix: equalized boundary rays / uniform relevant / stratified
    label_mix: tuple = (0.4, 0.3, 0.3)
    label_eq_floor: float = 0.0          # cap on threshold-bin upweighting
    skip_bootstrap: bool = False
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("need at least one alternation round")
        if min(self.stage1_weights) < 0 or min(self.stage2_weights) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        kw = dict(d)
        for key in ("stage1_weights", "stage2_weights", "label_mix",
                    "upsample_schedule", "ambiguity_band"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return TrainConfig(**kw)


# ----------------------------------------------------------------- ray plumbing


def interior_mask(masks: np.ndarray, radius: int = 1) -> np.ndarray:
    """Pixels whose whole (2r+1)-neighborhood shares their owner id.

    Mask-boundary pixels mix objects at the learned fields' resolution, so
    their rendered depths are unreliable; label batches avoid them.
    """
    out = np.ones_like(masks, dtype=bool)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if dr == 0 and dc == 0:
                continue
            shifted = np.roll(np.roll(masks, dr, axis=1), dc, axis=2)
            out &= shifted == masks
    out[:, :radius] = out[:, -radius:] = False
    out[:, :, :radius] = out[:, :, -radius:] = False
    return out


class RaySampler:
    """Mask-stratified (frame, pixel) draws with per-object quotas."""

    def __init__(self, bundle: SceneBundle, interior_only: bool = False,
                 interior_radius: int = 1):
        self.bundle = bundle
        self.num_objects = bundle.num_objects
        keep = interior_mask(bundle.masks, interior_radius) if interior_only \
            else np.ones_like(bundle.masks, dtype=bool)
        k_idx = []
        for k in range(self.num_objects):
            n, r, c = np.nonzero((bundle.masks == k) & keep)
            if n.size == 0:
                n, r, c = np.nonzero(bundle.masks == k)
            if n.size == 0:
                raise ValueError(f"object {k} has an empty mask across all frames")
            k_idx.append(np.stack([n, r, c], axis=1))
        self.per_object = k_idx
        self._dirs_cache = self._pixel_dirs(bundle.intrinsics)

    @staticmethod
    def _pixel_dirs(intr):
        cols, rows = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
        x = (cols + 0.5 - intr.cx) / intr.fx
        y = (rows + 0.5 - intr.cy) / intr.fy
        d = np.stack([x, y, np.ones_like(x)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def _assemble(self, picks: np.ndarray):
        b = self.bundle
        n, r, c = picks[:, 0], picks[:, 1], picks[:, 2]
        owner = b.masks[n, r, c]
        d_cam = self._dirs_cache[r, c]
        rot = np.stack([b.poses[ni][ki].rotation for ni, ki in zip(n, owner)])
        origins = np.stack([b.poses[ni][ki].translation for ni, ki in zip(n, owner)])
        dirs = np.einsum("rij,rj->ri", rot, d_cam)
        gt_color = b.frames[n, r, c].astype(np.float64) / 255.0
        gt_depth = b.depths[owner, n, r, c].astype(np.float64)
        return n, r, c, owner, origins, dirs, gt_color, gt_depth

    def stratified(self, count: int, rng: np.random.Generator,
                   objects=None) -> np.ndarray:
        """Pixel picks [count, 3] with equal per-object quotas."""
        objs = list(objects) if objects is not None else list(range(self.num_objects))
        share = [count // len(objs)] * len(objs)
        for i in range(count - sum(share)):
            share[i % len(objs)] += 1
        rows = []
        for k, c in zip(objs, share):
            pool = self.per_object[k]
            rows.append(pool[rng.integers(0, pool.shape[0], size=c)])
        picks = np.concatenate(rows, axis=0)
        return picks[rng.permutation(picks.shape[0])]

    def batch(self, picks: np.ndarray, sampling_range=None):
        """RayBatch in owner frames plus ground-truth targets."""
        n, r, c, owner, origins, dirs, gt_color, gt_depth = self._assemble(picks)
        b = self.bundle
        if sampling_range is None:
            near = b.bounds.near_obj[owner]
            far = b.bounds.far_obj[owner]
        else:
            near, far = sampling_range
            near = np.broadcast_to(near, owner.shape)
            far = np.broadcast_to(far, owner.shape)
        batch = comp.RayBatch(origins, dirs, n, owner, near, far,
                              pixels=np.stack([r, c], axis=1))
        return batch, {"color": gt_color, "depth": gt_depth, "owner": owner}


# ----------------------------------------------------------------- field setup


def object_aabbs(bundle: SceneBundle, pad: float = 0.08, stride: int = 2):
    """Per-object bounding boxes from unprojected masked depths."""
    num_k = bundle.num_objects
    intr = bundle.intrinsics
    dirs_px = RaySampler._pixel_dirs(intr)
    aabbs = []
    for k in range(num_k):
        pts = []
        for n in range(bundle.num_frames):
            rr, cc = np.nonzero(bundle.masks[n] == k)
            if rr.size == 0:
                continue
            rr, cc = rr[::stride], cc[::stride]
            d = bundle.depths[k, n, rr, cc].astype(np.float64)
            pose = bundle.poses[n][k]
            p = pose.translation + d[:, None] * (dirs_px[rr, cc] @ pose.rotation.T)
            pts.append(p)
        pts = np.concatenate(pts, axis=0)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.maximum(hi - lo, 1e-3)
        aabbs.append(np.stack([lo - pad * span, hi + pad * span]))
    return aabbs


def resolution_ladder(cfg: TrainConfig):
    """Geometric resolution steps, one per upsample event plus the start."""
    steps = len(cfg.upsample_schedule)
    if steps == 0 or cfg.final_resolution <= cfg.start_resolution:
        return [cfg.start_resolution] * (steps + 1)
    ratio = (cfg.final_resolution / cfg.start_resolution) ** (1.0 / steps)
    ladder = [cfg.start_resolution]
    for i in range(1, steps):
        ladder.append(int(round(cfg.start_resolution * ratio ** i)))
    ladder.append(cfg.final_resolution)
    return ladder


def prepare_fields(bundle: SceneBundle, cfg: TrainConfig):
    aabbs = object_aabbs(bundle)
    return [VMField(resolution=cfg.start_resolution,
                    density_channels=cfg.density_channels,
                    app_channels=cfg.app_channels,
                    aabb=aabbs[k], seed=cfg.seed * 131 + k)
            for k in range(bundle.num_objects)]


def anchor_object(bundle: SceneBundle) -> int:
    """Index of the anchor: largest mask area summed over frames."""
    areas = np.bincount(bundle.masks.reshape(-1), minlength=bundle.num_objects)
    return int(np.argmax(areas))


def reorder_bundle(bundle: SceneBundle, anchor: int) -> SceneBundle:
    """Swap the anchor object to index 0 (no-op when already there)."""
    if anchor == 0:
        return bundle
    order = [anchor] + [k for k in range(bundle.num_objects) if k != anchor]
    inv = np.argsort(order)
    masks = inv[bundle.masks]
    poses = [[row[k] for k in order] for row in bundle.poses]
    depths = bundle.depths[order]
    b = bundle.bounds
    bounds = ScaleBounds(b.near_obj[order], b.far_obj[order], b.near_scene, b.far_scene)
    gt = bundle.gt
    if gt is not None:
        from .scenegen import GaugeSpec, GroundTruth
        gt = GroundTruth(gauge=GaugeSpec(gt.gauge.lam[order] / gt.gauge.lam[anchor]),
                         full_depths=gt.full_depths[order],
                         true_normalized=gt.true_normalized[order],
                         oracle=None, heldout=gt.heldout)
    return SceneBundle(frames=bundle.frames, masks=masks, poses=poses,
                       depths=depths, bounds=bounds, intrinsics=bundle.intrinsics,
                       manifest=dict(bundle.manifest, anchor=0), gt=gt)


# -------------------------------------------------------------------- stage 1


def _param_groups(field: VMField, lr: float, grid_mult: float):
    grids, nets = [], []
    for name, p in field.named_parameters():
        (grids if ("planes" in name or "lines" in name) else nets).append(p)
    return [{"params": grids, "lr": lr * grid_mult}, {"params": nets, "lr": lr}]


def _field_optimizer(fields, cfg: TrainConfig):
    groups = []
    for f in fields:
        groups += _param_groups(f, cfg.lr, cfg.grid_lr_multiplier)
    return torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)


def stage1_bootstrap(fields, bundle: SceneBundle, cfg: TrainConfig,
                     sampler: RaySampler | None = None, rng=None,
                     upsample_iters=(), report=None):
    """Independent per-object fitting on masked rays; returns loss curve."""
    sampler = sampler or RaySampler(bundle)
    rng = rng or np.random.default_rng(cfg.seed)
    w_rgb, w_depth = cfg.stage1_weights
    num_k = bundle.num_objects
    opts = [torch.optim.Adam(_param_groups(f, cfg.lr, cfg.grid_lr_multiplier),
                             betas=(0.9, 0.999), eps=1e-8) for f in fields]
    rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray, jitter=False)
    per_obj = max(cfg.rays_per_batch // max(num_k, 1), 16)
    curve = []
    for it in range(cfg.stage1_iters):
        if it in upsample_iters:
            res = upsample_iters[it]
            for k in range(num_k):
                fields[k] = upsample_field(fields[k], res)
                opts[k] = torch.optim.Adam(
                    _param_groups(fields[k], cfg.lr, cfg.grid_lr_multiplier),
                    betas=(0.9, 0.999), eps=1e-8)
            if report is not None:
                report["upsample_events"].append({"phase": "stage1", "iter": it,
                                                  "resolution": res})
        total = 0.0
        bg = rng.random(3)  # random background: surfaces cannot stay translucent
        for k in range(num_k):
            picks = sampler.stratified(per_obj, rng, objects=[k])
            batch, gt = sampler.batch(picks)
            out = render_rays(fields[k], batch.origins, batch.dirs, rcfg,
                              near=batch.near, far=batch.far, background=bg)
            resid = out["color"] - torch.as_tensor(gt["color"], dtype=out["color"].dtype)
            l_rgb = torch.sqrt((resid * resid).sum(dim=-1) + 1e-24).sum()
            l_depth = torch.abs(out["depth"] -
                                torch.as_tensor(gt["depth"], dtype=out["depth"].dtype)).sum()
            loss = w_rgb * l_rgb + w_depth * l_depth
            if loss.requires_grad and (w_rgb > 0 or w_depth > 0):
                opts[k].zero_grad(set_to_none=True)
                loss.backward()
                opts[k].step()
            total += float(loss.detach())
        curve.append(total / max(num_k, 1))
    return fields, curve


# ------------------------------------------------------------------ label pool


class LabelPool:
    """Frozen-field soft-Z depths for a pool of rays, with sampling weights.

    Relevance (two or more objects present along the ray) comes from the
    learned opacities; for two-object scenes each relevant ray's flip
    threshold is inverted into normalized scale space and rays are weighted
    inversely to the local threshold density, which concentrates supervision
    where the decision boundary actually lives.
    """

    def __init__(self, fields, bundle: SceneBundle, cfg: TrainConfig,
                 sampler: RaySampler, rng: np.random.Generator):
        self.bundle = bundle
        pool = min(cfg.label_pool_size,
                   bundle.num_frames * bundle.frames.shape[1] * bundle.frames.shape[2])
        label_sampler = RaySampler(bundle, interior_only=True)
        picks = label_sampler.stratified(pool, rng)
        batch, gt = sampler.batch(picks)
        rcfg = RenderConfig(samples_per_ray=cfg.label_samples_per_ray, jitter=False)
        poses = comp.ScenePoses(bundle.poses)
        depths = np.empty((pool, bundle.num_objects))
        opac = np.empty((pool, bundle.num_objects))
        chunk = 4096
        for i in range(0, pool, chunk):
            sub = comp.RayBatch(batch.origins[i:i + chunk], batch.dirs[i:i + chunk],
                                batch.frame[i:i + chunk], batch.owner[i:i + chunk],
                                batch.near[i:i + chunk], batch.far[i:i + chunk])
            d, o = comp.soft_z_depths_batch(fields, poses, sub, bundle.bounds, rcfg)
            depths[i:i + chunk] = d
            opac[i:i + chunk] = o
        self.depths = depths
        self.opacities = opac
        self.owner = gt["owner"]
        present = opac >= comp.SOFT_Z_EMPTY_OPACITY
        # a ray only supervises the scale net if the fields are trustworthy
        # along it: the owner must be solid and its learned depth must agree
        # with that ray's own training depth
        own_idx = np.arange(pool)
        d_own = depths[own_idx, self.owner]
        o_own = opac[own_idx, self.owner]
        consistent = (o_own >= 0.3) & \
            (np.abs(d_own - gt["depth"]) <= 0.05 * np.maximum(gt["depth"], 1e-6))
        lo_band, hi_band = cfg.ambiguity_band
        limbo = ((opac > lo_band) & (opac < hi_band)).any(axis=1)
        consistent &= ~limbo
        solid = (opac >= cfg.relevance_opacity).sum(axis=1) >= 2
        self.relevant = np.nonzero(solid & consistent)[0]
        self.consistent = np.nonzero(consistent)[0]
        if self.consistent.size == 0:
            self.consistent = np.arange(pool)
        self._eq_floor = cfg.label_eq_floor
        self.eq_weights = self._equalized_weights(bundle, cfg)

    def _equalized_weights(self, bundle, cfg):
        if bundle.num_objects != 2 or self.relevant.size == 0:
            return None
        b = bundle.bounds
        d = self.depths[self.relevant]
        sbar_anchor = b.far_scene / b.far_obj[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            target = sbar_anchor * d[:, 0] / np.maximum(d[:, 1], 1e-9)
        lo = b.near_scene / b.near_obj[1]
        hi = b.far_scene / b.far_obj[1]
        s_star = (target - lo) / (hi - lo)
        # only rays whose flip threshold lies inside the sampled range carry
        # boundary information; flattening the threshold histogram focuses the
        # batch where the decision boundary actually lives
        in_range = (s_star > 0.02) & (s_star < 0.98)
        if not in_range.any():
            return None
        bins = np.clip((np.clip(s_star, 0.0, 1.0) * 32).astype(np.int64), 0, 31)
        hist = np.bincount(bins[in_range], minlength=32).astype(np.float64)
        floor = self._eq_floor * in_range.sum()
        w = np.where(in_range,
                     1.0 / np.maximum(hist[bins], max(floor, 1.0)), 0.0)
        total = w.sum()
        return w / total if total > 0 else None

    def sample(self, count: int, mix: tuple, rng: np.random.Generator) -> np.ndarray:
        """Pool indices for one label batch under the configured mix."""
        n_eq = int(count * mix[0]) if self.eq_weights is not None else 0
        n_rel = int(count * mix[1]) + (int(count * mix[0]) - n_eq)
        if self.relevant.size == 0:
            n_eq = n_rel = 0
        n_any = count - n_eq - n_rel
        parts = []
        if n_eq:
            parts.append(rng.choice(self.relevant, size=n_eq, p=self.eq_weights))
        if n_rel:
            parts.append(self.relevant[rng.integers(0, self.relevant.size, size=n_rel)])
        if n_any:
            parts.append(self.consistent[rng.integers(0, self.consistent.size, size=n_any)])
        return np.concatenate(parts)

    def labels(self, idx: np.ndarray, combos_norm: np.ndarray,
               margin: float = 0.0):
        """Pseudo-labels [H, B] for pooled rays idx under normalized combos;
        with a positive margin also returns the keep-mask of pairs whose
        ranking clears it."""
        denorm = np.stack([denormalize_all(row, self.bundle.bounds)
                           for row in combos_norm])
        far = self.bundle.bounds.far_scene
        labels = comp.labels_from_depths(self.depths[idx], self.opacities[idx],
                                         denorm, self.owner[idx], far)
        if margin <= 0:
            return labels
        keep = comp.label_margins(self.depths[idx], self.opacities[idx],
                                  denorm, far) >= margin
        return labels, keep


# -------------------------------------------------------------------- stage 2


def _threshold_at(cfg: TrainConfig, round_idx: int, it: int, total: int) -> float:
    if round_idx > 0:
        return cfg.validity_threshold
    frac = it / max(total - 1, 1)
    return max(cfg.warmup_threshold_start,
               cfg.warmup_threshold_start +
               (cfg.validity_threshold - cfg.warmup_threshold_start) * frac)


def stage2_alternate(fields, scale_net: ScaleMLP, bundle: SceneBundle,
                     cfg: TrainConfig, sampler: RaySampler | None = None,
                     rng=None, report=None):
    """R rounds of (scale-net on pseudo-labels) / (fields on scene losses)."""
    sampler = sampler or RaySampler(bundle)
    rng = rng or np.random.default_rng(cfg.seed + 1)
    report = report if report is not None else new_report(cfg)
    num_k = bundle.num_objects
    poses = comp.ScenePoses(bundle.poses)
    rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray, jitter=False)
    ladder = resolution_ladder(cfg)
    stage2_ups = {int(ev.split(":")[1]): ladder[i + 1]
                  for i, ev in enumerate(cfg.upsample_schedule)
                  if ev.startswith("round:")}
    field_opt = _field_optimizer(fields, cfg)
    w = cfg.stage2_weights

    for r in range(cfg.rounds):
        if (r + 1) in stage2_ups:
            res = stage2_ups[r + 1]
            for k in range(num_k):
                fields[k] = upsample_field(fields[k], res)
            field_opt = _field_optimizer(fields, cfg)
            report["upsample_events"].append({"phase": "stage2", "round": r + 1,
                                              "resolution": res})
            poses = comp.ScenePoses(bundle.poses)

        # (a) scale network on pseudo-labels, fields frozen
        t0 = time.time()
        pool = LabelPool(fields, bundle, cfg, sampler, rng)
        snet_opt = make_optimizer(scale_net, cfg.lr)
        snet_curve = []
        for it in range(cfg.stage2_scalenet_iters):
            idx = pool.sample(cfg.label_rays_per_batch, cfg.label_mix, rng)
            combos = np.concatenate(
                [np.ones((cfg.pseudo_label_combos, 1)),
                 rng.random((cfg.pseudo_label_combos, num_k - 1))], axis=1)
            labels, keep = pool.labels(idx, combos, margin=cfg.label_margin)
            snet_curve.append(train_step_bce(scale_net, (combos, labels),
                                             snet_opt, mask=keep))
        t1 = time.time()

        # (b) fields on composite scene losses, scale net frozen
        field_curve = {"rgb": [], "depth": [], "seg": []}
        attempts_total = 0
        fallback_draws = 0
        for it in range(cfg.stage2_field_iters):
            thresh = _threshold_at(cfg, r, it, cfg.stage2_field_iters)
            try:
                combo, attempts = sample_valid_combination(
                    scale_net, SamplerConfig(validity_threshold=thresh,
                                             max_rejection_attempts=cfg.max_rejection_attempts),
                    rng)
            except SamplerStarvation:
                if r > 0:
                    raise SamplerStarvation(cfg.max_rejection_attempts, thresh) \
                        from RuntimeError(f"round {r + 1}, field iteration {it}")
                # warm-up round: the net may still be confidently wrong, so
                # fall back to the best-scoring uniform draw and keep moving
                free = rng.random((256, num_k - 1))
                scores = predict_validity_batch(scale_net, free)
                from .geometry import ScaleCombination
                combo = ScaleCombination(np.concatenate([[1.0], free[int(scores.argmax())]]))
                attempts = 256
                fallback_draws += 1
            attempts_total += attempts
            denorm = combo.denorm(bundle.bounds)
            picks = sampler.stratified(cfg.rays_per_batch, rng)
            batch, gt = sampler.batch(picks)
            near, far = comp.scene_sampling_range(bundle.bounds, denorm[batch.owner])
            batch = comp.RayBatch(batch.origins, batch.dirs, batch.frame,
                                  batch.owner, near, far)
            out = comp.composite_render_batch(fields, poses, batch, denorm, rcfg)
            l_rgb, l_depth, l_seg = comp.scene_losses(
                out, gt["color"], gt["depth"], gt["owner"], denorm, weights=w)
            loss = l_rgb + l_depth + l_seg
            if loss.requires_grad and max(w) > 0:
                field_opt.zero_grad(set_to_none=True)
                loss.backward()
                field_opt.step()
            field_curve["rgb"].append(float(l_rgb.detach()))
            field_curve["depth"].append(float(l_depth.detach()))
            field_curve["seg"].append(float(l_seg.detach()))
        t2 = time.time()

        report["rounds"].append({
            "round": r + 1,
            "scalenet_loss": snet_curve,
            "field_loss": field_curve,
            "acceptance_rate": cfg.stage2_field_iters / max(attempts_total, 1),
            "sampler_attempts": attempts_total,
            "warmup_fallback_draws": fallback_draws,
            "wallclock_scalenet_s": t1 - t0,
            "wallclock_fields_s": t2 - t1,
            "relevant_pool_rays": int(pool.relevant.size),
        })
    return fields, scale_net, report


# ------------------------------------------------------------------ full run


def new_report(cfg: TrainConfig) -> dict:
    return {"config": asdict(cfg), "stage1_loss": [], "rounds": [],
            "upsample_events": [], "wallclock_s": {}}


def train_full(bundle: SceneBundle, cfg: TrainConfig,
               checkpoint_path=None, report_path=None):
    """Stage 1 + stage 2; returns (fields, scale_net, report).

    Deterministic mode pins torch to one thread so repeated runs with the
    same seed produce bit-identical checkpoints.
    """
    if cfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    anchor = anchor_object(bundle)
    bundle = reorder_bundle(bundle, anchor)
    sampler = RaySampler(bundle)
    fields = prepare_fields(bundle, cfg)
    scale_net = ScaleMLP(bundle.num_objects, seed=cfg.seed + 9) \
        if bundle.num_objects >= 2 else None
    report = new_report(cfg)
    report["anchor_original_index"] = anchor

    ladder = resolution_ladder(cfg)
    s1_ups = {}
    for i, ev in enumerate(cfg.upsample_schedule):
        kind, val = ev.split(":")
        if kind == "stage1":
            s1_ups[int(float(val) * cfg.stage1_iters)] = ladder[i + 1]

    t0 = time.time()
    if not cfg.skip_bootstrap:
        fields, curve = stage1_bootstrap(fields, bundle, cfg, sampler, rng,
                                         upsample_iters=s1_ups, report=report)
        report["stage1_loss"] = curve
    else:
        # the resolution ladder still applies so ablations end at the same size
        if s1_ups:
            res = max(s1_ups.values())
            fields = [upsample_field(f, res) for f in fields]
    t1 = time.time()
    if scale_net is not None:
        fields, scale_net, report = stage2_alternate(
            fields, scale_net, bundle, cfg, sampler, rng, report)
        snap_scale_net_float32(scale_net)
    t2 = time.time()
    report["wallclock_s"] = {"stage1": t1 - t0, "stage2": t2 - t1, "total": t2 - t0}
    report["phase_counts"] = {"scalenet_phases": cfg.rounds if scale_net else 0,
                              "field_phases": cfg.rounds if scale_net else 0}

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, fields, scale_net, bundle, cfg)
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=2))
    return fields, scale_net, report


def snap_scale_net_float32(net: ScaleMLP | None):
    """Round weights to float32 so the in-memory net matches the checkpoint
    byte stream (the on-disk format stores float32 tensors)."""
    if net is None:
        return
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(p.to(torch.float32).to(torch.float64))


# ----------------------------------------------------------------- checkpoint


_MAGIC = b"SSCK"


def save_checkpoint(path, fields, scale_net, bundle: SceneBundle,
                    cfg: TrainConfig | None = None):
    """Unified checkpoint: JSON header + concatenated little-endian float32
    tensors in the declared order."""
    sections = []
    payload = bytearray()

    def add(kind, name, meta, tensors):
        decl = []
        for tname, arr in tensors:
            a = np.ascontiguousarray(arr, dtype="<f4")
            decl.append({"name": tname, "shape": list(a.shape)})
            payload.extend(a.tobytes())
        sections.append({"kind": kind, "name": name, "meta": meta, "tensors": decl})

    for k, f in enumerate(fields):
        tensors = [(n, p.detach().cpu().numpy()) for n, p in f.named_parameters()]
        add("field", f"object{k:02d}", f.meta(), tensors)
    if scale_net is not None:
        tensors = [(n, p.detach().cpu().numpy()) for n, p in scale_net.named_parameters()]
        add("scalenet", "scalenet", scale_net.meta(), tensors)
    pose_arr = np.stack([[p.matrix34().reshape(-1) for p in row] for row in bundle.poses])
    add("poses", "poses", {"frames": bundle.num_frames,
                           "objects": bundle.num_objects}, [("track", pose_arr)])

    header = {
        "format_version": 1,
        "bounds": bundle.bounds.as_dict(),
        "intrinsics": bundle.intrinsics.as_dict(),
        "anchor": 0,
        "objects": bundle.num_objects,
        "frames": bundle.num_frames,
        "config": asdict(cfg) if cfg is not None else None,
        "sections": sections,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        fh.write(bytes(payload))


@dataclass
class Checkpoint:
    fields: list
    scale_net: ScaleMLP | None
    bounds: ScaleBounds
    poses: comp.ScenePoses
    intrinsics: object
    header: dict

    @property
    def num_objects(self):
        return len(self.fields)


def load_checkpoint(path) -> Checkpoint:
    from .geometry import Intrinsics, Pose
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a checkpoint file")
        hlen = int(np.frombuffer(fh.read(4), dtype=np.uint32)[0])
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()

    offset = 0

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count,
                            offset=offset).reshape(shape)
        offset += count * 4
        return arr

    fields, scale_net, poses = [], None, None
    for sec in header["sections"]:
        tensors = {t["name"]: take(t["shape"]) for t in sec["tensors"]}
        if sec["kind"] == "field":
            f = VMField.from_meta(sec["meta"])
            with torch.no_grad():
                for n, p in f.named_parameters():
                    p.copy_(torch.as_tensor(tensors[n].copy(), dtype=p.dtype))
            fields.append(f)
        elif sec["kind"] == "scalenet":
            scale_net = ScaleMLP.from_meta(sec["meta"])
            with torch.no_grad():
                for n, p in scale_net.named_parameters():
                    p.copy_(torch.as_tensor(tensors[n].copy()).to(torch.float64))
        elif sec["kind"] == "poses":
            track = tensors["track"].astype(np.float64)
            poses = comp.ScenePoses(
                [[Pose.from_matrix34(track[n, k].reshape(3, 4))
                  for k in range(track.shape[1])] for n in range(track.shape[0])])
    return Checkpoint(fields=fields, scale_net=scale_net,
                      bounds=ScaleBounds.from_dict(header["bounds"]),
                      poses=poses,
                      intrinsics=Intrinsics(**header["intrinsics"]),
                      header=header)
