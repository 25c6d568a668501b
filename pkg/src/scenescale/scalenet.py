"""Validity-score network over normalized scale combinations.

A 4x64 ReLU MLP maps the K-1 free normalized scales (the anchor is fixed at 1
and dropped from the input) to a probability that the combination is
consistent with every observed occlusion. Rejection sampling draws uniform
combinations until the score clears a threshold; a dense grid scan backs
evaluation, plots and the explorer UI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import ScaleCombination

P_CLAMP = 1e-12  # keeps the score in the open interval (0, 1) for any logit
BCE_CLIP = 1e-7


class ScaleMLP(nn.Module):
    """4 hidden layers x 64 units, sigmoid output, float64 weights."""

    def __init__(self, num_objects: int, hidden: int = 64, layers: int = 4, seed: int = 0):
        super().__init__()
        if num_objects < 2:
            raise ValueError("scale network needs at least 2 objects")
        self.num_objects = num_objects
        torch.manual_seed(seed)
        dims = [num_objects - 1] + [hidden] * layers
        blocks = []
        for i in range(layers):
            blocks += [nn.Linear(dims[i], dims[i + 1]), nn.ReLU(inplace=True)]
        blocks.append(nn.Linear(hidden, 1))
        self.net = nn.Sequential(*blocks).to(torch.float64)

    def forward(self, free_scales: torch.Tensor) -> torch.Tensor:
        """Scores for [B, K-1] free scales, shape [B]."""
        logits = self.net(free_scales.to(torch.float64)).squeeze(-1)
        return torch.sigmoid(logits).clamp(P_CLAMP, 1.0 - P_CLAMP)

    def meta(self) -> dict:
        return {"num_objects": self.num_objects,
                "hidden": self.net[0].out_features,
                "layers": (len(self.net) - 1) // 2}

    @staticmethod
    def from_meta(meta: dict) -> "ScaleMLP":
        return ScaleMLP(meta["num_objects"], hidden=meta["hidden"], layers=meta["layers"])


@dataclass
class SamplerConfig:
    validity_threshold: float = 0.95
    max_rejection_attempts: int = 10000
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.validity_threshold < 1.0):
            raise ValueError("validity threshold must lie in (0, 1)")


class SamplerStarvation(RuntimeError):
    """Raised when rejection sampling exhausts its attempt budget."""

    def __init__(self, attempts: int, threshold: float):
        super().__init__(f"no combination above threshold {threshold} "
                         f"after {attempts} attempts")
        self.attempts = attempts
        self.threshold = threshold


def predict_validity(net: ScaleMLP, scales: ScaleCombination) -> float:
    """Score of one combination; the anchor entry is dropped from the input."""
    if scales.num_objects != net.num_objects:
        raise ValueError(f"combination has {scales.num_objects} objects, "
                         f"network expects {net.num_objects}")
    with torch.no_grad():
        x = torch.as_tensor(scales.normalized[1:], dtype=torch.float64)[None]
        return float(net(x)[0])


def predict_validity_batch(net: ScaleMLP, free: np.ndarray) -> np.ndarray:
    """Scores for [B, K-1] free normalized scales."""
    x = torch.as_tensor(np.asarray(free, dtype=np.float64)).reshape(-1, net.num_objects - 1)
    with torch.no_grad():
        return net(x).cpu().numpy()


def sample_valid_combination(net: ScaleMLP, cfg: SamplerConfig,
                             rng: np.random.Generator | None = None):
    """Uniform rejection sampling over [0,1)^(K-1) until the score clears
    the threshold. Returns (ScaleCombination, attempts)."""
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    k_free = net.num_objects - 1
    chunk = 64  # score draws in small batches; attempts counted per draw
    drawn = 0
    while drawn < cfg.max_rejection_attempts:
        n = min(chunk, cfg.max_rejection_attempts - drawn)
        free = rng.random((n, k_free))
        scores = predict_validity_batch(net, free)
        hits = np.nonzero(scores > cfg.validity_threshold)[0]
        if hits.size:
            i = int(hits[0])
            drawn += i + 1
            combo = ScaleCombination(np.concatenate([[1.0], free[i]]))
            return combo, drawn
        drawn += n
    raise SamplerStarvation(drawn, cfg.validity_threshold)


def bce_loss(p: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with scores clipped to [1e-7, 1-1e-7]."""
    p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def train_step_bce(net: ScaleMLP, batch, optimizer: torch.optim.Optimizer,
                   mask=None) -> float:
    """One optimizer step on mean BCE; returns the pre-step loss.

    batch: (combos [B, K-1] or [B, K] with anchor column, labels in {0,1});
    labels may be [B] or broadcastable against the scores. An optional
    boolean mask of the labels' shape selects which pairs train (pairs whose
    ranking is a coin flip under depth noise are typically excluded).
    """
    combos, labels = batch
    x = torch.as_tensor(np.asarray(combos, dtype=np.float64))
    if x.ndim == 1:
        x = x[None]
    if x.shape[-1] == net.num_objects:
        x = x[..., 1:]
    y = torch.as_tensor(np.asarray(labels, dtype=np.float64))
    if not ((y == 0) | (y == 1)).all():
        raise ValueError("pseudo labels must be 0 or 1")
    p = net(x)
    if y.ndim == 2 and p.ndim == 1:
        p = p[:, None].expand_as(y)
    if mask is not None:
        m = torch.as_tensor(np.asarray(mask, dtype=bool))
        if not bool(m.any()):
            return 0.0
        loss = bce_loss(p[m], y[m])
    else:
        loss = bce_loss(p, y)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def make_optimizer(net: ScaleMLP, lr: float = 1e-3) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def grid_axes(resolution: int) -> np.ndarray:
    """Shared grid coordinates over [0, 1] used by scans and the oracle."""
    if resolution < 2:
        raise ValueError("grid resolution must be >= 2")
    return np.linspace(0.0, 1.0, resolution)


def scan_valid_region(net: ScaleMLP, grid_resolution: int,
                      fixed: dict[int, float] | None = None) -> dict:
    """Dense validity scores over a regular grid of the free scale axes.

    fixed maps a combination index (1..K-1; 0 is the pinned anchor) to a value
    in [0, 1]; the remaining axes are scanned and at most two may stay free.
    Returns {"axes": free object indices, "coords": grid coordinates,
    "scores": array of shape (res,)*len(axes), "fixed": {...}}.
    """
    fixed = dict(fixed or {})
    k = net.num_objects
    for idx, val in fixed.items():
        if not (1 <= idx < k):
            raise ValueError(f"fixed index {idx} out of range 1..{k - 1}")
        if not (0.0 <= val <= 1.0):
            raise ValueError("fixed values must lie in [0, 1]")
    free_axes = [i for i in range(1, k) if i not in fixed]
    if len(free_axes) == 0:
        raise ValueError("no free axes left to scan")
    if len(free_axes) > 2:
        raise ValueError(f"{len(free_axes)} free axes; a scan supports at most 2 "
                         "(pin the rest via `fixed`)")
    coords = grid_axes(grid_resolution)
    grids = np.meshgrid(*[coords] * len(free_axes), indexing="ij")
    flat = np.stack([g.reshape(-1) for g in grids], axis=-1)
    free = np.empty((flat.shape[0], k - 1))
    for j in range(1, k):
        if j in fixed:
            free[:, j - 1] = fixed[j]
    for a, axis in enumerate(free_axes):
        free[:, axis - 1] = flat[:, a]
    scores = predict_validity_batch(net, free).reshape(grids[0].shape)
    return {"axes": free_axes, "coords": coords, "scores": scores, "fixed": fixed}
