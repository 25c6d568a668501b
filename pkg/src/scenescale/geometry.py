"""Rigid transforms, rays, and scale-aware cross-object coordinate changes.

Every object carries its own up-to-scale coordinate frame (the reconstruction
gauge). A camera-to-object pose maps camera-frame points into that frame; two
objects in the same frame are related through the shared camera frame, where
the ratio of denormalized scales acts as a pure scalar. All functions here are
pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Pose",
    "Ray",
    "Intrinsics",
    "ScaleBounds",
    "ScaleCombination",
    "denormalize_scale",
    "denormalize_all",
    "transform_point_between_objects",
    "transform_direction_between_objects",
    "relative_rotation",
    "pixel_to_ray",
    "ray_through_pixel",
    "rotation_about_axis",
    "poses_to_bytes",
    "poses_from_bytes",
]

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-object transform: ``p_obj = R @ x_cam + t``.

    rotation : (3, 3) orthonormal, det +1
    translation : (3,) in object-space length units
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose entries must be finite")
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (max error {err:.2e})")
        det = np.linalg.det(R)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation determinant {det:.8f} != +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame point(s), shape (3,) or (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def invert(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def camera_center(self) -> np.ndarray:
        """Image of the camera origin in object space."""
        return self.translation.copy()

    def matrix34(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @staticmethod
    def from_matrix34(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return Pose(m[:, :3], m[:, 3])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera, pixel units. Principal point in (col, row) coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def as_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_fov(width: int, height: int, fov_x_deg: float) -> "Intrinsics":
        f = (width / 2.0) / np.tan(np.deg2rad(fov_x_deg) / 2.0)
        return Intrinsics(f, f, width / 2.0, height / 2.0, width, height)


@dataclass(frozen=True)
class Ray:
    """A viewing ray in one object's coordinate frame.

    direction must be unit length; owner_object is the 0-based index of the
    object whose mask contains the pixel.
    """

    origin: np.ndarray
    direction: np.ndarray
    frame_index: int = 0
    owner_object: int = 0
    pixel: tuple = (0, 0)

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction norm {n:.12f} != 1")


@dataclass(frozen=True)
class ScaleBounds:
    """Per-object and scene near/far distances along the viewing rays.

    The scene bounds must enclose every per-object bound so that the linear
    scale map stays well posed for all objects.
    """

    near_obj: np.ndarray
    far_obj: np.ndarray
    near_scene: float
    far_scene: float

    def __post_init__(self):
        near = np.atleast_1d(np.asarray(self.near_obj, dtype=np.float64))
        far = np.atleast_1d(np.asarray(self.far_obj, dtype=np.float64))
        object.__setattr__(self, "near_obj", near)
        object.__setattr__(self, "far_obj", far)
        if near.shape != far.shape:
            raise ValueError("near_obj/far_obj shape mismatch")
        if not (np.all(near > 0) and np.all(far > near)):
            raise ValueError("need 0 < near_obj < far_obj per object")
        if not (0 < self.near_scene <= near.min() + 1e-12):
            raise ValueError("near_scene must be positive and <= min near_obj")
        if not (self.far_scene >= far.max() - 1e-12):
            raise ValueError("far_scene must be >= max far_obj")

    @property
    def num_objects(self) -> int:
        return self.near_obj.shape[0]

    def as_dict(self) -> dict:
        return {"near_obj": self.near_obj.tolist(), "far_obj": self.far_obj.tolist(),
                "near_scene": float(self.near_scene), "far_scene": float(self.far_scene)}

    @staticmethod
    def from_dict(d: dict) -> "ScaleBounds":
        return ScaleBounds(np.asarray(d["near_obj"]), np.asarray(d["far_obj"]),
                           float(d["near_scene"]), float(d["far_scene"]))


def denormalize_scale(s: float, bounds: ScaleBounds, k: int = 0) -> float:
    """Map a normalized scale s in [0, 1] to object k's metric multiplier.

    Linear between the near-bound ratio (s = 0) and the far-bound ratio
    (s = 1):  (near_scene/near_obj)·(1−s) + (far_scene/far_obj)·s.
    """
    if not np.isfinite(s):
        raise ValueError("normalized scale must be finite")
    lo = bounds.near_scene / bounds.near_obj[k]
    hi = bounds.far_scene / bounds.far_obj[k]
    return float(lo * (1.0 - s) + hi * s)


def denormalize_all(normalized: np.ndarray, bounds: ScaleBounds) -> np.ndarray:
    """Vectorized denormalization over all K objects."""
    s = np.asarray(normalized, dtype=np.float64)
    lo = bounds.near_scene / bounds.near_obj
    hi = bounds.far_scene / bounds.far_obj
    return lo * (1.0 - s) + hi * s


@dataclass(frozen=True)
class ScaleCombination:
    """Normalized scales with the anchor pinned at index 0.

    normalized[0] must be exactly 1; the other entries live in [0, 1). The
    denormalized counterparts are derived on demand from ScaleBounds.
    """

    normalized: np.ndarray
    bounds: ScaleBounds | None = field(default=None, compare=False)

    def __post_init__(self):
        s = np.asarray(self.normalized, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "normalized", s)
        if s.shape[0] < 1 or s[0] != 1.0:
            raise ValueError("anchor scale normalized[0] must equal 1 exactly")
        rest = s[1:]
        if rest.size and not (np.all(rest >= 0.0) and np.all(rest < 1.0)):
            raise ValueError("non-anchor normalized scales must lie in [0, 1)")

    @property
    def num_objects(self) -> int:
        return self.normalized.shape[0]

    def denorm(self, bounds: ScaleBounds | None = None) -> np.ndarray:
        b = bounds if bounds is not None else self.bounds
        if b is None:
            raise ValueError("no ScaleBounds attached to this combination")
        out = denormalize_all(self.normalized, b)
        if not np.all(out > 0):
            raise ValueError("denormalized scales must be strictly positive")
        return out


def transform_point_between_objects(p, pose_k: Pose, pose_khat: Pose,
                                    sbar_k: float, sbar_khat: float) -> np.ndarray:
    """Map point(s) from object k's frame into object k̂'s frame.

    The scalar s̄_k/s̄_k̂ acts in the shared camera frame, between the two rigid
    transforms, so that camera centers map to camera centers for any scales
    (which the round trip k→k̂→k requires).
    """
    if sbar_k <= 0 or sbar_khat <= 0:
        raise ValueError("denormalized scales must be positive")
    x_cam = pose_k.invert().apply(p)
    return pose_khat.apply(x_cam * (sbar_k / sbar_khat))


def relative_rotation(pose_k: Pose, pose_khat: Pose) -> np.ndarray:
    """Rotation part of the k → k̂ frame change."""
    return pose_khat.rotation @ pose_k.rotation.T


def transform_direction_between_objects(d, pose_k: Pose, pose_khat: Pose) -> np.ndarray:
    """Rotate a unit direction from object k's frame into object k̂'s frame.

    Translation and scale leave directions untouched; the result is
    re-normalized to guard against rounding drift.
    """
    out = np.asarray(d, dtype=np.float64) @ relative_rotation(pose_k, pose_khat).T
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def _pixel_direction_cam(pixel, intrinsics: Intrinsics) -> np.ndarray:
    row, col = pixel
    if not (0 <= row < intrinsics.height and 0 <= col < intrinsics.width):
        raise ValueError(f"pixel {pixel} outside {intrinsics.height}x{intrinsics.width} image")
    x = (col + 0.5 - intrinsics.cx) / intrinsics.fx
    y = (row + 0.5 - intrinsics.cy) / intrinsics.fy
    d = np.array([x, y, 1.0])
    return d / np.linalg.norm(d)


def pixel_to_ray(pixel, intrinsics: Intrinsics, pose: Pose,
                 frame_index: int = 0, owner_object: int = 0) -> Ray:
    """Ray through a pixel center, given the object-to-camera extrinsic.

    ``pose`` maps object points into the camera frame, so the camera center in
    object space is −Rᵀt and directions rotate by Rᵀ.
    """
    cam_to_obj = pose.invert()
    d = cam_to_obj.rotate(_pixel_direction_cam(pixel, intrinsics))
    return Ray(cam_to_obj.translation, d / np.linalg.norm(d),
               frame_index=frame_index, owner_object=owner_object, pixel=tuple(pixel))


def ray_through_pixel(pixel, intrinsics: Intrinsics, cam_to_obj: Pose,
                      frame_index: int = 0, owner_object: int = 0) -> Ray:
    """Same as pixel_to_ray but with the camera-to-object pose used elsewhere."""
    d = cam_to_obj.rotate(_pixel_direction_cam(pixel, intrinsics))
    return Ray(cam_to_obj.camera_center(), d / np.linalg.norm(d),
               frame_index=frame_index, owner_object=owner_object, pixel=tuple(pixel))


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis and angle in radians."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    W = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * W + (1 - np.cos(angle)) * (W @ W)


def poses_to_bytes(poses) -> bytes:
    """Serialize poses as little-endian float32, row-major 3x4 [R|t] each."""
    rows = []
    for p in poses:
        rows.append(p.matrix34().astype("<f4").tobytes())
    return b"".join(rows)


def poses_from_bytes(raw: bytes) -> list:
    if len(raw) % 48 != 0:
        raise ValueError("pose buffer length must be a multiple of 48 bytes")
    out = []
    for i in range(len(raw) // 48):
        m = np.frombuffer(raw[i * 48:(i + 1) * 48], dtype="<f4").astype(np.float64)
        out.append(Pose.from_matrix34(m.reshape(3, 4)))
    return out
