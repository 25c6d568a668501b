"""HTTP service exposing validity queries, rendering, and valid-region slices.

Every endpoint is a thin wrapper over the library calls; the loaded
checkpoint is shared read-only and identical requests return identical bytes
(renders go through a small LRU cache keyed on rounded scales, view and
size).
"""

from __future__ import annotations

import io
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from . import compositor as comp
from .geometry import ScaleCombination
from .objectfield import RenderConfig
from .scalenet import predict_validity, scan_valid_region

MAX_RENDER_SIDE = 256
RENDER_CACHE_ENTRIES = 64
DEFAULT_SAMPLES = 64


@dataclass
class ServiceState:
    checkpoint: object
    manifest: dict
    ui_dir: str | None = None
    render_samples: int = DEFAULT_SAMPLES
    ready: bool = True
    request_log: list = field(default_factory=list)
    _cache: OrderedDict = field(default_factory=OrderedDict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def log(self, line: str):
        with self._lock:
            self.request_log.append(line)
            del self.request_log[:-256]

    def cache_get(self, key):
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        return None

    def cache_put(self, key, value):
        with self._lock:
            self._cache[key] = value
            self._cache.move_to_end(key)
            while len(self._cache) > RENDER_CACHE_ENTRIES:
                self._cache.popitem(last=False)


def make_state_from_paths(ckpt_path, scene_path=None, ui_dir=None) -> ServiceState:
    from .trainer import load_checkpoint
    ck = load_checkpoint(ckpt_path)
    manifest = {"objects": ck.num_objects, "frames": ck.poses.num_frames,
                "width": ck.intrinsics.width, "height": ck.intrinsics.height,
                "bounds": ck.bounds.as_dict(), "anchor": ck.header.get("anchor", 0)}
    return ServiceState(checkpoint=ck, manifest=manifest, ui_dir=ui_dir)


def _parse_scales(state: ServiceState, raw) -> tuple[np.ndarray | None, Response | None]:
    k = state.checkpoint.num_objects
    if not isinstance(raw, (list, tuple)) or len(raw) != k or \
            not all(isinstance(v, (int, float)) for v in raw):
        return None, JSONResponse({"error": f"scales must be a list of {k} numbers"},
                                  status_code=400)
    vals = np.asarray(raw, dtype=np.float64)
    if vals[0] != 1.0 or (k > 1 and not ((vals[1:] >= 0) & (vals[1:] < 1)).all()):
        return None, JSONResponse(
            {"error": "anchor must be 1 and free scales must lie in [0, 1)"},
            status_code=422)
    return vals, None


def make_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="scenescale service")
    ck = state.checkpoint

    @app.middleware("http")
    async def guard(request: Request, call_next):
        if not state.ready:
            return JSONResponse({"error": "loading"}, status_code=503)
        return await call_next(request)

    @app.get("/api/scene")
    def scene():
        return state.manifest

    @app.post("/api/validity")
    async def validity(request: Request):
        body = await request.json()
        vals, err = _parse_scales(state, body.get("scales"))
        if err is not None:
            return err
        score = predict_validity(ck.scale_net, ScaleCombination(vals))
        state.log(f"validity {vals.tolist()} -> {score:.6f}")
        return {"score": score}

    @app.post("/api/render")
    async def render(request: Request):
        body = await request.json()
        vals, err = _parse_scales(state, body.get("scales"))
        if err is not None:
            return err
        width = int(body.get("width", 128))
        height = int(body.get("height", 128))
        if width > MAX_RENDER_SIDE or height > MAX_RENDER_SIDE:
            return JSONResponse({"error": f"render larger than "
                                 f"{MAX_RENDER_SIDE}px per side"}, status_code=413)
        if width < 4 or height < 4:
            return JSONResponse({"error": "render too small"}, status_code=400)
        frame = body.get("frame", 0)
        pose_raw = body.get("pose")
        if pose_raw is None:
            if not (isinstance(frame, int) and 0 <= frame < ck.poses.num_frames):
                return JSONResponse({"error": "frame out of range"}, status_code=400)
            view_key = ("frame", frame)
        else:
            if not (isinstance(pose_raw, list) and len(pose_raw) == 12):
                return JSONResponse({"error": "pose must be 12 floats (3x4 row-major)"},
                                    status_code=400)
            view_key = ("pose", tuple(round(float(v), 6) for v in pose_raw))
        key = (tuple(np.round(vals, 4)), view_key, width, height)
        cached = state.cache_get(key)
        if cached is None:
            denorm = ScaleCombination(vals).denorm(ck.bounds)
            if pose_raw is None:
                frame_poses = ck.poses.frame(frame)
                frame_idx = frame
            else:
                from .geometry import Pose
                cam = Pose.from_matrix34(np.asarray(pose_raw, dtype=np.float64).reshape(3, 4))
                frame_idx = int(body.get("pose_frame", 0))
                frame_poses = comp.object_poses_for_camera(
                    ck.poses, frame_idx, denorm, cam.rotation, cam.translation)
            rcfg = RenderConfig(samples_per_ray=state.render_samples, jitter=False)
            out = comp.render_full_image(ck.fields, frame_poses, ck.intrinsics,
                                         denorm, ck.bounds, rcfg,
                                         width=width, height=height)
            from PIL import Image
            img = Image.fromarray((out["color"] * 255.0 + 0.5).astype(np.uint8))
            buf = io.BytesIO()
            img.save(buf, format="PNG")
            cached = buf.getvalue()
            state.cache_put(key, cached)
        state.log(f"render {key[0]} view={view_key} {width}x{height}")
        return Response(content=cached, media_type="image/png")

    @app.get("/api/valid-slice")
    def valid_slice(axis_i: int = 1, axis_j: int | None = None, res: int = 33,
                    fixed: str = ""):
        k = ck.num_objects
        fixed_map = {}
        try:
            if fixed:
                for part in fixed.split(","):
                    idx, val = part.split(":")
                    fixed_map[int(idx)] = float(val)
            axes = [axis_i] + ([axis_j] if axis_j is not None else [])
            if any(not (1 <= a < k) for a in axes):
                return JSONResponse({"error": f"axes must lie in 1..{k - 1}"},
                                    status_code=400)
            for a in range(1, k):
                if a not in axes and a not in fixed_map:
                    fixed_map[a] = 0.5
            for a in axes:
                fixed_map.pop(a, None)
            if not (2 <= res <= 257):
                return JSONResponse({"error": "res must lie in 2..257"},
                                    status_code=400)
            scan = scan_valid_region(ck.scale_net, res, fixed=fixed_map)
        except (ValueError, KeyError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)
        state.log(f"valid-slice axes={scan['axes']} res={res}")
        return {"axes": scan["axes"], "coords": scan["coords"].tolist(),
                "scores": scan["scores"].tolist(),
                "fixed": {str(i): v for i, v in scan["fixed"].items()}}

    if state.ui_dir:
        app.mount("/", StaticFiles(directory=state.ui_dir, html=True), name="ui")
    else:
        @app.get("/")
        def root():
            return {"service": "scenescale", "endpoints": [
                "/api/scene", "/api/validity", "/api/render", "/api/valid-slice"],
                "note": "explorer UI not mounted; pass --ui <dir>"}
    return app
