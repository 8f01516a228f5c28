"""Synthetic multi-view dynamic scenes with analytic ground truth.

Scenes are textured spheres ("blobs") moving along analytic tracks and
ray-cast with supersampling, so the ground truth never comes from the
splatting renderer. Flow is the exact image-space displacement of the
surface point visible at each pixel center; uncovered pixels get zero flow.
Script time ``s`` counts script frames; the training grid keeps every
``stride``-th frame and the rest form the held-out split.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ContractViolation
from .io import write_cameras, write_flo, write_ply, write_png
from .scene import Camera

TRAJECTORIES = ("static", "linear", "circular", "spline")
PATTERNS = ("solid", "checker", "gradient")
# Slope of the checker edge ramp; above ~3 bilinear warping of frames exceeds 2/255.
CHECKER_SHARPNESS = 2.0


@dataclass
class BlobTrack:
    """A sphere moving along an analytic track; times are in script frames."""

    trajectory: str = "static"
    center: tuple = (0.0, 0.0, 0.0)  # static/linear start, circle center
    velocity: tuple = (0.0, 0.0, 0.0)  # linear, per frame
    acceleration: tuple = (0.0, 0.0, 0.0)  # linear, per frame^2
    radius: float = 0.0  # circle radius
    axis: tuple = (0.0, 0.0, 1.0)  # circle normal
    omega: float = 0.0  # radians per frame
    phase: float = 0.0
    knots: list = field(default_factory=list)  # spline knots, one per `knot_spacing` frames
    knot_spacing: float = 4.0
    size: float = 0.3
    size_amplitude: float = 0.0  # relative radius oscillation
    size_period: float = 8.0
    pattern: str = "solid"
    color: tuple = (0.8, 0.3, 0.2)
    color2: tuple = (0.2, 0.3, 0.8)
    checks: int = 4
    birth: float = -math.inf
    death: float = math.inf

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ContractViolation(f"unknown trajectory '{self.trajectory}'")
        if self.pattern not in PATTERNS:
            raise ContractViolation(f"unknown pattern '{self.pattern}'")
        if self.trajectory == "spline" and len(self.knots) < 2:
            raise ContractViolation("spline trajectory needs at least two knots")
        if not self.size > 0:
            raise ContractViolation("blob size must be positive")
        for name in ("center", "velocity", "acceleration", "axis", "color", "color2"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))
        self.knots = [tuple(float(x) for x in k) for k in self.knots]

    @property
    def is_static(self) -> bool:
        return self.trajectory == "static" and self.size_amplitude == 0

    def position(self, s: float) -> np.ndarray:
        c = np.asarray(self.center)
        if self.trajectory == "static":
            return c.copy()
        if self.trajectory == "linear":
            return c + np.asarray(self.velocity) * s + 0.5 * np.asarray(self.acceleration) * s * s
        if self.trajectory == "circular":
            n = np.asarray(self.axis) / np.linalg.norm(self.axis)
            helper = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
            e1 = np.cross(n, helper)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(n, e1)
            a = self.phase + self.omega * s
            return c + self.radius * (math.cos(a) * e1 + math.sin(a) * e2)
        return _catmull_rom_track(np.asarray(self.knots), s / self.knot_spacing)

    def size_at(self, s: float) -> float:
        if self.size_amplitude == 0:
            return self.size
        return self.size * (1 + self.size_amplitude * math.sin(2 * math.pi * s / self.size_period))

    def alive(self, s: float) -> bool:
        return self.birth <= s <= self.death

    def albedo(self, n: np.ndarray) -> np.ndarray:
        """Color of the surface point with local unit normal ``n`` [M, 3]."""
        c1, c2 = np.asarray(self.color), np.asarray(self.color2)
        if self.pattern == "solid":
            return np.broadcast_to(c1, n.shape).copy()
        if self.pattern == "gradient":
            w = 0.5 * (n[:, 1:2] + 1)
            return c1 + (c2 - c1) * w
        theta = np.arccos(np.clip(n[:, 1], -1, 1))
        phi = np.arctan2(n[:, 2], n[:, 0])
        # checker cells with a linear ramp across edges so warped frames stay consistent
        wave = np.sin(theta * self.checks) * np.sin(phi * self.checks)
        w = 0.5 - 0.5 * np.clip(CHECKER_SHARPNESS * wave, -1.0, 1.0)
        return c1 + (c2 - c1) * w[:, None]


def _catmull_rom_track(knots: np.ndarray, x: float) -> np.ndarray:
    """Uniform Catmull-Rom through ``knots`` (ends extended linearly), knot i at x = i."""
    k = len(knots)
    pts = np.concatenate([[2 * knots[0] - knots[1]], knots, [2 * knots[-1] - knots[-2]]])
    seg = int(np.clip(math.floor(x), 0, k - 2))
    u = x - seg
    p0, p1, p2, p3 = pts[seg : seg + 4]
    return 0.5 * (2 * p1 + (p2 - p0) * u + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u * u
                  + (3 * p1 - p0 - 3 * p2 + p3) * u ** 3)


@dataclass
class CameraRing:
    count: int = 8
    radius: float = 4.0
    elevation: float = 0.6
    arc_degrees: float = 120.0
    look_at: tuple = (0.0, 0.0, 0.0)
    focal_scale: float = 1.2  # fx = focal_scale * width

    def __post_init__(self):
        if self.count < 2:
            raise ContractViolation("need at least two cameras")

    def cameras(self, width: int, height: int) -> list[Camera]:
        target = np.asarray(self.look_at, dtype=np.float64)
        half = math.radians(self.arc_degrees) / 2
        out = []
        for a in np.linspace(-half, half, self.count):
            eye = target + np.array([self.radius * math.sin(a), self.elevation, -self.radius * math.cos(a)])
            f = self.focal_scale * width
            out.append(Camera.look_at(eye, target, (0, 1, 0), f, f, width, height))
        return out


@dataclass
class SceneScript:
    name: str
    blobs: list[BlobTrack]
    cameras: CameraRing = field(default_factory=CameraRing)
    frames: int = 17
    stride: int = 2
    width: int = 128
    height: int = 128
    supersample: int = 4
    points_per_frame: int = 4000
    seed: int = 0

    def __post_init__(self):
        if not self.blobs:
            raise ContractViolation("script has no blobs")
        if self.frames < 2 or self.stride < 1:
            raise ContractViolation("need frames >= 2 and stride >= 1")
        for b in self.blobs:
            for s in (-1.0, self.frames + 0.0):
                if not np.isfinite(b.position(s)).all():
                    raise ContractViolation(f"blob trajectory is not finite at frame {s}")

    @property
    def train_frames(self) -> list[int]:
        return list(range(0, self.frames, self.stride))

    @property
    def heldout_frames(self) -> list[int]:
        train = set(self.train_frames)
        last = self.train_frames[-1]
        return [s for s in range(self.frames) if s not in train and s < last]

    def engine_time(self, s: float) -> float:
        return s / self.stride

    def script_time(self, t: float) -> float:
        return t * self.stride

    def make_cameras(self) -> list[Camera]:
        return self.cameras.cameras(self.width, self.height)

    def nearest_blob(self, points: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Index of the closest live blob surface to each point and that distance."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        best = np.full(len(pts), -1)
        dist = np.full(len(pts), np.inf)
        for j, b in enumerate(self.blobs):
            if not b.alive(s):
                continue
            d = np.abs(np.linalg.norm(pts - b.position(s), axis=1) - b.size_at(s))
            closer = d < dist
            best[closer], dist[closer] = j, d[closer]
        return best, dist

    @classmethod
    def from_dict(cls, data: dict) -> "SceneScript":
        data = dict(data)
        blobs = [BlobTrack(**b) for b in data.pop("blobs", [])]
        cams = CameraRing(**data.pop("cameras", {}))
        return cls(blobs=blobs, cameras=cams, **data)

    @classmethod
    def from_toml(cls, path) -> "SceneScript":
        return cls.from_dict(tomllib.loads(Path(path).read_text()))

    def to_toml(self) -> str:
        def val(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, str):
                return json.dumps(v)
            if isinstance(v, (list, tuple)):
                return "[" + ", ".join(val(x) for x in v) + "]"
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return repr(v)

        lines = [f"{k} = {val(getattr(self, k))}" for k in
                 ("name", "frames", "stride", "width", "height", "supersample", "points_per_frame", "seed")]
        lines.append("\n[cameras]")
        lines += [f"{k} = {val(v)}" for k, v in vars(self.cameras).items()]
        for b in self.blobs:
            lines.append("\n[[blobs]]")
            lines += [f"{k} = {val(v)}" for k, v in vars(b).items()]
        return "\n".join(lines) + "\n"


class _Hits:
    """Nearest ray-sphere intersections for a batch of rays."""

    def __init__(self, script: SceneScript, origin: np.ndarray, dirs: np.ndarray, s: float):
        m = len(dirs)
        self.depth = np.full(m, np.inf)
        self.blob = np.full(m, -1)
        self.normal = np.zeros((m, 3))
        for j, b in enumerate(script.blobs):
            if not b.alive(s):
                continue
            c, r = b.position(s), b.size_at(s)
            oc = origin - c
            half_b = dirs @ oc
            disc = half_b * half_b - (oc @ oc - r * r)
            ok = disc > 0
            t = np.full(m, np.inf)
            t[ok] = -half_b[ok] - np.sqrt(disc[ok])
            t[t <= 1e-9] = np.inf
            closer = t < self.depth
            self.depth[closer] = t[closer]
            self.blob[closer] = j
            self.normal[closer] = (origin + t[closer, None] * dirs[closer] - c) / r

    def colors(self, script: SceneScript) -> np.ndarray:
        out = np.zeros((len(self.blob), 3))
        for j, b in enumerate(script.blobs):
            sel = self.blob == j
            if sel.any():
                out[sel] = b.albedo(self.normal[sel])
        return out


def _pixel_rays(cam: Camera, offsets: np.ndarray):
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width].astype(np.float64)
    px = (xs[..., None] + offsets[None, None, :, 0]).reshape(-1)
    py = (ys[..., None] + offsets[None, None, :, 1]).reshape(-1)
    return cam.pixel_rays(px, py)


def render_frame(script: SceneScript, cam: Camera, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Supersampled image [H, W, 3] and coverage [H, W] at script time ``s``."""
    n = script.supersample
    g = (np.arange(n) + 0.5) / n
    offsets = np.stack(np.meshgrid(g, g, indexing="xy"), axis=-1).reshape(-1, 2)
    hits = _Hits(script, cam.center, _pixel_rays(cam, offsets), s)
    col = hits.colors(script).reshape(cam.height, cam.width, n * n, 3).mean(axis=2)
    cov = (hits.blob >= 0).reshape(cam.height, cam.width, n * n).mean(axis=2)
    return col, cov


def surface_flow(script: SceneScript, cam: Camera, s: float, s_to: float) -> np.ndarray:
    """Exact flow [H, W, 2] from time ``s`` to ``s_to`` of the surface seen at each pixel center."""
    hits = _Hits(script, cam.center, _pixel_rays(cam, np.array([[0.5, 0.5]])), s)
    flow = np.zeros((len(hits.blob), 2))
    uv0 = np.zeros((len(hits.blob), 2))
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width].astype(np.float64)
    uv0[:, 0], uv0[:, 1] = xs.reshape(-1) + 0.5, ys.reshape(-1) + 0.5
    for j, b in enumerate(script.blobs):
        sel = hits.blob == j
        if not sel.any():
            continue
        if np.array_equal(b.position(s), b.position(s_to)) and b.size_at(s) == b.size_at(s_to):
            continue  # exactly zero, not reprojection round-off
        moved = b.position(s_to) + b.size_at(s_to) * hits.normal[sel]
        uv1, _ = cam.project(moved)
        flow[sel] = uv1 - uv0[sel]
    return flow.reshape(cam.height, cam.width, 2)


def surface_points(script: SceneScript, cams: list[Camera], s: float, count: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Surface points visible at pixel centers of any camera, thinned to ``count``."""
    pts, cols = [], []
    for cam in cams:
        dirs = _pixel_rays(cam, np.array([[0.5, 0.5]]))
        hits = _Hits(script, cam.center, dirs, s)
        sel = hits.blob >= 0
        pts.append(cam.center + hits.depth[sel, None] * dirs[sel])
        cols.append(hits.colors(script)[sel])
    pts, cols = np.concatenate(pts), np.concatenate(cols)
    if len(pts) == 0:
        raise ContractViolation(f"no blob is visible at frame {s}")
    if len(pts) > count:
        keep = np.sort(rng.choice(len(pts), size=count, replace=False))
        pts, cols = pts[keep], cols[keep]
    return pts, cols


def generate(script: SceneScript, out_dir, stride: int | None = None) -> Path:
    """Write the train and held-out splits of ``script`` under ``out_dir``."""
    if stride is not None:
        script = SceneScript(**{**vars(script), "stride": stride})
    out = Path(out_dir)
    cams = script.make_cameras()
    train_frames, held = script.train_frames, script.heldout_frames
    rng = np.random.default_rng(script.seed)
    for split, frames in (("train", train_frames), ("heldout", held)):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        write_cameras(d / "cameras.json", cams)
        times = [script.engine_time(s) for s in frames]
        (d / "split.json").write_text(json.dumps({"times": times, "script_frames": frames}, indent=1))
        for c, cam in enumerate(cams):
            cdir = d / f"cam{c}"
            cdir.mkdir(exist_ok=True)
            for i, s in enumerate(frames):
                img, cov = render_frame(script, cam, s)
                write_png(cdir / f"frame{i}.png", img)
                write_png(cdir / f"mask{i}.png", (cov >= 0.5).astype(np.float64))
                if split != "train":
                    continue
                if i + 1 < len(frames):
                    write_flo(cdir / f"fwd{i}.flo", surface_flow(script, cam, s, frames[i + 1]))
                if i >= 1:
                    write_flo(cdir / f"bwd{i}.flo", surface_flow(script, cam, s, frames[i - 1]))
        if split == "train":
            (d / "points").mkdir(exist_ok=True)
            for i, s in enumerate(frames):
                pts, cols = surface_points(script, cams, s, script.points_per_frame, rng)
                write_ply(d / "points" / f"frame{i}.ply", pts, cols)
    meta = {"name": script.name, "frames": script.frames, "stride": script.stride,
            "train_frames": train_frames, "heldout_frames": held}
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
    (out / "script.toml").write_text(script.to_toml())
    return out


def standard_suite() -> list[SceneScript]:
    """Five scenarios: accelerating motion, circular motion, static+dynamic mix,
    visibility change and textured deformation."""
    accelerating = SceneScript("accelerating", [
        BlobTrack("linear", center=(-1.1, -0.3, 0.0), velocity=(0.05, 0.045, 0.0),
                  acceleration=(0.0085, -0.003, 0.0), size=0.3, pattern="gradient",
                  color=(0.9, 0.5, 0.1), color2=(0.2, 0.8, 0.3)),
        BlobTrack("static", center=(0.3, 0.55, 0.6), size=0.35, color=(0.25, 0.35, 0.85)),
    ], seed=1)
    circular = SceneScript("circular", [
        BlobTrack("circular", center=(0.0, 0.0, 0.0), radius=0.8, axis=(0.0, 0.0, 1.0),
                  omega=0.275, phase=0.3, size=0.28, pattern="gradient",
                  color=(0.95, 0.8, 0.2), color2=(0.8, 0.1, 0.3)),
        BlobTrack("static", center=(0.0, 0.0, 0.5), size=0.25, color=(0.3, 0.7, 0.9)),
    ], seed=2)
    static_dynamic = SceneScript("static_dynamic", [
        BlobTrack("static", center=(-0.55, -0.35, 0.4), size=0.5, pattern="checker",
                  color=(0.85, 0.85, 0.8), color2=(0.35, 0.4, 0.75), checks=3),
        BlobTrack("static", center=(0.6, -0.25, 0.3), size=0.45, pattern="gradient",
                  color=(0.2, 0.7, 0.35), color2=(0.9, 0.9, 0.3)),
        BlobTrack("static", center=(0.05, 0.55, 0.6), size=0.4, color=(0.8, 0.35, 0.3)),
        BlobTrack("spline", knots=[(-0.9, 0.1, -0.6), (-0.3, 0.5, -0.7), (0.4, 0.2, -0.6),
                                   (0.7, -0.4, -0.7), (0.1, -0.7, -0.6)],
                  size=0.2, color=(0.95, 0.6, 0.1)),
    ], seed=3)
    visibility = SceneScript("visibility", [
        BlobTrack("static", center=(0.0, 0.0, -0.6), size=0.45, pattern="gradient",
                  color=(0.3, 0.35, 0.9), color2=(0.6, 0.8, 0.95)),
        BlobTrack("spline", knots=[(0.0, 0.0, 0.4), (0.35, 0.25, 0.3), (0.8, 0.45, 0.2),
                                   (1.0, 0.2, 0.0), (1.05, -0.3, -0.1)],
                  size=0.25, color=(0.95, 0.4, 0.2)),
        BlobTrack("linear", center=(-0.9, 0.6, 0.0), velocity=(0.0, -0.05, 0.0), size=0.2,
                  color=(0.3, 0.9, 0.4), birth=6.0),
    ], seed=4)
    textured = SceneScript("textured_deform", [
        BlobTrack("spline", knots=[(-0.9, -0.3, 0.0), (-0.3, 0.35, 0.1), (0.35, 0.4, 0.0),
                                   (0.85, -0.1, -0.1), (0.6, -0.6, 0.0)],
                  size=0.38, size_amplitude=0.2, size_period=10.0, pattern="checker",
                  color=(0.9, 0.85, 0.2), color2=(0.2, 0.25, 0.7), checks=4),
    ], seed=5)
    return [accelerating, circular, static_dynamic, visibility, textured]


def mean_motion_px(script: SceneScript) -> float:
    """Mean flow magnitude over covered pixels between consecutive train frames."""
    cams = script.make_cameras()
    frames = script.train_frames
    total, count = 0.0, 0
    for cam in cams:
        for a, b in zip(frames[:-1], frames[1:]):
            f = surface_flow(script, cam, a, b)
            mag = np.linalg.norm(f, axis=-1)
            moving = mag > 1e-9
            total += mag[moving].sum()
            count += int(moving.sum())
    return total / max(count, 1)


def static_area_fraction(script: SceneScript) -> float:
    """Fraction of pixels (over all cameras) whose color is identical in every frame."""
    cams = script.make_cameras()
    fractions = []
    for cam in cams:
        imgs = [render_frame(script, cam, s)[0] for s in range(script.frames)]
        stack = np.stack(imgs)
        same = np.all(np.abs(stack - stack[0]) < 1e-12, axis=(0, 3))
        fractions.append(same.mean())
    return float(np.mean(fractions))
