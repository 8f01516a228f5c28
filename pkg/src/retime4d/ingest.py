"""Dataset ingestion and flow-aware initialization.

Split directory layout::

    cameras.json
    split.json                  {"times": [...]} (optional for train splits)
    cam{c}/frame{t}.png|.pfm
    cam{c}/fwd{t}.flo           flow frame t -> t+1, t = 0..T-2
    cam{c}/bwd{t}.flo           flow frame t -> t-1, t = 1..T-1
    cam{c}/mask{t}.png          optional foreground mask
    points/frame{t}.ply         optional per-frame point cloud
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ContractViolation, DimensionMismatchError, MissingFileError
from .io import read_cameras, read_flo, read_image, read_ply
from .render.sh import rgb_to_sh
from .scene import Camera, Scene, TimeGrid, scene_extent

log = logging.getLogger(__name__)


@dataclass
class FrameBundle:
    """Multi-view frames and flows on the input time grid.

    ``bwd_flow[c, i]`` is the backward flow *at frame i+1* (mapping it to
    frame i), so both flow tensors have ``T - 1`` entries. ``fwd_valid`` and
    ``bwd_valid`` ([C, T-1] bool) mark flows that were actually supplied.
    """

    images: np.ndarray  # [C, T, H, W, 3]
    fwd_flow: np.ndarray  # [C, T-1, H, W, 2]
    bwd_flow: np.ndarray  # [C, T-1, H, W, 2]
    masks: np.ndarray | None = None  # [C, T, H, W] bool
    times: np.ndarray | None = None
    fwd_valid: np.ndarray | None = None
    bwd_valid: np.ndarray | None = None

    def __post_init__(self):
        c, t, h, w, ch = self.images.shape
        if ch != 3:
            raise ContractViolation("images must have 3 channels")
        for name in ("fwd_flow", "bwd_flow"):
            arr = getattr(self, name)
            if arr.shape != (c, t - 1, h, w, 2):
                raise ContractViolation(f"{name} has shape {arr.shape}, expected {(c, t - 1, h, w, 2)}")
        if self.masks is not None and self.masks.shape != (c, t, h, w):
            raise ContractViolation(f"masks have shape {self.masks.shape}, expected {(c, t, h, w)}")
        for name in ("fwd_valid", "bwd_valid"):
            v = getattr(self, name)
            v = np.ones((c, t - 1), dtype=bool) if v is None else np.asarray(v, dtype=bool)
            if v.shape != (c, t - 1):
                raise ContractViolation(f"{name} has shape {v.shape}, expected {(c, t - 1)}")
            setattr(self, name, v)

    @property
    def camera_count(self) -> int:
        return self.images.shape[0]

    @property
    def frame_count(self) -> int:
        return self.images.shape[1]

    def fwd_at(self, c: int, i: int) -> np.ndarray | None:
        """Forward flow at frame ``i`` (None at the last frame or when not supplied)."""
        return self.fwd_flow[c, i] if i < self.frame_count - 1 and self.fwd_valid[c, i] else None

    def bwd_at(self, c: int, i: int) -> np.ndarray | None:
        """Backward flow at frame ``i`` (None at the first frame or when not supplied)."""
        return self.bwd_flow[c, i - 1] if i >= 1 and self.bwd_valid[c, i - 1] else None


@dataclass
class PointCloudFrame:
    points: np.ndarray  # [N, 3]
    colors: np.ndarray  # [N, 3] in [0, 1]
    frame_index: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ContractViolation(f"point cloud for frame {self.frame_index} is empty")
        if not np.isfinite(self.points).all():
            raise ContractViolation(f"point cloud for frame {self.frame_index} has non-finite points")
        if len(self.colors) != len(self.points):
            raise ContractViolation("points and colors differ in length")


def _frame_file(cam_dir: Path, t: int) -> Path:
    png = cam_dir / f"frame{t}.png"
    pfm = cam_dir / f"frame{t}.pfm"
    if png.is_file():
        return png
    if pfm.is_file():
        return pfm
    raise MissingFileError(png, "frame image not found (.png or .pfm)")


def split_dir(path) -> Path:
    """Resolve a dataset root (with a ``train/`` subdirectory) or a split directory."""
    path = Path(path)
    if (path / "train" / "cameras.json").is_file():
        return path / "train"
    return path


def load_split_images(path, with_masks: bool = True):
    """Images, masks, cameras and times of a split (no flows or point clouds)."""
    path = Path(path)
    cameras = read_cameras(path / "cameras.json")
    cam0 = path / "cam0"
    if not cam0.is_dir():
        raise MissingFileError(cam0, "camera directory not found")
    frames = sorted(int(m.group(1)) for f in cam0.iterdir()
                    if (m := re.fullmatch(r"frame(\d+)\.(png|pfm)", f.name)))
    t = len(frames)
    if t == 0 or frames != list(range(t)):
        raise MissingFileError(cam0 / "frame0.png", "frames must be numbered 0..T-1")
    images, masks = [], []
    have_masks = with_masks and (cam0 / "mask0.png").is_file()
    for c, cam in enumerate(cameras):
        cam_dir = path / f"cam{c}"
        row, mrow = [], []
        for i in range(t):
            f = _frame_file(cam_dir, i)
            img = read_image(f)
            if img.shape != (cam.height, cam.width, 3):
                raise DimensionMismatchError(f, f"image is {img.shape}, camera expects {(cam.height, cam.width, 3)}")
            row.append(img)
            if have_masks:
                mf = cam_dir / f"mask{i}.png"
                m = read_image(mf)
                if m.ndim == 3:
                    m = m[..., 0]
                if m.shape != (cam.height, cam.width):
                    raise DimensionMismatchError(mf, f"mask is {m.shape}, expected {(cam.height, cam.width)}")
                mrow.append(m > 0.5)
        images.append(row)
        masks.append(mrow)
    times = None
    meta = path / "split.json"
    if meta.is_file():
        times = np.asarray(json.loads(meta.read_text())["times"], dtype=np.float64)
        if len(times) != t:
            raise DimensionMismatchError(meta, f"{len(times)} times listed for {t} frames")
    return (np.asarray(images, dtype=np.float32), np.asarray(masks, dtype=bool) if have_masks else None,
            cameras, times)


def load_bundle(path) -> tuple[FrameBundle, list[Camera], list[PointCloudFrame]]:
    """Load a training split: frames, bidirectional flows, masks and point clouds.

    Missing flow files are allowed; the corresponding flow is treated as
    unavailable rather than zero.
    """
    path = split_dir(path)
    images, masks, cameras, times = load_split_images(path)
    c, t, h, w, _ = images.shape
    fwd = np.zeros((c, max(t - 1, 0), h, w, 2), dtype=np.float32)
    bwd = np.zeros_like(fwd)
    fwd_ok = np.zeros((c, max(t - 1, 0)), dtype=bool)
    bwd_ok = np.zeros_like(fwd_ok)
    for ci in range(c):
        cam_dir = path / f"cam{ci}"
        for i in range(t - 1):
            for arr, ok, f in ((fwd, fwd_ok, cam_dir / f"fwd{i}.flo"), (bwd, bwd_ok, cam_dir / f"bwd{i + 1}.flo")):
                if not f.is_file():
                    log.info("flow %s not supplied", f)
                    continue
                flow = read_flo(f)
                if flow.shape != (h, w, 2):
                    raise DimensionMismatchError(f, f"flow is {flow.shape}, expected {(h, w, 2)}")
                arr[ci, i] = flow
                ok[ci, i] = True
    clouds = []
    pdir = path / "points"
    if pdir.is_dir():
        for i in range(t):
            pts, cols = read_ply(pdir / f"frame{i}.ply")
            clouds.append(PointCloudFrame(pts, cols, i))
    bundle = FrameBundle(images, fwd, bwd, masks, times, fwd_ok, bwd_ok)
    return bundle, cameras, clouds


class LiftedFlow(NamedTuple):
    v_fwd: np.ndarray  # [N, 3] world units per time unit
    v_bwd: np.ndarray
    fwd_visible: np.ndarray  # [N] bool
    bwd_visible: np.ndarray


def _unoccluded(points: np.ndarray, cam: Camera, depth_tol: float):
    """Projections and a mask of points in bounds and not hidden behind other points.

    The z-buffer is built from the points themselves and min-filtered over
    3x3 pixels because the cloud is sparser than the image.
    """
    uv, z = cam.project(points)
    ok = (z > 1e-6) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
    if depth_tol > 0 and ok.any():
        px = uv[ok].astype(np.int64)
        zbuf = np.full((cam.height, cam.width), np.inf)
        np.minimum.at(zbuf, (px[:, 1], px[:, 0]), z[ok])
        zbuf = ndimage.minimum_filter(zbuf, size=3, mode="nearest")
        front = z[ok] <= zbuf[px[:, 1], px[:, 0]] * (1.0 + depth_tol)
        ok[np.nonzero(ok)[0][~front]] = False
    return uv, z, ok


def _lift_one(points: np.ndarray, cameras: list[Camera], flows, delta_t: float, views):
    n = len(points)
    total = np.zeros((n, 3))
    hits = np.zeros(n, dtype=np.int64)
    for cam, flow, (uv, z, ok) in zip(cameras, flows, views):
        if flow is None or not ok.any():
            continue
        coords = [uv[ok, 1] - 0.5, uv[ok, 0] - 0.5]
        fu = ndimage.map_coordinates(flow[..., 0].astype(np.float64), coords, order=1, mode="nearest")
        fv = ndimage.map_coordinates(flow[..., 1].astype(np.float64), coords, order=1, mode="nearest")
        zz = z[ok]
        # displaced pixel back-projected at the point's own depth
        d_cam = np.stack([fu * zz / cam.fx, fv * zz / cam.fy, np.zeros_like(zz)], axis=1)
        total[ok] += d_cam @ cam.rotation
        hits[ok] += 1
    vis = hits > 0
    v = np.zeros((n, 3))
    v[vis] = total[vis] / hits[vis, None] / delta_t
    return v, vis


def lift_flow(points: PointCloudFrame, cameras: list[Camera], fwd_flows, bwd_flows,
              delta_t: float = 1.0, depth_tol: float = 0.05) -> LiftedFlow:
    """Average multi-view 2D flows back-projected to 3D, per point and direction.

    ``fwd_flows``/``bwd_flows`` hold one [H, W, 2] field per camera (or None
    where that direction does not exist). A camera contributes to a point
    only if the point projects in bounds and no other point of the cloud lies
    in front of it by more than ``depth_tol`` (relative depth; 0 disables the
    test). Points seen by no camera get zero velocity and a False flag.
    """
    if fwd_flows is None:
        fwd_flows = [None] * len(cameras)
    if bwd_flows is None:
        bwd_flows = [None] * len(cameras)
    views = [_unoccluded(points.points, cam, depth_tol) for cam in cameras]
    v_f, vis_f = _lift_one(points.points, cameras, fwd_flows, delta_t, views)
    v_b, vis_b = _lift_one(points.points, cameras, bwd_flows, delta_t, views)
    return LiftedFlow(v_f, v_b, vis_f, vis_b)


def combine_velocity(lifted: LiftedFlow) -> tuple[np.ndarray, np.ndarray]:
    """Average forward and negated backward estimates of the forward motion."""
    both = lifted.fwd_visible & lifted.bwd_visible
    v = np.zeros_like(lifted.v_fwd)
    v[both] = 0.5 * (lifted.v_fwd[both] - lifted.v_bwd[both])
    only_f = lifted.fwd_visible & ~lifted.bwd_visible
    only_b = lifted.bwd_visible & ~lifted.fwd_visible
    v[only_f] = lifted.v_fwd[only_f]
    v[only_b] = -lifted.v_bwd[only_b]
    return v, lifted.fwd_visible | lifted.bwd_visible


@dataclass
class InitInfo:
    candidates: int
    invisible: int
    extent: float


def init_scene(frames: list[PointCloudFrame], cameras: list[Camera], bundle: FrameBundle | None,
               budget: int, grid: TimeGrid | None = None, seed: int = 0, sh_degree: int = 1,
               use_flow: bool = True, dtype=torch.float32, return_info: bool = False):
    """Build the initial scene from per-frame point clouds and flows.

    Every interval ``[t_k, t_{k+1}]`` receives the points of both endpoint
    frames, displaced half an interval along their estimated velocity, then
    the union is thinned uniformly to ``budget`` primitives.
    """
    if budget < 1:
        raise ContractViolation(f"budget must be at least 1, got {budget}")
    if not frames:
        raise ContractViolation("no point clouds given")
    frames = sorted(frames, key=lambda f: f.frame_index)
    t = len(frames)
    if grid is None:
        grid = TimeGrid(frame_count=t)
    if grid.frame_count != t or [f.frame_index for f in frames] != list(range(t)):
        raise ContractViolation("need exactly one point cloud per grid frame")
    if t < 2:
        raise ContractViolation("need at least two frames")
    dt = grid.delta_t

    velocities, seen = [], []
    for f in frames:
        if use_flow and bundle is not None:
            fw = [bundle.fwd_at(c, f.frame_index) for c in range(len(cameras))]
            bw = [bundle.bwd_at(c, f.frame_index) for c in range(len(cameras))]
            v, vis = combine_velocity(lift_flow(f, cameras, fw, bw, dt))
        else:
            v, vis = np.zeros_like(f.points), np.ones(len(f.points), dtype=bool)
        velocities.append(v)
        seen.append(vis)

    mus, vels, cols, ks = [], [], [], []
    invisible = 0
    for k in range(t - 1):
        for f, sign in ((frames[k], 1.0), (frames[k + 1], -1.0)):
            v = velocities[f.frame_index]
            mus.append(f.points + sign * 0.5 * dt * v)
            vels.append(v)
            cols.append(f.colors)
            ks.append(np.full(len(f.points), k))
            invisible += int((~seen[f.frame_index]).sum())
    mu = np.concatenate(mus)
    vel = np.concatenate(vels)
    col = np.concatenate(cols)
    k_all = np.concatenate(ks)
    if invisible:
        log.warning("%d initialization points are visible in no camera; their velocity is zero", invisible)

    rng = np.random.default_rng(seed)
    n_total = len(mu)
    if budget < n_total:
        keep = np.sort(rng.choice(n_total, size=budget, replace=False))
        mu, vel, col, k_all = mu[keep], vel[keep], col[keep], k_all[keep]
    n = len(mu)
    extent = scene_extent(np.concatenate([f.points for f in frames]))

    dist = np.full(n, 0.01 * extent)
    for k in range(t - 1):
        sel = np.nonzero(k_all == k)[0]
        if len(sel) < 2:
            continue
        nn = min(4, len(sel))
        d, _ = cKDTree(mu[sel]).query(mu[sel], k=nn)
        dist[sel] = d[:, 1:].mean(axis=1)
    dist = np.maximum(dist, 1e-4 * extent)

    nk = (sh_degree + 1) ** 2
    sh = np.zeros((n, nk, 3))
    sh[:, 0] = rgb_to_sh(col)
    to = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
    v_t = to(vel)
    scene = Scene(
        grid=grid, sh_degree=sh_degree,
        mu_tau=torch.from_numpy(grid.interval_mid(k_all)),
        tau_l=torch.full((n,), 0.5 * dt, dtype=torch.float64),
        tau_r=torch.full((n,), 0.5 * dt, dtype=torch.float64),
        mu=to(mu), v1=v_t.clone(), v2=v_t.clone(), v3=v_t.clone(),
        log_scale=to(np.repeat(np.log(dist)[:, None], 3, axis=1)),
        rot_c0=to(np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))), rot_c1=to(np.zeros((n, 4))),
        sh=to(sh), opacity_logit=to(np.zeros(n)),
    )
    if return_info:
        return scene, InitInfo(n_total, invisible, extent)
    return scene
