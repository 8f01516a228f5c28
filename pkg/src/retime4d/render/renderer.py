"""Time-evaluated projection and compositing of 4D primitives.

Per-primitive math (trajectory, rotation, projection, SH color) runs in
torch so autograd chains it; pixel compositing goes through the hand-written
kernels in :mod:`retime4d.render.rasterize`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
import torch

from ..errors import ContractViolation
from ..scene import OPTIMIZABLE_FIELDS, Camera, Scene, covariance_at
from ..spline import CP, control_points, position_at
from ..temporal import TemporalConfig, temporal_weight
from .rasterize import rasterize
from .sh import eval_sh

NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3


class GroupKind(Enum):
    ALL = "all"
    PREV = "prev"
    NEXT = "next"
    INTERVAL = "interval"


@dataclass(frozen=True)
class Group:
    """Primitive subset: everything, the groups on either side of frame ``index``,
    or the primitives whose own interval is ``index``."""

    kind: GroupKind = GroupKind.ALL
    index: int | None = None

    @classmethod
    def all(cls) -> "Group":
        return cls()

    @classmethod
    def prev_of(cls, i: int) -> "Group":
        return cls(GroupKind.PREV, i)

    @classmethod
    def next_of(cls, i: int) -> "Group":
        return cls(GroupKind.NEXT, i)

    @classmethod
    def interval(cls, k: int) -> "Group":
        return cls(GroupKind.INTERVAL, k)


class FlowDir(Enum):
    FWD = "fwd"
    BWD = "bwd"


# (start, end) control points of the projected displacement per group/direction
FLOW_PAIRS = {
    (GroupKind.PREV, FlowDir.FWD): (CP.P2, CP.P3),
    (GroupKind.PREV, FlowDir.BWD): (CP.P2, CP.P1),
    (GroupKind.NEXT, FlowDir.FWD): (CP.P1, CP.P2),
    (GroupKind.NEXT, FlowDir.BWD): (CP.P1, CP.P0),
}


@dataclass(frozen=True)
class RenderRequest:
    camera: Camera
    t: float
    group: Group = field(default_factory=Group)
    flow: FlowDir | None = None  # None renders RGB
    compensate: bool = False


class RenderOutput(NamedTuple):
    color: torch.Tensor  # [H, W, 3] RGB or [H, W, 2] flow in pixels
    alpha: torch.Tensor  # [H, W]


@dataclass
class GradientBuffer:
    """Per-primitive gradients for every optimizable field."""

    grads: dict[str, torch.Tensor]

    @classmethod
    def zeros_like(cls, scene: Scene) -> "GradientBuffer":
        return cls({n: torch.zeros_like(getattr(scene, n)) for n in OPTIMIZABLE_FIELDS})

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.grads[name]

    def flat(self) -> torch.Tensor:
        return torch.cat([self.grads[n].reshape(-1) for n in OPTIMIZABLE_FIELDS])


def group_members(scene: Scene, group: Group, tol: float = 1e-6) -> torch.Tensor:
    """Boolean membership mask of ``group`` over the scene's primitives."""
    n = len(scene)
    if group.kind is GroupKind.ALL:
        return torch.ones(n, dtype=torch.bool)
    g = scene.grid
    if group.kind is GroupKind.INTERVAL:
        return scene.interval_index == group.index
    i = group.index
    if group.kind is GroupKind.PREV:
        if not 1 <= i <= g.frame_count - 1:
            raise ContractViolation(f"PrevOf({i}) does not exist on a {g.frame_count}-frame grid")
        lo, hi = g.time(i - 1), g.time(i)
    else:
        if not 0 <= i <= g.frame_count - 2:
            raise ContractViolation(f"NextOf({i}) does not exist on a {g.frame_count}-frame grid")
        lo, hi = g.time(i), g.time(i + 1)
    left = scene.mu_tau - scene.tau_l
    right = scene.mu_tau + scene.tau_r
    return (left <= lo + tol) & (right >= hi - tol)


def project_gaussian(camera: Camera, mean3: torch.Tensor, cov3: torch.Tensor):
    """First-order (EWA) projection of world Gaussians.

    Returns ``(mean2 [N, 2], cov2 [N, 2, 2], depth [N])``; ``cov2`` includes the
    ``0.3 px^2`` isotropic floor. Points behind the near plane are the caller's
    to cull (their depth is returned as-is).
    """
    dtype = mean3.dtype
    R = torch.as_tensor(camera.rotation, dtype=dtype)
    t = torch.as_tensor(camera.translation, dtype=dtype)
    xc = mean3 @ R.T + t
    x, y, z = xc.unbind(-1)
    fx, fy = camera.fx, camera.fy
    mean2 = torch.stack([fx * x / z + camera.cx, fy * y / z + camera.cy], dim=-1)
    zero = torch.zeros_like(z)
    J = torch.stack(
        [torch.stack([fx / z, zero, -fx * x / (z * z)], -1),
         torch.stack([zero, fy / z, -fy * y / (z * z)], -1)], -2)
    M = J @ R
    cov2 = M @ cov3 @ M.transpose(-1, -2)
    cov2 = cov2 + COV2D_FLOOR * torch.eye(2, dtype=dtype)
    return mean2, cov2, z


def project_points(camera: Camera, x: torch.Tensor) -> torch.Tensor:
    R = torch.as_tensor(camera.rotation, dtype=x.dtype)
    t = torch.as_tensor(camera.translation, dtype=x.dtype)
    xc = x @ R.T + t
    return torch.stack([camera.fx * xc[..., 0] / xc[..., 2] + camera.cx,
                        camera.fy * xc[..., 1] / xc[..., 2] + camera.cy], dim=-1)


class _Splats(NamedTuple):
    idx: torch.Tensor
    means2d: torch.Tensor
    conics: torch.Tensor
    opacities: torch.Tensor
    radii: np.ndarray
    depths: np.ndarray
    sub: object


class _Subset:
    """Field view of a scene restricted to ``idx`` (keeps autograd links)."""

    def __init__(self, scene: Scene, idx: torch.Tensor):
        for name in ("mu_tau", "tau_l", "tau_r", "interval_index") + OPTIMIZABLE_FIELDS:
            setattr(self, name, getattr(scene, name)[idx])


def _splats(scene: Scene, camera: Camera, t: float, weight: torch.Tensor, linear: bool) -> _Splats:
    idx = torch.nonzero(weight > 0).reshape(-1)
    sub = _Subset(scene, idx)
    x = position_at(sub, t, scene.grid, linear)
    R = torch.as_tensor(camera.rotation, dtype=x.dtype)
    depth = (x.detach() @ R.T)[:, 2] + float(camera.translation[2])
    front = torch.nonzero(depth > NEAR_PLANE).reshape(-1)
    if len(front) < len(idx):
        idx = idx[front]
        sub = _Subset(scene, idx)
        x = x[front]
    cov3 = covariance_at(sub, t)
    mean2, cov2, z = project_gaussian(camera, x, cov3)
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    conics = torch.stack([c / det, -b / det, a / det], dim=-1)
    with torch.no_grad():
        half = 0.5 * (a - c)
        lam = 0.5 * (a + c) + torch.sqrt(half * half + b * b)
        radii = (3.0 * torch.sqrt(lam) * (1 + 1e-6)).cpu().numpy().astype(np.float64)
    opac = torch.sigmoid(sub.opacity_logit) * weight[idx].to(x.dtype)
    sub.x = x
    return _Splats(idx, mean2, conics, opac, radii, z.detach().cpu().numpy(), sub)


def _colors(scene: Scene, sp: _Splats, camera: Camera) -> torch.Tensor:
    center = torch.as_tensor(camera.center, dtype=sp.sub.x.dtype)
    d = sp.sub.x - center
    d = d / d.norm(dim=-1, keepdim=True)
    return eval_sh(sp.sub.sh, d, scene.sh_degree)


def _flow_feature(scene: Scene, sp: _Splats, camera: Camera, kind: GroupKind, direction: FlowDir,
                  linear: bool) -> torch.Tensor:
    start, end = FLOW_PAIRS[(kind, direction)]
    cp = control_points(sp.sub, scene.grid, linear)
    return project_points(camera, cp[end]) - project_points(camera, cp[start])


def _weights(scene: Scene, t: float, group: Group, cfg: TemporalConfig, compensate: bool):
    w = temporal_weight(scene, t, scene.grid, cfg, compensate=compensate)
    if group.kind is not GroupKind.ALL:
        w = torch.where(group_members(scene, group), w, torch.zeros_like(w))
    return w


def _check_request(scene: Scene, req: RenderRequest):
    on_grid = scene.grid.frame_index(req.t) is not None
    if req.flow is not None and (req.group.kind not in (GroupKind.PREV, GroupKind.NEXT) or not on_grid):
        raise ContractViolation("flow rendering needs a PrevOf/NextOf group at a grid time")
    if req.compensate and not on_grid:
        raise ContractViolation("compensated rendering needs a grid time")


def render(scene: Scene, req: RenderRequest, cfg: TemporalConfig | None = None,
           linear: bool = False) -> RenderOutput:
    """Render RGB (or a flow map when ``req.flow`` is set) for one request."""
    _check_request(scene, req)
    if req.flow is not None:
        return render_flow(scene, req.camera, req.t, req.group, req.flow, cfg, linear)
    cfg = cfg or TemporalConfig.for_grid(scene.grid)
    cam = req.camera
    w = _weights(scene, req.t, req.group, cfg, req.compensate)
    sp = _splats(scene, cam, req.t, w, linear)
    feats = _colors(scene, sp, cam)
    img, alpha = rasterize(sp.means2d, sp.conics, sp.opacities, feats, sp.radii, sp.depths,
                           cam.width, cam.height)
    return RenderOutput(img, alpha)


def render_flow(scene: Scene, camera: Camera, t_i: float, group: Group, direction: FlowDir,
                cfg: TemporalConfig | None = None, linear: bool = False,
                trajectory_only: bool = False) -> RenderOutput:
    """Composite projected control-point displacements as a 2-channel flow map.

    Uses the compensated alpha weights of the group at frame ``t_i``. With
    ``trajectory_only`` the backward pass treats those weights as constants,
    so gradients reach the trajectory through the displacements alone.
    """
    if group.kind not in (GroupKind.PREV, GroupKind.NEXT) or scene.grid.frame_index(t_i) is None:
        raise ContractViolation("flow rendering needs a PrevOf/NextOf group at a grid time")
    cfg = cfg or TemporalConfig.for_grid(scene.grid)
    w = _weights(scene, t_i, group, cfg, True)
    sp = _splats(scene, camera, t_i, w, linear)
    feats = _flow_feature(scene, sp, camera, group.kind, direction, linear)
    img, alpha = rasterize(sp.means2d, sp.conics, sp.opacities, feats, sp.radii, sp.depths,
                           camera.width, camera.height, n_geo=0 if trajectory_only else None)
    return RenderOutput(img, alpha)


class GroupRender(NamedTuple):
    rgb: torch.Tensor
    alpha: torch.Tensor
    fwd: torch.Tensor | None
    bwd: torch.Tensor | None


def render_group_with_flow(scene: Scene, camera: Camera, t_i: float, group: Group,
                           cfg: TemporalConfig, linear: bool = False,
                           directions=(FlowDir.FWD, FlowDir.BWD)) -> GroupRender:
    """Compensated RGB plus flow maps of one group in a single compositing pass.

    Equivalent to separate :func:`render` and ``render_flow(...,
    trajectory_only=True)`` calls.
    """
    w = _weights(scene, t_i, group, cfg, True)
    sp = _splats(scene, camera, t_i, w, linear)
    parts = [_colors(scene, sp, camera)]
    for d in directions:
        parts.append(_flow_feature(scene, sp, camera, group.kind, d, linear))
    feats = torch.cat(parts, dim=-1)
    img, alpha = rasterize(sp.means2d, sp.conics, sp.opacities, feats, sp.radii, sp.depths,
                           camera.width, camera.height, n_geo=3)
    flows = {d: img[..., 3 + 2 * j: 5 + 2 * j] for j, d in enumerate(directions)}
    return GroupRender(img[..., :3], alpha, flows.get(FlowDir.FWD), flows.get(FlowDir.BWD))


def render_backward(scene: Scene, req: RenderRequest, upstream_color: torch.Tensor,
                    upstream_alpha: torch.Tensor | None = None,
                    cfg: TemporalConfig | None = None, linear: bool = False) -> GradientBuffer:
    """Gradients of ``<upstream, render(req)>`` for all optimizable fields.

    Temporal opacity acts as a constant weight; temporal fields get no slot.
    """
    work = scene.clone()
    for name in OPTIMIZABLE_FIELDS:
        getattr(work, name).requires_grad_(True)
    out = render(work, req, cfg, linear)
    if tuple(upstream_color.shape) != tuple(out.color.shape):
        raise ContractViolation(
            f"upstream gradient shape {tuple(upstream_color.shape)} does not match render "
            f"output {tuple(out.color.shape)}")
    total = (out.color * upstream_color.to(out.color.dtype)).sum()
    if upstream_alpha is not None:
        if tuple(upstream_alpha.shape) != tuple(out.alpha.shape):
            raise ContractViolation("upstream alpha gradient shape does not match render output")
        total = total + (out.alpha * upstream_alpha.to(out.alpha.dtype)).sum()
    params = [getattr(work, n) for n in OPTIMIZABLE_FIELDS]
    if not total.requires_grad:
        return GradientBuffer.zeros_like(scene)
    grads = torch.autograd.grad(total, params, allow_unused=True)
    return GradientBuffer({n: torch.zeros_like(p) if g is None else g
                           for n, p, g in zip(OPTIMIZABLE_FIELDS, params, grads)})
