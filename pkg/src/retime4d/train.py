"""Training: triple rendering, bidirectional flow supervision and the optimization loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .density import StretchConfig, dynamic_stretch, grow, inject_noise, mcmc_relocate
from .errors import ContractViolation, NonFiniteLossError
from .ingest import FrameBundle
from .losses import flow_loss, regularizers, rgb_loss
from .optim import Adam
from .render import FlowDir, Group, GroupKind, RenderRequest, render, render_group_with_flow
from .scene import OPTIMIZABLE_FIELDS, Camera, Scene, scene_extent
from .temporal import TemporalConfig

log = logging.getLogger(__name__)

# Fields whose learning rate is multiplied by the scene extent.
_SPATIAL_FIELDS = ("mu", "v1", "v2", "v3")

# Velocities move a full interval per unit, so they train 10x faster than positions.
DEFAULT_LR = {
    "mu": 1.6e-4,
    "v1": 1.6e-3,
    "v2": 1.6e-3,
    "v3": 1.6e-3,
    "log_scale": 5e-3,
    "rot_c0": 1e-3,
    "rot_c1": 1e-3,
    "sh": 2.5e-3,
    "opacity_logit": 5e-2,
}

LOSS_COLUMNS = ("iter", "total", "rgb_all", "rgb_prev", "rgb_next", "flow", "reg")
EVENT_COLUMNS = ("iter", "stretched_count", "pruned_count", "relocated_count")


@dataclass
class TrainConfig:
    total_iters: int = 2000
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    flow_lr_init: float = 0.5
    flow_lr_final: float = 1e-6
    flow_decay_start_iter: int = 1200
    global_decay_start_iter: int = 1800
    lambda_dssim: float = 0.2
    lambda_flow: float = 0.05
    lambda_opacity_reg: float = 0.01
    lambda_scale_reg: float = 0.1
    stretch_every: int = 300
    relocate_every: int = 100
    min_opacity: float = 0.01
    gamma: float = 0.005
    seed: int = 0
    # ablation switches
    linear_trajectory: bool = False
    triple_rendering: bool = True
    stretching: bool = True
    flow_init: bool = True
    # density control
    budget: int = 3000
    refill: bool = True
    position_noise: bool = False
    color_tol: float = 0.25
    vel_tol: float = 0.005
    nn_radius: float = 0.01
    hold_stretched: bool = True  # stretched primitives keep zero velocity
    sh_lr_rest_ratio: float = 1.0 / 20.0

    def __post_init__(self):
        lr = dict(DEFAULT_LR)
        lr.update(self.lr or {})
        unknown = set(lr) - set(OPTIMIZABLE_FIELDS)
        if unknown:
            raise ContractViolation(f"unknown learning-rate groups: {sorted(unknown)}")
        self.lr = lr
        for name in ("lambda_dssim", "lambda_flow", "lambda_opacity_reg", "lambda_scale_reg"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be nonnegative")
        for name in ("stretch_every", "relocate_every"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be at least 1")
        if self.total_iters < 0:
            raise ContractViolation("total_iters must be nonnegative")
        if self.total_iters > 0 and not self.flow_decay_start_iter < self.total_iters:
            raise ContractViolation("flow_decay_start_iter must be below total_iters")
        if not 0 < self.flow_lr_final <= self.flow_lr_init:
            raise ContractViolation("need 0 < flow_lr_final <= flow_lr_init")

    def scaled(self, total_iters: int) -> "TrainConfig":
        """Copy with every iteration-based cadence rescaled to ``total_iters``."""
        f = total_iters / self.total_iters
        r = lambda x: max(1, int(round(x * f)))
        return replace(self, total_iters=total_iters, lr=dict(self.lr),
                       flow_decay_start_iter=min(r(self.flow_decay_start_iter), max(total_iters - 1, 0)),
                       global_decay_start_iter=r(self.global_decay_start_iter),
                       stretch_every=r(self.stretch_every), relocate_every=r(self.relocate_every))

    @property
    def stretch(self) -> StretchConfig:
        return StretchConfig(self.color_tol, self.vel_tol, self.nn_radius, settle=self.hold_stretched)

    @classmethod
    def from_toml(cls, path, **overrides) -> "TrainConfig":
        """Read a TOML file whose keys are field names; ``overrides`` win."""
        data = tomllib.loads(Path(path).read_text()) if path is not None else {}
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ContractViolation(f"unknown config keys in {path}: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def _exp_interp(a: float, b: float, frac: float) -> float:
    frac = min(max(frac, 0.0), 1.0)
    return math.exp((1 - frac) * math.log(a) + frac * math.log(b))


def lr_schedule(it: int, cfg: TrainConfig, extent: float = 1.0) -> dict[str, float]:
    """Learning rates at iteration ``it``; key ``"flow"`` is the flow-supervision rate.

    The flow rate holds until ``flow_decay_start_iter`` then decays
    exponentially to ``flow_lr_final`` at the last iteration; every other
    group holds until ``global_decay_start_iter`` then decays to 1% of its
    initial value.
    """
    last = max(cfg.total_iters - 1, 1)
    span = max(last - cfg.flow_decay_start_iter, 1)
    flow = cfg.flow_lr_init if it < cfg.flow_decay_start_iter else _exp_interp(
        cfg.flow_lr_init, cfg.flow_lr_final, (it - cfg.flow_decay_start_iter) / span)
    gspan = max(last - cfg.global_decay_start_iter, 1)
    g = 1.0 if it < cfg.global_decay_start_iter else _exp_interp(
        1.0, 0.01, (it - cfg.global_decay_start_iter) / gspan)
    out = {n: cfg.lr[n] * g * (extent if n in _SPATIAL_FIELDS else 1.0) for n in OPTIMIZABLE_FIELDS}
    out["flow"] = flow
    return out


@dataclass
class StepTerms:
    """Loss terms of one training step (tensors keep the graph)."""

    rgb_all: torch.Tensor
    rgb_prev: torch.Tensor
    rgb_next: torch.Tensor
    flow: torch.Tensor
    renders: int = 0
    flow_terms: int = 0


def _target(bundle: FrameBundle, cam_id: int, i: int, dtype) -> torch.Tensor:
    return torch.from_numpy(bundle.images[cam_id, i]).to(dtype)


def _zero(scene: Scene) -> torch.Tensor:
    return torch.zeros((), dtype=scene.dtype)


def _flow_targets(bundle: FrameBundle, cam_id: int, i: int):
    return {FlowDir.FWD: bundle.fwd_at(cam_id, i), FlowDir.BWD: bundle.bwd_at(cam_id, i)}


def _adjacent_groups(grid, t_i: int) -> list[Group]:
    groups = []
    if t_i >= 1:
        groups.append(Group.prev_of(t_i))
    if t_i <= grid.frame_count - 2:
        groups.append(Group.next_of(t_i))
    return groups


def triple_render_step(scene: Scene, bundle: FrameBundle, t_i: int, camera: Camera, cam_id: int,
                       cfg: TrainConfig, flow_weight: float = 0.0) -> StepTerms:
    """Photometric terms at grid frame ``t_i`` plus, when ``flow_weight > 0``, flow terms.

    Interior frames render all primitives and each adjacent group alone with
    compensated opacity (three renders); boundary frames render once without
    compensation. Flow maps of the groups share the compositing pass of
    their RGB render; their gradient only reaches the trajectories.
    """
    grid = scene.grid
    if not 0 <= t_i < grid.frame_count:
        raise ContractViolation(f"frame {t_i} is not on the grid")
    tcfg = TemporalConfig.for_grid(grid, cfg.gamma)
    target = _target(bundle, cam_id, t_i, scene.dtype)
    t = grid.time(t_i)
    out = render(scene, RenderRequest(camera, t), tcfg, cfg.linear_trajectory)
    terms = StepTerms(rgb_loss(out.color, target, lambda_dssim=cfg.lambda_dssim),
                      _zero(scene), _zero(scene), _zero(scene), renders=1)
    interior = 0 < t_i < grid.frame_count - 1
    with_flow = flow_weight > 0
    gt = _flow_targets(bundle, cam_id, t_i)
    flow_sum = _zero(scene)
    for group in _adjacent_groups(grid, t_i):
        photometric = interior and cfg.triple_rendering
        dirs = tuple(d for d in (FlowDir.FWD, FlowDir.BWD) if with_flow and gt[d] is not None)
        if not photometric and not dirs:
            continue
        gr = render_group_with_flow(scene, camera, t, group, tcfg, cfg.linear_trajectory, dirs)
        if photometric:
            loss = rgb_loss(gr.rgb, target, lambda_dssim=cfg.lambda_dssim)
            terms.renders += 1
            if group.kind is GroupKind.PREV:
                terms.rgb_prev = loss
            else:
                terms.rgb_next = loss
        for d in dirs:
            pred = gr.fwd if d is FlowDir.FWD else gr.bwd
            flow_sum = flow_sum + flow_loss(pred, torch.from_numpy(gt[d]), gr.alpha)
            terms.flow_terms += 1
    terms.flow = flow_weight * flow_sum
    return terms


def flow_supervision_step(scene: Scene, bundle: FrameBundle, t_i: int, camera: Camera, cam_id: int,
                          cfg: TrainConfig) -> tuple[torch.Tensor, int]:
    """Weighted flow loss of both groups at frame ``t_i`` alone; returns (loss, term count).

    Directions without a ground-truth flow at ``t_i`` are skipped.
    """
    grid = scene.grid
    tcfg = TemporalConfig.for_grid(grid, cfg.gamma)
    gt = _flow_targets(bundle, cam_id, t_i)
    total, count = _zero(scene), 0
    t = grid.time(t_i)
    for group in _adjacent_groups(grid, t_i):
        dirs = tuple(d for d in (FlowDir.FWD, FlowDir.BWD) if gt[d] is not None)
        if not dirs:
            continue
        gr = render_group_with_flow(scene, camera, t, group, tcfg, cfg.linear_trajectory, dirs)
        for d in dirs:
            pred = gr.fwd if d is FlowDir.FWD else gr.bwd
            total = total + flow_loss(pred, torch.from_numpy(gt[d]), gr.alpha)
            count += 1
    return cfg.lambda_flow * total, count


@dataclass
class TrainResult:
    scene: Scene
    history: list[dict]
    events: list[dict]


def _check_finite(name: str, value: torch.Tensor, it: int):
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLossError(name, it, v)
    return v


def _set_requires_grad(scene: Scene):
    for name in OPTIMIZABLE_FIELDS:
        t = getattr(scene, name).detach()
        t.requires_grad_(True)
        setattr(scene, name, t)


def _held_rows(scene: Scene, cfg: TrainConfig) -> torch.Tensor:
    """Rows whose velocities stay frozen: windows wider than one interval."""
    if not cfg.hold_stretched:
        return torch.zeros(len(scene), dtype=torch.bool)
    return scene.duration() > 1.0 + 1e-9


def _write_csv(path, columns, rows):
    if path is None:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def train(scene: Scene, bundle: FrameBundle, cameras: list[Camera], cfg: TrainConfig,
          loss_csv=None, event_csv=None,
          callback: Callable[[int, Scene, dict], None] | None = None) -> TrainResult:
    """Optimize ``scene`` against the bundle; deterministic for a fixed ``cfg.seed``."""
    if bundle.camera_count != len(cameras):
        raise ContractViolation("camera count does not match the frame bundle")
    if bundle.frame_count != scene.grid.frame_count:
        raise ContractViolation("frame count does not match the scene grid")
    rng = np.random.default_rng(cfg.seed)
    scene = scene.clone()
    _set_requires_grad(scene)
    budget = len(scene)
    extent = scene_extent(scene.mu.detach().double().numpy())
    opt = Adam(scene)
    history, events = [], []
    densify_until = cfg.global_decay_start_iter
    sh_scale = torch.ones(scene.sh.shape[1], 1, dtype=scene.dtype)
    sh_scale[1:] = cfg.sh_lr_rest_ratio
    held = _held_rows(scene, cfg)

    for it in range(cfg.total_iters):
        lrs = lr_schedule(it, cfg, extent)
        flow_weight = cfg.lambda_flow * lrs["flow"] / cfg.flow_lr_init
        cam_id = int(rng.integers(len(cameras)))
        t_i = int(rng.integers(scene.grid.frame_count))
        terms = triple_render_step(scene, bundle, t_i, cameras[cam_id], cam_id, cfg, flow_weight)
        reg = regularizers(scene, cfg.lambda_opacity_reg, cfg.lambda_scale_reg)
        total = terms.rgb_all + terms.rgb_prev + terms.rgb_next + terms.flow + reg
        row = {"iter": it}
        for name, value in (("rgb_all", terms.rgb_all), ("rgb_prev", terms.rgb_prev),
                            ("rgb_next", terms.rgb_next), ("flow", terms.flow), ("reg", reg),
                            ("total", total)):
            row[name] = _check_finite(name, value, it)
        history.append(row)

        for name in OPTIMIZABLE_FIELDS:
            getattr(scene, name).grad = None
        total.backward()
        if scene.sh.grad is not None:
            scene.sh.grad.mul_(sh_scale)
        if held.any():
            for name in ("v1", "v2", "v3"):
                grad = getattr(scene, name).grad
                if grad is not None:  # linear mode leaves v1, v3 out of the graph
                    grad[held] = 0.0
        opt.step(scene, lrs)
        if cfg.position_noise:
            inject_noise(scene, lrs["mu"], rng)

        step = it + 1
        if step >= densify_until or step >= cfg.total_iters:
            if callback:
                callback(it, scene, row)
            continue
        stretched = pruned = relocated = 0
        changed = False
        if cfg.stretching and step % cfg.stretch_every == 0 and step >= cfg.stretch_every:
            res = dynamic_stretch(scene, cfg.stretch, rng, extent)
            stretched, pruned = res.stretched, res.pruned
            scene = res.scene
            opt.select(res.keep)
            if cfg.hold_stretched:
                opt.reset(res.grown)
            changed = True
            if cfg.refill and len(scene) < budget:
                scene, rows = grow(scene, budget - len(scene), rng)
                opt.extend(len(scene) - len(res.keep))
                opt.reset(rows)
        if step % cfg.relocate_every == 0:
            res = mcmc_relocate(scene.clone(), cfg.min_opacity, rng)
            if res.relocated:
                scene = res.scene
                opt.reset(res.touched)
                relocated = res.relocated
                changed = True
        if changed:
            _set_requires_grad(scene)
            held = _held_rows(scene, cfg)
            events.append({"iter": step, "stretched_count": stretched, "pruned_count": pruned,
                           "relocated_count": relocated})
        if callback:
            callback(it, scene, row)

    _write_csv(loss_csv, LOSS_COLUMNS, history)
    _write_csv(event_csv, EVENT_COLUMNS, events)
    final = scene.clone()
    if cfg.linear_trajectory:
        # bake the tie so the stored scene renders identically without the flag
        final.v1, final.v3 = final.v2.clone(), final.v2.clone()
    return TrainResult(final, history, events)
