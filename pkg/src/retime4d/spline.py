"""Catmull-Rom trajectories built from a pseudo-mean and three velocities."""
from __future__ import annotations

from enum import IntEnum
from typing import NamedTuple

import torch

from .errors import ContractViolation
from .scene import TimeGrid


class CP(IntEnum):
    P0 = 0
    P1 = 1
    P2 = 2
    P3 = 3


class ControlPoints(NamedTuple):
    p0: torch.Tensor
    p1: torch.Tensor
    p2: torch.Tensor
    p3: torch.Tensor


def _interval_index(p, grid: TimeGrid) -> torch.Tensor:
    k = getattr(p, "interval_index", None)
    if k is None:
        k = torch.as_tensor(grid.interval_of(p.mu_tau.detach().cpu().numpy()))
    return torch.as_tensor(k)


def control_points(p, grid: TimeGrid, linear: bool = False) -> ControlPoints:
    """Four control points of each primitive's spline.

    The inner points sit at the interval ends; the outer ones extend by one
    ``delta_t`` with the neighbouring-interval velocities. In the first and
    last interval the missing neighbour velocity falls back to ``v2``; with
    ``linear`` both outer velocities are tied to ``v2``.
    """
    dt = grid.delta_t
    v2 = p.v2
    if linear:
        v1 = v3 = v2
    else:
        k = _interval_index(p, grid)
        first = (k == 0)[..., None]
        last = (k == grid.interval_count - 1)[..., None]
        v1 = torch.where(first, v2, p.v1)
        v3 = torch.where(last, v2, p.v3)
    p1 = p.mu - 0.5 * dt * v2
    p2 = p.mu + 0.5 * dt * v2
    return ControlPoints(p1 - dt * v1, p1, p2, p2 + dt * v3)


def catmull_rom(cp: ControlPoints, u) -> torch.Tensor:
    """Uniform Catmull-Rom segment between ``p1`` (u=0) and ``p2`` (u=1)."""
    u = torch.as_tensor(u, dtype=cp.p1.dtype)
    if u.ndim:
        u = u[..., None]
    p0, p1, p2, p3 = cp
    u2 = u * u
    u3 = u2 * u
    return 0.5 * (
        2 * p1
        + (p2 - p0) * u
        + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u2
        + (3 * p1 - p0 - 3 * p2 + p3) * u3
    )


def local_u(p, t, grid: TimeGrid) -> torch.Tensor:
    """Normalized time within the primitive's own interval (float64)."""
    start = p.mu_tau - 0.5 * grid.delta_t
    return (torch.as_tensor(t, dtype=torch.float64) - start) / grid.delta_t


def position_at(p, t, grid: TimeGrid, linear: bool = False) -> torch.Tensor:
    """Trajectory position ``x(t)``; times outside the interval extrapolate."""
    u = local_u(p, t, grid).to(p.mu.dtype)
    return catmull_rom(control_points(p, grid, linear), u)


def pair_displacement(p, start: CP, end: CP, grid: TimeGrid, linear: bool = False) -> torch.Tensor:
    """3D displacement from control point ``start`` to control point ``end``."""
    if start == end:
        raise ContractViolation("start and end control points must differ")
    cp = control_points(p, grid, linear)
    return cp[end] - cp[start]
