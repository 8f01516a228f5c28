"""Boundary-aware temporal opacity.

A primitive fades in around ``mu_tau - tau_l`` and out around
``mu_tau + tau_r`` through two sigmoids of width ``gamma``. A side whose
boundary touches the first/last grid frame (within ``epsilon``) is held at
1 so content does not dim at the ends of the clip.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractViolation, InactivePrimitiveError
from .scene import TimeGrid

# Below this value a primitive is treated as culled at the query time.
VISIBILITY_FLOOR = 1e-6


@dataclass(frozen=True)
class TemporalConfig:
    gamma: float = 0.005
    epsilon: float = 0.1

    def __post_init__(self):
        if not self.gamma > 0:
            raise ContractViolation(f"gamma must be positive, got {self.gamma}")
        if not self.epsilon > 0:
            raise ContractViolation(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def for_grid(cls, grid: TimeGrid, gamma: float = 0.005) -> "TemporalConfig":
        return cls(gamma=gamma, epsilon=grid.epsilon)


def sigmoid(x):
    """Logistic function, overflow-safe for large ``|x|`` (scalars or arrays)."""
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(x)
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def _side_flags(p, grid: TimeGrid, cfg: TemporalConfig):
    mu_tau = torch.as_tensor(p.mu_tau, dtype=torch.float64)
    left = mu_tau - torch.as_tensor(p.tau_l, dtype=torch.float64)
    right = mu_tau + torch.as_tensor(p.tau_r, dtype=torch.float64)
    open_left = (left - grid.t_start) < cfg.epsilon
    open_right = right > grid.t_end - cfg.epsilon
    return left, right, open_left, open_right


def temporal_opacity(p, t, grid: TimeGrid, cfg: TemporalConfig) -> torch.Tensor:
    """Temporal opacity of ``p`` (a Primitive or a Scene) at time ``t``, float64."""
    t = torch.as_tensor(t, dtype=torch.float64)
    left, right, open_left, open_right = _side_flags(p, grid, cfg)
    fade_in = torch.where(open_left, torch.ones_like(left), torch.sigmoid((t - left) / cfg.gamma))
    fade_out = torch.where(open_right, torch.ones_like(right), torch.sigmoid((right - t) / cfg.gamma))
    return fade_in * fade_out


def compensation_factor(p, t_i: float, grid: TimeGrid, cfg: TemporalConfig,
                        t_eval: float | None = None) -> torch.Tensor:
    """Factor ``1 / sigma_tau(t_i)`` used when a primitive group is rendered alone.

    The factor is clamped so that ``sigma_tau(t_eval) * factor <= 1``
    (``t_eval`` defaults to ``t_i``).
    """
    if grid.frame_index(t_i) is None:
        raise ContractViolation(f"compensation requires a grid time, got {t_i}")
    at_frame = temporal_opacity(p, t_i, grid, cfg)
    if (at_frame <= VISIBILITY_FLOOR).any():
        raise InactivePrimitiveError(f"primitive inactive at t={t_i} (sigma_tau <= {VISIBILITY_FLOOR})")
    factor = 1.0 / at_frame
    at_eval = at_frame if t_eval is None else temporal_opacity(p, t_eval, grid, cfg)
    return torch.minimum(factor, 1.0 / at_eval)


def temporal_weight(p, t: float, grid: TimeGrid, cfg: TemporalConfig,
                    compensate: bool = False) -> torch.Tensor:
    """Per-primitive multiplier on base opacity used by the renderer.

    Zero marks primitives culled at ``t``. With ``compensate`` every visible
    primitive gets weight 1 (the compensated product, clamped at 1).
    """
    w = temporal_opacity(p, t, grid, cfg)
    visible = w > VISIBILITY_FLOOR
    if compensate:
        if grid.frame_index(t) is None:
            raise ContractViolation(f"compensated rendering requires a grid time, got {t}")
        # sigma_tau(t_i) * (1 / sigma_tau(t_i)) at the frame itself
        return visible.to(w.dtype)
    return torch.where(visible, w, torch.zeros_like(w))
