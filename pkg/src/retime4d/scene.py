"""Scene model: time grid, 4D primitives, cameras and parameter activations.

Every primitive-level function in this package accepts either a single
:class:`Primitive` or a whole :class:`Scene`; both expose the same field
names, so the math broadcasts over a leading primitive axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterator

import numpy as np
import torch

from .errors import ContractViolation, DegenerateRotationError

OPTIMIZABLE_FIELDS = ("mu", "v1", "v2", "v3", "log_scale", "rot_c0", "rot_c1", "sh", "opacity_logit")
TEMPORAL_FIELDS = ("mu_tau", "tau_l", "tau_r")
PRIMITIVE_FIELDS = TEMPORAL_FIELDS + OPTIMIZABLE_FIELDS

# Normalized quaternions are (w, x, y, z).
_DEGENERATE_QUAT_NORM = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of input frame times ``t_k = t_start + k * delta_t``.

    Frames are indexed from 0 here; interval ``k`` spans ``[t_k, t_{k+1}]``.
    """

    frame_count: int
    t_start: float = 0.0
    delta_t: float = 1.0
    epsilon: float = 0.1

    def __post_init__(self):
        if self.frame_count < 1:
            raise ContractViolation(f"frame_count must be positive, got {self.frame_count}")
        if not self.delta_t > 0:
            raise ContractViolation(f"delta_t must be positive, got {self.delta_t}")
        if not 0 < self.epsilon < self.delta_t / 4:
            raise ContractViolation(
                f"epsilon must lie in (0, delta_t/4) = (0, {self.delta_t / 4}), got {self.epsilon}"
            )

    @property
    def interval_count(self) -> int:
        return self.frame_count - 1

    @property
    def t_end(self) -> float:
        return self.time(self.frame_count - 1)

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.delta_t * np.arange(self.frame_count, dtype=np.float64)

    def time(self, k: int) -> float:
        return self.t_start + k * self.delta_t

    def interval_mid(self, k):
        """Temporal mean of primitives living in interval ``k``."""
        return self.t_start + (np.asarray(k, dtype=np.float64) + 0.5) * self.delta_t

    def interval_of(self, mu_tau):
        """Inverse of :meth:`interval_mid`."""
        k = np.rint((np.asarray(mu_tau, dtype=np.float64) - self.t_start) / self.delta_t - 0.5)
        return k.astype(np.int64)

    def frame_index(self, t: float, tol: float = 1e-9) -> int | None:
        """Grid index of ``t`` if it lies on the grid, else ``None``."""
        k = round((t - self.t_start) / self.delta_t)
        if 0 <= k < self.frame_count and abs(self.time(k) - t) <= tol * max(1.0, self.delta_t):
            return int(k)
        return None

    def contains(self, t: float) -> bool:
        return self.t_start - 1e-12 <= t <= self.t_end + 1e-12


@dataclass
class Primitive:
    """One 4D Gaussian. Fields are tensors; a :class:`Scene` holds the batched form."""

    mu_tau: torch.Tensor
    tau_l: torch.Tensor
    tau_r: torch.Tensor
    mu: torch.Tensor
    v1: torch.Tensor
    v2: torch.Tensor
    v3: torch.Tensor
    log_scale: torch.Tensor
    rot_c0: torch.Tensor
    rot_c1: torch.Tensor
    sh: torch.Tensor
    opacity_logit: torch.Tensor

    @classmethod
    def create(
        cls,
        mu_tau: float,
        mu=(0.0, 0.0, 0.0),
        v1=(0.0, 0.0, 0.0),
        v2=(0.0, 0.0, 0.0),
        v3=(0.0, 0.0, 0.0),
        log_scale=(0.0, 0.0, 0.0),
        rot_c0=(1.0, 0.0, 0.0, 0.0),
        rot_c1=(0.0, 0.0, 0.0, 0.0),
        sh=None,
        opacity_logit: float = 0.0,
        tau_l: float = 0.5,
        tau_r: float = 0.5,
        sh_degree: int = 1,
        dtype=torch.float64,
    ) -> "Primitive":
        def vec(x):
            return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype).clone()

        if sh is None:
            sh = np.zeros(((sh_degree + 1) ** 2, 3))
        return cls(
            mu_tau=torch.tensor(float(mu_tau), dtype=torch.float64),
            tau_l=torch.tensor(float(tau_l), dtype=torch.float64),
            tau_r=torch.tensor(float(tau_r), dtype=torch.float64),
            mu=vec(mu), v1=vec(v1), v2=vec(v2), v3=vec(v3),
            log_scale=vec(log_scale), rot_c0=vec(rot_c0), rot_c1=vec(rot_c1),
            sh=vec(sh), opacity_logit=vec(opacity_logit),
        )


@dataclass
class Scene:
    """Struct-of-arrays store of primitives plus the time grid.

    ``interval_index`` is derived from ``mu_tau`` (never optimized) and is
    recomputed whenever primitives are added, removed or relocated.
    """

    grid: TimeGrid
    sh_degree: int
    mu_tau: torch.Tensor  # [N] float64
    tau_l: torch.Tensor  # [N] float64
    tau_r: torch.Tensor  # [N] float64
    mu: torch.Tensor  # [N, 3]
    v1: torch.Tensor
    v2: torch.Tensor
    v3: torch.Tensor
    log_scale: torch.Tensor  # [N, 3]
    rot_c0: torch.Tensor  # [N, 4]
    rot_c1: torch.Tensor  # [N, 4]
    sh: torch.Tensor  # [N, K, 3]
    opacity_logit: torch.Tensor  # [N]
    interval_index: torch.Tensor = field(default=None)  # [N] int64

    def __post_init__(self):
        if not 0 <= self.sh_degree <= 2:
            raise ContractViolation(f"sh_degree must be in [0, 2], got {self.sh_degree}")
        self.refresh_interval_index()

    def __len__(self) -> int:
        return int(self.mu_tau.shape[0])

    @property
    def dtype(self) -> torch.dtype:
        return self.mu.dtype

    @classmethod
    def from_primitives(cls, grid: TimeGrid, prims: list[Primitive], sh_degree: int,
                        dtype=torch.float32) -> "Scene":
        if not prims:
            return cls.empty(grid, sh_degree, dtype)
        data = {}
        for name in PRIMITIVE_FIELDS:
            parts = [getattr(p, name) for p in prims]
            if name in TEMPORAL_FIELDS:
                data[name] = torch.stack([x.to(torch.float64) for x in parts])
            else:
                data[name] = torch.stack([x.to(dtype) for x in parts])
        return cls(grid=grid, sh_degree=sh_degree, **data)

    @classmethod
    def empty(cls, grid: TimeGrid, sh_degree: int = 1, dtype=torch.float32) -> "Scene":
        k = (sh_degree + 1) ** 2
        z = lambda *s: torch.zeros(*s, dtype=dtype)
        return cls(
            grid=grid, sh_degree=sh_degree,
            mu_tau=torch.zeros(0, dtype=torch.float64), tau_l=torch.zeros(0, dtype=torch.float64),
            tau_r=torch.zeros(0, dtype=torch.float64),
            mu=z(0, 3), v1=z(0, 3), v2=z(0, 3), v3=z(0, 3), log_scale=z(0, 3),
            rot_c0=z(0, 4), rot_c1=z(0, 4), sh=z(0, k, 3), opacity_logit=z(0),
        )

    def refresh_interval_index(self):
        k = self.grid.interval_of(self.mu_tau.detach().cpu().numpy())
        self.interval_index = torch.from_numpy(np.atleast_1d(k).astype(np.int64))

    def primitive(self, i: int) -> Primitive:
        return Primitive(**{name: getattr(self, name)[i] for name in PRIMITIVE_FIELDS})

    def __iter__(self) -> Iterator[Primitive]:
        for i in range(len(self)):
            yield self.primitive(i)

    def params(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in OPTIMIZABLE_FIELDS}

    def index_select(self, idx) -> "Scene":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return replace(self, **{n: getattr(self, n).detach()[idx].clone() for n in PRIMITIVE_FIELDS},
                       interval_index=None)

    def concat(self, other: "Scene") -> "Scene":
        return replace(self, **{n: torch.cat([getattr(self, n).detach(), getattr(other, n).detach()])
                                for n in PRIMITIVE_FIELDS}, interval_index=None)

    def clone(self) -> "Scene":
        return replace(self, **{n: getattr(self, n).detach().clone() for n in PRIMITIVE_FIELDS},
                       interval_index=None)

    def to(self, dtype: torch.dtype) -> "Scene":
        return replace(self, **{n: getattr(self, n).detach().to(dtype) for n in OPTIMIZABLE_FIELDS},
                       interval_index=None)

    def duration(self) -> torch.Tensor:
        """Temporal window length ``tau_l + tau_r`` in units of ``delta_t``."""
        return (self.tau_l + self.tau_r) / self.grid.delta_t

    def check_invariants(self, atol: float = 1e-9):
        g = self.grid
        mid = torch.from_numpy(g.interval_mid(self.interval_index.numpy()))
        if not torch.allclose(mid, self.mu_tau, atol=atol, rtol=0):
            raise ContractViolation("mu_tau is not on the half-grid of its interval")
        k = self.interval_index
        if len(k) and (k.min() < 0 or k.max() > g.interval_count - 1):
            raise ContractViolation("interval_index out of range")
        for name in ("tau_l", "tau_r"):
            units = getattr(self, name) / g.delta_t - 0.5
            if not torch.allclose(units, torch.round(units), atol=atol, rtol=0) or (units < -atol).any():
                raise ContractViolation(f"{name} is off the (1/2 + k) * delta_t lattice")


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera pose ``x_cam = R @ x_world + t``."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation("focal lengths must be positive")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ContractViolation("camera rotation must be orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, x: np.ndarray) -> np.ndarray:
        return x @ self.rotation.T + self.translation

    def project(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points to pixel coordinates; returns (uv, depth)."""
        xc = self.world_to_camera(np.asarray(x, dtype=np.float64))
        z = xc[..., 2]
        uv = np.stack([self.fx * xc[..., 0] / z + self.cx, self.fy * xc[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def pixel_rays(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """World-space unit ray directions through continuous pixel coordinates."""
        d = np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], axis=-1)
        d = d @ self.rotation  # camera -> world: R^T d, written row-wise
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` looking at ``target``; image y points along ``-up``."""
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z])
        return cls(fx, fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   r, -r @ eye, width, height)


def activate_primitive(p) -> tuple[torch.Tensor, torch.Tensor]:
    """Base opacity ``sigmoid(opacity_logit)`` and scale ``exp(log_scale)``."""
    return torch.sigmoid(p.opacity_logit), torch.exp(p.log_scale)


def inverse_sigmoid(x):
    x = torch.as_tensor(x)
    return torch.log(x / (1 - x))


def quat_to_mat(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from unit quaternions ``(w, x, y, z)``; shape [..., 3, 3]."""
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def rotation_at(p, t) -> torch.Tensor:
    """Unit quaternion ``normalize(rot_c0 + rot_c1 * (t - mu_tau))``."""
    dt = (torch.as_tensor(t, dtype=torch.float64) - p.mu_tau).to(p.rot_c0.dtype)
    raw = p.rot_c0 + p.rot_c1 * dt[..., None]
    norm = raw.norm(dim=-1, keepdim=True)
    if (norm.detach() < _DEGENERATE_QUAT_NORM).any():
        raise DegenerateRotationError("rotation polynomial evaluates to a zero quaternion")
    return raw / norm


def covariance_at(p, t) -> torch.Tensor:
    """World covariance ``R(t) diag(s^2) R(t)^T``."""
    r = quat_to_mat(rotation_at(p, t))
    s2 = torch.exp(2 * p.log_scale)
    return (r * s2[..., None, :]) @ r.transpose(-1, -2)


def scene_extent(points) -> float:
    """Radius of the bounding sphere around the centroid (at least 1e-6)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return 1.0
    c = pts.mean(axis=0)
    return max(float(np.linalg.norm(pts - c, axis=1).max()), 1e-6)
