"""Density control: dynamic stretching of static primitives and MCMC relocation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from math import comb

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import ContractViolation
from .scene import Scene, inverse_sigmoid
from .spline import position_at

log = logging.getLogger(__name__)

# Cap on copies per relocation target; the alternating scale sum loses precision beyond it.
MAX_COPIES = 51
_MIN_OPACITY = 0.005
_MAX_OPACITY = 1.0 - 1e-6


@dataclass(frozen=True)
class StretchConfig:
    """Match thresholds for stretching; distances are fractions of the scene extent."""

    color_tol: float = 0.25  # L2 distance between degree-0 SH coefficients
    vel_tol: float = 0.005  # max |v2| * delta_t
    nn_radius: float = 0.01
    settle: bool = True  # zero the velocities of primitives whose window grew

    def __post_init__(self):
        if not (self.color_tol > 0 and self.vel_tol > 0 and self.nn_radius > 0):
            raise ContractViolation("stretch thresholds must be positive")


@dataclass
class StretchResult:
    scene: Scene
    keep: np.ndarray  # surviving row indices into the input scene
    stretched: int
    pruned: int
    grown: np.ndarray  # rows of the output scene whose window grew


def prune_probability(k) -> np.ndarray:
    """Probability of removing a primitive matched ``k`` times by others."""
    return 1.0 - 1.0 / (np.asarray(k, dtype=np.float64) + 1.0)


def _match_at_frame(left_ids, right_ids, pos, radius):
    """Directed nearest-neighbour matches between two abutting sets."""
    out = []
    for src, dst in ((left_ids, right_ids), (right_ids, left_ids)):
        if len(src) == 0 or len(dst) == 0:
            continue
        d, j = cKDTree(pos[dst]).query(pos[src], k=1, distance_upper_bound=radius)
        ok = np.isfinite(d)
        out.extend(zip(src[ok].tolist(), dst[j[ok]].tolist()))
    return out


def dynamic_stretch(scene: Scene, cfg: StretchConfig, rng: np.random.Generator,
                    extent: float = 1.0) -> StretchResult:
    """Merge matched static primitives across abutting temporal windows.

    Two primitives match when one window ends at the frame where the other
    begins, their positions at that frame are nearest neighbours within
    ``nn_radius``, their base colors agree and both move less than
    ``vel_tol``. Each matched primitive's window becomes the hull of its own
    and its partners' windows; then each is pruned with probability
    ``1 - 1/(k+1)`` where ``k`` counts how often others matched it. A
    primitive whose partners were all pruned already is kept.

    With ``cfg.settle`` the survivors whose window grew get zero velocities:
    their spline is evaluated far outside its own interval, where any
    residual velocity is amplified by the cubic terms.
    """
    n = len(scene)
    grid = scene.grid
    if n == 0 or grid.frame_count < 3:
        return StretchResult(scene, np.arange(n), 0, 0, np.zeros(0, dtype=np.int64))
    dt = grid.delta_t
    mu_tau = scene.mu_tau.numpy()
    left = mu_tau - scene.tau_l.numpy()
    right = mu_tau + scene.tau_r.numpy()
    left_f = np.rint((left - grid.t_start) / dt).astype(np.int64)
    right_f = np.rint((right - grid.t_start) / dt).astype(np.int64)
    with torch.no_grad():
        sh0 = scene.sh[:, 0].double().numpy()
        speed = scene.v2.double().norm(dim=-1).numpy() * dt
    static = speed <= cfg.vel_tol * extent
    radius = cfg.nn_radius * extent

    pairs = []
    for i in range(1, grid.frame_count - 1):
        ends = np.nonzero((right_f == i) & static)[0]
        starts = np.nonzero((left_f == i) & static)[0]
        if len(ends) == 0 or len(starts) == 0:
            continue
        ids = np.concatenate([ends, starts])
        with torch.no_grad():
            sub = _Rows(scene, torch.from_numpy(ids))
            pos = np.zeros((n, 3))
            pos[ids] = position_at(sub, grid.time(i), grid).double().numpy()
        pairs.extend(_match_at_frame(ends, starts, pos, radius))

    new_left, new_right = left.copy(), right.copy()
    hits = np.zeros(n, dtype=np.int64)
    partners: dict[int, set[int]] = {}
    for a, b in sorted(set(pairs)):
        if np.linalg.norm(sh0[a] - sh0[b]) > cfg.color_tol:
            continue
        hits[b] += 1
        partners.setdefault(a, set()).add(b)
        partners.setdefault(b, set()).add(a)
    for a, ps in partners.items():
        group = [a, *ps]
        new_left[a] = left[group].min()
        new_right[a] = right[group].max()
    matched = np.array(sorted(partners), dtype=np.int64)

    pruned = np.zeros(n, dtype=bool)
    draws = rng.random(len(matched))
    for a, u in zip(matched, draws):
        if u < prune_probability(hits[a]) and any(not pruned[b] for b in partners[a]):
            pruned[a] = True

    out = scene.clone()
    out.tau_l = torch.from_numpy(mu_tau - new_left)
    out.tau_r = torch.from_numpy(new_right - mu_tau)
    keep = np.nonzero(~pruned)[0]
    grown = np.nonzero(((new_right - new_left) > (right - left) + 1e-9)[keep])[0]
    if pruned.any():
        out = out.index_select(torch.from_numpy(keep))
    if cfg.settle and len(grown):
        rows = torch.from_numpy(grown)
        with torch.no_grad():
            for name in ("v1", "v2", "v3"):
                v = getattr(out, name).detach().clone()
                v[rows] = 0.0
                setattr(out, name, v)
    return StretchResult(out, keep, len(grown), int(pruned.sum()), grown)


class _Rows:
    def __init__(self, scene: Scene, idx: torch.Tensor):
        for name in ("mu_tau", "mu", "v1", "v2", "v3", "interval_index"):
            setattr(self, name, getattr(scene, name)[idx])


def sampling_score(p, delta_t: float | None = None) -> torch.Tensor:
    """Base opacity divided by window duration in ``delta_t`` units.

    ``p`` is a Primitive or a Scene; a Scene supplies ``delta_t`` itself.
    """
    dt = delta_t if delta_t is not None else (p.grid.delta_t if isinstance(p, Scene) else 1.0)
    duration = (torch.as_tensor(p.tau_l) + torch.as_tensor(p.tau_r)) / dt
    if (duration <= 0).any():
        raise ContractViolation("temporal window has zero duration")
    return torch.sigmoid(p.opacity_logit.detach()).double() / duration


def relocation_opacity(sigma, copies):
    """Opacity of each of ``copies`` primitives that together composite to ``sigma``."""
    return 1.0 - (1.0 - np.asarray(sigma, dtype=np.float64)) ** (1.0 / np.asarray(copies))


def relocation_scale_factor(sigma: float, copies: int) -> float:
    """Scale multiplier keeping the summed footprint of ``copies`` splats equal to one at ``sigma``."""
    s1 = float(relocation_opacity(sigma, copies))
    denom = 0.0
    for i in range(1, copies + 1):
        for k in range(i):
            denom += comb(i - 1, k) * (-1) ** k * s1 ** (k + 1) / np.sqrt(k + 1)
    return float(sigma / denom)


@dataclass
class RelocateResult:
    scene: Scene
    touched: np.ndarray  # rows whose parameters changed (dead and their targets)
    relocated: int


def _copy_split(scene: Scene, dst: np.ndarray, src: np.ndarray, targets: np.ndarray,
                copies: np.ndarray) -> Scene:
    """Write target parameters into ``dst`` rows and split opacity among the copies."""
    out = scene.clone()
    d, s = torch.from_numpy(dst), torch.from_numpy(src)
    for name in ("mu_tau", "tau_l", "tau_r", "mu", "v1", "v2", "v3", "log_scale",
                 "rot_c0", "rot_c1", "sh", "opacity_logit"):
        getattr(out, name)[d] = getattr(scene, name).detach()[s]
    sigma = torch.sigmoid(scene.opacity_logit.detach()[torch.from_numpy(targets)].double()).numpy()
    new_sigma = np.clip(relocation_opacity(sigma, copies), _MIN_OPACITY, _MAX_OPACITY)
    factors = np.array([relocation_scale_factor(sg, int(c)) for sg, c in zip(sigma, copies)])
    rows = torch.from_numpy(np.concatenate([targets, dst]))
    by_target = {int(t): (ns, f) for t, ns, f in zip(targets, new_sigma, factors)}
    ns = np.array([by_target[int(t)][0] for t in np.concatenate([targets, src])])
    fs = np.array([by_target[int(t)][1] for t in np.concatenate([targets, src])])
    dtype = out.opacity_logit.dtype
    out.opacity_logit[rows] = inverse_sigmoid(torch.from_numpy(ns)).to(dtype)
    base = scene.log_scale.detach()[torch.from_numpy(np.concatenate([targets, src]))]
    out.log_scale[rows] = base + torch.from_numpy(np.log(fs)).to(dtype)[:, None]
    out.refresh_interval_index()
    return out


def mcmc_relocate(scene: Scene, min_opacity: float, rng: np.random.Generator) -> RelocateResult:
    """Move primitives with base opacity below ``min_opacity`` onto sampled live ones.

    Targets are drawn with probability proportional to :func:`sampling_score`.
    Each dead primitive copies its target's full parameter vector; the target
    and its copies then share the opacity and scale so the composite is kept.
    """
    n = len(scene)
    sigma = torch.sigmoid(scene.opacity_logit.detach().double()).numpy()
    dead = np.nonzero(sigma < min_opacity)[0]
    alive = np.nonzero(sigma >= min_opacity)[0]
    if len(dead) == 0:
        return RelocateResult(scene, np.zeros(0, dtype=np.int64), 0)
    if len(alive) == 0:
        log.warning("relocation skipped: no primitive has opacity >= %g", min_opacity)
        return RelocateResult(scene, np.zeros(0, dtype=np.int64), 0)
    score = sampling_score(scene).numpy()[alive]
    src = rng.choice(alive, size=len(dead), p=score / score.sum())
    targets, counts = np.unique(src, return_counts=True)
    copies = np.minimum(counts + 1, MAX_COPIES)
    out = _copy_split(scene, dead, src, targets, copies)
    touched = np.unique(np.concatenate([dead, targets]))
    assert len(out) == n
    return RelocateResult(out, touched, int(len(dead)))


def grow(scene: Scene, count: int, rng: np.random.Generator) -> tuple[Scene, np.ndarray]:
    """Append ``count`` copies of score-sampled primitives using the relocation split.

    Returns the grown scene and the rows (targets and new copies) that changed.
    """
    n = len(scene)
    if count <= 0 or n == 0:
        return scene, np.zeros(0, dtype=np.int64)
    score = sampling_score(scene).numpy()
    src = rng.choice(n, size=count, p=score / score.sum())
    targets, counts = np.unique(src, return_counts=True)
    copies = np.minimum(counts + 1, MAX_COPIES)
    big = scene.concat(scene.index_select(torch.from_numpy(src)))
    dst = np.arange(n, n + count)
    out = _copy_split(big, dst, src, targets, copies)
    return out, np.concatenate([targets, dst])


def inject_noise(scene: Scene, lr: float, rng: np.random.Generator) -> None:
    """Perturb positions of faint primitives along their covariance (in place)."""
    with torch.no_grad():
        sigma = torch.sigmoid(scene.opacity_logit.detach().double())
        gate = torch.sigmoid(-100.0 * (sigma - _MIN_OPACITY))
        eps = torch.from_numpy(rng.standard_normal((len(scene), 3)))
        step = eps * torch.exp(scene.log_scale.detach().double()) * gate[:, None] * lr * 100.0
        scene.mu += step.to(scene.mu.dtype)
