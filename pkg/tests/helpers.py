import numpy as np
import torch

from retime4d.scene import Camera, Primitive, Scene, TimeGrid
from retime4d.synth import BlobTrack, CameraRing, SceneScript, generate


def tiny_script(**kw) -> SceneScript:
    """Small two-blob scene that renders in well under a second."""
    args = dict(
        name="tiny",
        blobs=[
            BlobTrack("linear", center=(-0.5, 0.0, 0.0), velocity=(0.1, 0.02, 0.0), size=0.35,
                      pattern="gradient", color=(0.9, 0.4, 0.1), color2=(0.2, 0.8, 0.4)),
            BlobTrack("static", center=(0.4, 0.3, 0.6), size=0.4, color=(0.2, 0.3, 0.9)),
        ],
        cameras=CameraRing(count=3, radius=4.0, elevation=0.4, arc_degrees=60.0),
        frames=9, stride=2, width=48, height=48, supersample=2, points_per_frame=600, seed=7,
    )
    args.update(kw)
    return SceneScript(**args)


def random_scene(rng: np.random.Generator, n: int = 3, frames: int = 4, dtype=torch.float64,
                 sh_degree: int = 1) -> Scene:
    """Random primitives in front of :func:`front_camera`, one interval each."""
    grid = TimeGrid(frames)
    prims = []
    k = (sh_degree + 1) ** 2
    for _ in range(n):
        interval = int(rng.integers(grid.interval_count))
        q = rng.normal(size=4)
        prims.append(Primitive.create(
            grid.interval_mid(interval),
            mu=rng.uniform(-0.4, 0.4, 3), v1=rng.normal(0, 0.05, 3), v2=rng.normal(0, 0.05, 3),
            v3=rng.normal(0, 0.05, 3), log_scale=rng.uniform(-2.2, -1.4, 3),
            rot_c0=q / np.linalg.norm(q), rot_c1=rng.normal(0, 0.05, 4),
            sh=rng.normal(0, 0.3, (k, 3)), opacity_logit=rng.uniform(-0.5, 1.5),
            sh_degree=sh_degree, dtype=dtype))
    return Scene.from_primitives(grid, prims, sh_degree, dtype=dtype)


def front_camera(size: int = 16, focal: float = 1.5) -> Camera:
    return Camera.look_at((0.0, 0.0, -3.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                          focal * size, focal * size, size, size)


def fd_gradient_error(scene, req, h: float = 1e-5, seed: int = 0, floor: float = 1e-5,
                      with_jump: bool = False):
    """Worst per-field error of analytic render gradients against central differences.

    The loss is a fixed random linear functional of the rendered color and
    alpha. Error per field is ``|a - fd|_inf / (max(|a|_inf, |fd|_inf) + floor)``.
    With ``with_jump`` also returns the largest second difference
    ``|L(x+h) - 2 L(x) + L(x-h)|`` over all coordinates, which is O(h^2) unless
    a stencil straddles a footprint cutoff or a depth-order swap.
    """
    from retime4d.render import render, render_backward
    from retime4d.scene import OPTIMIZABLE_FIELDS

    gen = torch.Generator().manual_seed(seed)
    out = render(scene, req)
    up = torch.randn(out.color.shape, generator=gen, dtype=out.color.dtype)
    ua = torch.randn(out.alpha.shape, generator=gen, dtype=out.alpha.dtype)
    grads = render_backward(scene, req, up, ua)

    def loss():
        o = render(scene, req)
        return float((o.color * up).sum() + (o.alpha * ua).sum())

    worst, jump = {}, 0.0
    l0 = loss()
    for name in OPTIMIZABLE_FIELDS:
        flat = getattr(scene, name).view(-1)
        fd = torch.zeros_like(flat)
        for j in range(flat.numel()):
            old = flat[j].item()
            flat[j] = old + h
            fp = loss()
            flat[j] = old - h
            fm = loss()
            flat[j] = old
            fd[j] = (fp - fm) / (2 * h)
            jump = max(jump, abs(fp - 2 * l0 + fm))
        a = grads[name].reshape(-1)
        scale = max(float(fd.abs().max()), float(a.abs().max()))
        worst[name] = float((a - fd).abs().max()) / (scale + floor)
    return (worst, jump) if with_jump else worst


ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    """Log one pass/fail line for the acceptance summary and return ``passed``."""
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed
