"""Per-field Adam whose moment buffers follow primitive insertions and removals."""
from __future__ import annotations

import numpy as np
import torch

from .scene import OPTIMIZABLE_FIELDS, Scene


class Adam:
    """Adam over the optimizable fields of a :class:`Scene`, one LR per field."""

    def __init__(self, scene: Scene, betas=(0.9, 0.999), eps: float = 1e-15):
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: torch.zeros_like(getattr(scene, n)) for n in OPTIMIZABLE_FIELDS}
        self.v = {n: torch.zeros_like(getattr(scene, n)) for n in OPTIMIZABLE_FIELDS}

    @torch.no_grad()
    def step(self, scene: Scene, lrs: dict[str, float]):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for name in OPTIMIZABLE_FIELDS:
            p = getattr(scene, name)
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lrs[name] / c1)

    def reset(self, rows):
        """Zero the moments of the given primitive rows."""
        idx = torch.as_tensor(np.asarray(rows), dtype=torch.long)
        if len(idx) == 0:
            return
        for name in OPTIMIZABLE_FIELDS:
            self.m[name][idx] = 0
            self.v[name][idx] = 0

    def select(self, keep):
        """Keep only the moments of rows ``keep`` (after pruning)."""
        idx = torch.as_tensor(np.asarray(keep), dtype=torch.long)
        for name in OPTIMIZABLE_FIELDS:
            self.m[name] = self.m[name][idx].clone()
            self.v[name] = self.v[name][idx].clone()

    def extend(self, count: int):
        """Append zero moments for ``count`` new rows."""
        for name in OPTIMIZABLE_FIELDS:
            for buf in (self.m, self.v):
                z = buf[name].new_zeros((count, *buf[name].shape[1:]))
                buf[name] = torch.cat([buf[name], z])
