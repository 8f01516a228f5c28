"""retime4d: 4D Gaussian splatting with boundary-aware temporal opacity and
Catmull-Rom trajectories, rendered at arbitrary continuous timestamps."""
import os

# TBB shipped in some images is too old for numba; the workqueue layer is always present.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"


def configure_threads(count: int | None = None) -> int:
    """Cap torch and numba worker counts (``RETIME4D_THREADS`` when unset)."""
    import numba
    import torch

    if count is None:
        env = os.environ.get("RETIME4D_THREADS")
        if not env:
            return torch.get_num_threads()
        count = int(env)
    count = max(1, min(int(count), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(count)
    torch.set_num_threads(count)
    return count
