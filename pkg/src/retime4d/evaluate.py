"""Rendering at arbitrary times, frame interpolation and split evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractViolation, MissingFileError
from .ingest import load_split_images
from .io import write_png
from .metrics import error_heatmap, psnr, quantize, ssim
from .render import RenderRequest, render
from .scene import Camera, Scene

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("camera", "frame", "time", "psnr", "ssim")


@torch.no_grad()
def render_image(scene: Scene, camera: Camera, t: float, linear: bool = False) -> np.ndarray:
    """RGB render [H, W, 3] as float64, clipped to [0, 1]."""
    if not scene.grid.contains(t):
        raise ContractViolation(f"time {t} is outside the scene span "
                                f"[{scene.grid.t_start}, {scene.grid.t_end}]")
    out = render(scene, RenderRequest(camera, float(t)), linear=linear)
    return np.clip(out.color.detach().double().numpy(), 0.0, 1.0)


def interpolate(scene: Scene, camera: Camera, t_from: float, t_to: float, n_frames: int,
                out_dir, linear: bool = False) -> list[Path]:
    """Render ``n_frames`` uniformly spaced times in ``[t_from, t_to]`` as numbered PNGs."""
    if n_frames < 1:
        raise ContractViolation("n_frames must be at least 1")
    for t in (t_from, t_to):
        if not scene.grid.contains(t):
            raise ContractViolation(f"time {t} is outside the scene span "
                                    f"[{scene.grid.t_start}, {scene.grid.t_end}]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    times = [t_from] if n_frames == 1 else np.linspace(t_from, t_to, n_frames).tolist()
    paths = []
    for i, t in enumerate(times):
        p = out / f"frame_{i:04d}.png"
        write_png(p, render_image(scene, camera, t, linear))
        paths.append(p)
    return paths


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    masked: bool = True

    @property
    def mean_psnr(self) -> float:
        v = [r["psnr"] for r in self.rows if not math.isnan(r["psnr"])]
        return float(np.mean(v)) if v else math.nan

    @property
    def mean_ssim(self) -> float:
        v = [r["ssim"] for r in self.rows if not math.isnan(r["ssim"])]
        return float(np.mean(v)) if v else math.nan

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
            w.writerow({"camera": "mean", "frame": "", "time": "",
                        "psnr": self.mean_psnr, "ssim": self.mean_ssim})


def score_frame(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None) -> tuple[float, float]:
    """Masked PSNR and SSIM of one quantized prediction; NaN when the mask is empty."""
    p, g = quantize(pred), quantize(gt)
    if mask is not None and not np.asarray(mask).any():
        return math.nan, math.nan
    ps = psnr(p, g, mask)
    try:
        ss = ssim(p, g, mask)
    except ContractViolation:
        ss = math.nan  # mask has no full SSIM window inside the image
    return ps, ss


def _split_path(data_dir, split: str) -> Path:
    root = Path(data_dir)
    d = root / split
    if not (d / "cameras.json").is_file():
        if split == "train" and (root / "cameras.json").is_file():
            return root
        raise MissingFileError(d, f"dataset has no '{split}' split")
    return d


def load_split(data_dir, split: str):
    """(images, masks, cameras, times) of a dataset split; train times default to 0..T-1."""
    images, masks, cams, times = load_split_images(_split_path(data_dir, split))
    if times is None:
        if split != "train":
            raise MissingFileError(_split_path(data_dir, split) / "split.json", "split times not found")
        times = np.arange(images.shape[1], dtype=np.float64)
    return images, masks, cams, times


def evaluate_predictions(preds, images, masks, times, masked: bool = True,
                         heatmap_dir=None) -> EvalReport:
    """Score ``preds[c][j]`` against ``images[c, j]``."""
    report = EvalReport(masked=masked)
    if heatmap_dir is not None:
        Path(heatmap_dir).mkdir(parents=True, exist_ok=True)
    for c in range(images.shape[0]):
        for j, t in enumerate(times):
            m = masks[c, j] if (masked and masks is not None) else None
            ps, ss = score_frame(preds[c][j], images[c, j], m)
            report.rows.append({"camera": c, "frame": j, "time": float(t), "psnr": ps, "ssim": ss})
            if heatmap_dir is not None:
                heat = error_heatmap(quantize(preds[c][j]), quantize(images[c, j]))
                write_png(Path(heatmap_dir) / f"cam{c}_frame{j}_diff.png", heat)
    return report


def evaluate(scene: Scene, data_dir, split: str = "heldout", out_csv=None, heatmap_dir=None,
             masked: bool = True, linear: bool = False) -> EvalReport:
    """Render every camera at every split time and score against the ground truth."""
    images, masks, cams, times = load_split(data_dir, split)
    preds = [[render_image(scene, cam, t, linear) for t in times] for cam in cams]
    report = evaluate_predictions(preds, images, masks, times, masked, heatmap_dir)
    if out_csv is not None:
        report.write_csv(out_csv)
    return report


def nearest_frame_baseline(data_dir, split: str = "heldout", masked: bool = True) -> EvalReport:
    """Score the nearest training frame (earlier one on ties) as the prediction."""
    images, masks, cams, times = load_split(data_dir, split)
    train_images, _, _, train_times = load_split(data_dir, "train")
    preds = []
    for c in range(len(cams)):
        row = []
        for t in times:
            j = int(np.argmin(np.abs(train_times - t) + 1e-9 * (train_times > t)))
            row.append(train_images[c, j].astype(np.float64))
        preds.append(row)
    return evaluate_predictions(preds, images, masks, times, masked)


def edge_band_error(scene: Scene, data_dir, split: str = "heldout", width: int = 2,
                    linear: bool = False) -> float:
    """Mean absolute RGB error inside the ground-truth mask boundary band."""
    from .metrics import edge_band

    images, masks, cams, times = load_split(data_dir, split)
    if masks is None:
        raise MissingFileError(_split_path(data_dir, split), "edge-band error needs masks")
    total, count = 0.0, 0
    for c, cam in enumerate(cams):
        for j, t in enumerate(times):
            band = edge_band(masks[c, j], width)
            heat = error_heatmap(quantize(render_image(scene, cam, t, linear)), quantize(images[c, j]))
            total += heat[band].sum()
            count += int(band.sum())
    return total / max(count, 1)
