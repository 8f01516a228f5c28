"""Readers and writers for every on-disk format the package touches.

Checkpoint layout (all little-endian)::

    magic      4s   b"R4GS"
    version    u32  1
    count      u64  number of primitives
    frames     u32  TimeGrid.frame_count
    sh_degree  u32
    float_size u32  4 or 8: width of the optimizable fields
    t_start    f64
    delta_t    f64
    epsilon    f64
    records    count fixed-width records:
               mu_tau, tau_l, tau_r (f64), then mu, v1, v2, v3, log_scale (3 floats each),
               rot_c0, rot_c1 (4 each), sh ((degree+1)^2 * 3), opacity_logit (1)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ContractViolation, DimensionMismatchError, FormatError, MissingFileError
from .scene import OPTIMIZABLE_FIELDS, Camera, Scene, TimeGrid

CKPT_MAGIC = b"R4GS"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQIII3d")
FLO_MAGIC = 202021.25


def _require(path: Path):
    if not path.is_file():
        raise MissingFileError(path, "file not found")


def _record_dtype(sh_degree: int, float_size: int) -> np.dtype:
    f = "<f4" if float_size == 4 else "<f8"
    k = (sh_degree + 1) ** 2
    return np.dtype([
        ("mu_tau", "<f8"), ("tau_l", "<f8"), ("tau_r", "<f8"),
        ("mu", f, 3), ("v1", f, 3), ("v2", f, 3), ("v3", f, 3), ("log_scale", f, 3),
        ("rot_c0", f, 4), ("rot_c1", f, 4), ("sh", f, k * 3), ("opacity_logit", f),
    ])


def save_checkpoint(scene: Scene, path) -> None:
    path = Path(path)
    float_size = 8 if scene.dtype == torch.float64 else 4
    dt = _record_dtype(scene.sh_degree, float_size)
    rec = np.zeros(len(scene), dtype=dt)
    for name in ("mu_tau", "tau_l", "tau_r") + OPTIMIZABLE_FIELDS:
        rec[name] = getattr(scene, name).detach().cpu().numpy().reshape(rec[name].shape)
    g = scene.grid
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(scene), g.frame_count, scene.sh_degree,
                               float_size, g.t_start, g.delta_t, g.epsilon)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_checkpoint(path) -> Scene:
    path = Path(path)
    _require(path)
    data = path.read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise FormatError(path, "malformed header: file shorter than checkpoint header")
    magic, version, count, frames, sh_degree, float_size, t_start, delta_t, eps = \
        _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise FormatError(path, f"malformed header: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(path, f"unsupported checkpoint version {version}")
    if float_size not in (4, 8) or sh_degree > 2:
        raise FormatError(path, "malformed header: bad float size or SH degree")
    dt = _record_dtype(sh_degree, float_size)
    body = data[_CKPT_HEADER.size:]
    if len(body) != count * dt.itemsize:
        raise FormatError(path, f"truncated records: expected {count * dt.itemsize} bytes, got {len(body)}")
    rec = np.frombuffer(body, dtype=dt, count=count)
    tdt = torch.float32 if float_size == 4 else torch.float64
    k = (sh_degree + 1) ** 2
    fields = {}
    for name in ("mu_tau", "tau_l", "tau_r"):
        fields[name] = torch.from_numpy(rec[name].astype(np.float64))
    for name in OPTIMIZABLE_FIELDS:
        arr = np.array(rec[name])
        if name == "sh":
            arr = arr.reshape(count, k, 3)
        fields[name] = torch.from_numpy(arr).to(tdt)
    grid = TimeGrid(frame_count=frames, t_start=t_start, delta_t=delta_t, epsilon=eps)
    return Scene(grid=grid, sh_degree=sh_degree, **fields)


def write_flo(path, flow: np.ndarray) -> None:
    """Middlebury .flo: magic, width, height, then interleaved float32 (u, v)."""
    flow = np.asarray(flow, dtype="<f4")
    h, w, c = flow.shape
    if c != 2:
        raise ContractViolation("flow must have 2 channels")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(flow.tobytes())


def read_flo(path) -> np.ndarray:
    path = Path(path)
    _require(path)
    data = path.read_bytes()
    if len(data) < 12:
        raise FormatError(path, "malformed header: .flo file shorter than 12 bytes")
    magic, w, h = struct.unpack_from("<fii", data)
    if magic != FLO_MAGIC:
        raise FormatError(path, f"malformed header: bad .flo magic {magic}")
    if w <= 0 or h <= 0:
        raise FormatError(path, f"malformed header: bad size {w}x{h}")
    n = w * h * 2 * 4
    if len(data) - 12 != n:
        raise FormatError(path, f"truncated .flo payload: expected {n} bytes, got {len(data) - 12}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).copy()


def write_pfm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype="<f4")
    color = img.ndim == 3
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    _require(path)
    with open(path, "rb") as fh:
        try:
            kind = fh.readline().strip()
            w, h = (int(v) for v in fh.readline().split())
            scale = float(fh.readline().strip())
        except ValueError as exc:
            raise FormatError(path, f"malformed header: {exc}") from None
        if kind not in (b"PF", b"Pf"):
            raise FormatError(path, f"malformed header: bad PFM kind {kind!r}")
        c = 3 if kind == b"PF" else 1
        endian = "<" if scale < 0 else ">"
        raw = fh.read()
    n = w * h * c * 4
    if len(raw) != n:
        raise FormatError(path, f"truncated PFM payload: expected {n} bytes, got {len(raw)}")
    img = np.frombuffer(raw, dtype=endian + "f4").reshape((h, w, c) if c == 3 else (h, w))
    return img[::-1].astype(np.float32)


def write_png(path, img: np.ndarray) -> None:
    """Write [H, W, 3] or [H, W] floats in [0, 1] (or bools) as 8-bit PNG."""
    a = np.asarray(img)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    elif a.dtype != np.uint8:
        a = np.round(np.clip(a.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(a).save(path)


def read_png(path) -> np.ndarray:
    """8-bit PNG to float32 in [0, 1]; RGB images are returned as [H, W, 3]."""
    path = Path(path)
    _require(path)
    try:
        with Image.open(path) as im:
            a = np.asarray(im)
    except Exception as exc:  # PIL raises a zoo of types for broken files
        raise FormatError(path, f"unreadable PNG: {exc}") from None
    if a.ndim == 3:
        a = a[..., :3]
    return a.astype(np.float32) / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    return read_pfm(path) if path.suffix.lower() == ".pfm" else read_png(path)


def write_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """Binary little-endian PLY with float xyz and uchar rgb (colors in [0, 1])."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.round(np.clip(np.asarray(colors, dtype=np.float64).reshape(-1, 3), 0, 1) * 255)
    n = len(pts)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.zeros(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                             ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    rec["x"], rec["y"], rec["z"] = pts.T
    rec["red"], rec["green"], rec["blue"] = cols.astype(np.uint8).T
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int": "<i4", "uint": "<u4",
              "short": "<i2", "ushort": "<u2"}


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (points [N, 3] float64, colors [N, 3] float64 in [0, 1])."""
    path = Path(path)
    _require(path)
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(path, "malformed header: not a PLY file")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    count = None
    props = []
    fmt = None
    in_vertex = False
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list" or parts[1] not in _PLY_TYPES:
                raise FormatError(path, f"malformed header: unsupported property {line!r}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(path, f"malformed header: unsupported format {fmt!r}")
    names = [p[0] for p in props]
    for req in ("x", "y", "z", "red", "green", "blue"):
        if req not in names:
            raise FormatError(path, f"malformed header: missing property {req}")
    if count is None:
        raise FormatError(path, "malformed header: no vertex element")
    dt = np.dtype(props)
    body = data[end + len(b"end_header\n"):]
    if len(body) < count * dt.itemsize:
        raise FormatError(path, f"truncated PLY body: expected {count * dt.itemsize} bytes, got {len(body)}")
    rec = np.frombuffer(body, dtype=dt, count=count)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64) / 255.0
    return pts, cols


def camera_to_dict(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "R": [float(v) for v in cam.rotation.reshape(-1)],
        "t": [float(v) for v in cam.translation.reshape(-1)],
    }


def write_cameras(path, cameras: list[Camera]) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cameras], indent=1))


def read_cameras(path) -> list[Camera]:
    path = Path(path)
    _require(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"invalid JSON: {exc}") from None
    if not isinstance(raw, list):
        raise FormatError(path, "expected a JSON array of cameras")
    cams = []
    for i, obj in enumerate(raw):
        try:
            if len(obj["R"]) != 9 or len(obj["t"]) != 3:
                raise DimensionMismatchError(path, f"camera {i}: R needs 9 values and t needs 3")
            cams.append(Camera(float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]),
                               np.array(obj["R"], dtype=np.float64).reshape(3, 3),
                               np.array(obj["t"], dtype=np.float64), int(obj["width"]), int(obj["height"])))
        except (KeyError, TypeError) as exc:
            raise FormatError(path, f"camera {i}: missing or invalid field {exc}") from None
    return cams
