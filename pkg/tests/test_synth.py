import json
import math

import numpy as np
import pytest
from scipy import ndimage

from retime4d.errors import ContractViolation
from retime4d.ingest import load_bundle
from retime4d.io import read_flo, read_png
from retime4d.synth import (BlobTrack, CameraRing, SceneScript, generate, mean_motion_px, render_frame,
                            standard_suite, static_area_fraction)

from helpers import tiny_script


def test_standard_suite_has_five_deterministic_scenes():
    a, b = standard_suite(), standard_suite()
    assert len(a) == 5
    assert [s.name for s in a] == ["accelerating", "circular", "static_dynamic", "visibility", "textured_deform"]
    assert [s.to_toml() for s in a] == [s.to_toml() for s in b]
    for s in a:
        assert s.width == 128 and s.height == 128 and s.cameras.count == 8
        assert len(s.train_frames) == 9


def test_circular_scene_moves_at_least_ten_pixels_per_frame():
    circular = standard_suite()[1]
    motion = mean_motion_px(circular)
    print(f"circular mean motion {motion:.1f} px per train frame")
    assert motion >= 10.0


def test_static_dynamic_scene_is_mostly_static():
    sd = standard_suite()[2]
    frac = static_area_fraction(sd)
    print(f"static area fraction {frac:.3f}")
    assert frac >= 0.4


def test_stride_arithmetic():
    s = tiny_script(frames=9, stride=2)
    assert s.train_frames == [0, 2, 4, 6, 8] and s.heldout_frames == [1, 3, 5, 7]


def test_static_only_script_writes_zero_flows(tmp_path):
    script = tiny_script(blobs=[BlobTrack("static", center=(0, 0, 0), size=0.4, pattern="checker")],
                         frames=5, points_per_frame=200)
    generate(script, tmp_path)
    flows = list((tmp_path / "train").rglob("*.flo"))
    assert len(flows) == 3 * 2 * 2
    for f in flows:
        assert not read_flo(f).any()


def test_circular_midpoint_is_analytic():
    r, theta = 0.8, 0.4
    blob = BlobTrack("circular", center=(0, 0, 0), radius=r, axis=(0, 0, 1), omega=theta / 2, size=0.2)
    start, mid, end = blob.position(0), blob.position(1), blob.position(2)
    assert np.linalg.norm(mid) == pytest.approx(r)
    cos = lambda a, b: float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    assert math.acos(cos(start, mid)) == pytest.approx(theta / 2)
    assert math.acos(cos(start, end)) == pytest.approx(theta)
    # the held-out frame shows the blob where the analytic midpoint projects
    script = tiny_script(blobs=[blob], frames=3, stride=2)
    cam = script.make_cameras()[1]
    _, cov = render_frame(script, cam, 1)
    ys, xs = np.nonzero(cov > 0.5)
    uv, _ = cam.project(mid[None])
    assert np.hypot(xs.mean() + 0.5 - uv[0, 0], ys.mean() + 0.5 - uv[0, 1]) < 1.0


def test_splits_are_disjoint_and_consistent(tiny_dataset):
    train = json.loads((tiny_dataset / "train" / "split.json").read_text())
    held = json.loads((tiny_dataset / "heldout" / "split.json").read_text())
    assert not set(train["script_frames"]) & set(held["script_frames"])
    assert train["times"] == [0.0, 1.0, 2.0, 3.0, 4.0] and held["times"] == [0.5, 1.5, 2.5, 3.5]
    assert not list((tiny_dataset / "heldout").rglob("*.flo"))
    assert not (tiny_dataset / "heldout" / "points").exists()
    script = tiny_script()
    cam = script.make_cameras()[0]
    img, _ = render_frame(script, cam, 3)
    assert np.abs(read_png(tiny_dataset / "heldout" / "cam0" / "frame1.png") - img).max() <= 0.5 / 255 + 1e-6


def test_generate_is_deterministic(tmp_path):
    script = tiny_script(frames=3, points_per_frame=100, width=24, height=24)
    generate(script, tmp_path / "a")
    generate(script, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


@pytest.mark.parametrize("name", [s.name for s in standard_suite()])
def test_flows_warp_frames_consistently(suite_dirs, name):
    bundle, _, _ = load_bundle(suite_dirs[name])
    errors = []
    for c in range(bundle.camera_count):
        for i in range(bundle.frame_count - 1):
            src, dst = bundle.images[c, i].astype(np.float64), bundle.images[c, i + 1].astype(np.float64)
            flow = bundle.fwd_at(c, i)
            h, w = flow.shape[:2]
            ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
            ty, tx = ys + flow[..., 1], xs + flow[..., 0]
            # interior of the blob at both ends; silhouettes mix surfaces
            inner_src = ndimage.binary_erosion(bundle.masks[c, i], iterations=2)
            inner_dst = ndimage.binary_erosion(bundle.masks[c, i + 1], iterations=2)
            land = ndimage.map_coordinates(inner_dst.astype(np.float64), [ty, tx], order=0, mode="constant") > 0.5
            sel = inner_src & land
            warped = np.stack([ndimage.map_coordinates(dst[..., k], [ty, tx], order=1, mode="nearest")
                               for k in range(3)], axis=-1)
            errors.append(np.abs(warped - src)[sel].mean())
    err = float(np.mean(errors))
    print(f"{name}: mean warp error {err * 255:.3f}/255")
    assert err < 2 / 255


def test_script_toml_round_trip_and_validation(tmp_path):
    script = standard_suite()[3]
    (tmp_path / "s.toml").write_text(script.to_toml())
    back = SceneScript.from_toml(tmp_path / "s.toml")
    assert back.to_toml() == script.to_toml()
    with pytest.raises(ContractViolation):
        BlobTrack("wobbly")
    with pytest.raises(ContractViolation):
        CameraRing(count=1)
    with pytest.raises(ContractViolation):
        SceneScript("empty", [])
