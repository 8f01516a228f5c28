"""End-to-end acceptance checks; each test logs one pass/fail line.

The synthetic-suite runs (criteria 5-7) share one session-cached set of
trainings: five scenes, the full method and four ablations each.
"""
import time

import numpy as np
import pytest
import torch

from retime4d.density import StretchConfig, dynamic_stretch, mcmc_relocate
from retime4d.errors import FormatError, MissingFileError
from retime4d.evaluate import edge_band_error, evaluate, nearest_frame_baseline
from retime4d.ingest import init_scene, load_bundle
from retime4d.io import (load_checkpoint, read_cameras, read_flo, read_ply, save_checkpoint, write_cameras,
                         write_flo, write_ply)
from retime4d.render import FlowDir, Group, RenderRequest, render_group_with_flow
from retime4d.scene import PRIMITIVE_FIELDS, Camera, Primitive, Scene, TimeGrid
from retime4d.spline import control_points, position_at
from retime4d.synth import BlobTrack, SceneScript, generate, mean_motion_px, standard_suite
from retime4d.temporal import TemporalConfig, sigmoid, temporal_opacity
from retime4d.train import TrainConfig, train

from helpers import fd_gradient_error, front_camera, random_scene, record, tiny_script

# Stretch match thresholds used for every suite scene (fractions of scene extent).
SUITE_STRETCH = dict(vel_tol=0.03, nn_radius=0.05, color_tol=0.3)

ABLATIONS = {
    "no_flow_supervision": dict(lambda_flow=0.0),
    "no_triple_rendering": dict(triple_rendering=False),
    "linear_trajectory": dict(linear_trajectory=True),
    "no_stretching": dict(stretching=False),
}
SCENES = [s.name for s in standard_suite()]


# 1 -------------------------------------------------------------------------

def test_criterion_1_gradients_match_finite_differences():
    # Stencils crossing the 3-sigma footprint edge or a depth-order swap make the
    # loss jump (second difference ~1e-3 against ~1e-8 when smooth); such draws
    # are not differentiable there and are redrawn.
    start = time.perf_counter()
    worst, where, accepted, redrawn, seed = 0.0, "", 0, 0, 1000
    cam = front_camera(16)
    while accepted < 20:
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, n=3, frames=4)
        k = int(scene.interval_index[0])
        reqs = (RenderRequest(cam, k + float(rng.uniform(0.05, 0.95))),
                RenderRequest(cam, float(k), Group.next_of(k), FlowDir.FWD))
        results = [fd_gradient_error(scene, req, h=1e-5, seed=seed, with_jump=True) for req in reqs]
        seed += 1
        if max(jump for _, jump in results) > 1e-6:
            redrawn += 1
            continue
        accepted += 1
        for (errs, _), kind in zip(results, ("color", "flow")):
            name = max(errs, key=errs.get)
            if errs[name] > worst:
                worst, where = errs[name], f"seed {seed - 1}, {kind} {name}"
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 120
    assert record("1 gradient correctness", ok,
                  f"max relative error {worst:.2e} ({where}) over 20 configurations x (color, flow), "
                  f"{redrawn} draws with a discontinuous stencil redrawn, {elapsed:.1f} s")


# 2 -------------------------------------------------------------------------

def test_criterion_2_temporal_opacity_laws():
    grid = TimeGrid(9)
    cfg = TemporalConfig.for_grid(grid)
    prim = lambda k: Primitive.create(grid.interval_mid(k), dtype=torch.float64)
    partition = max(abs(float(temporal_opacity(prim(i - 1), grid.time(i), grid, cfg)
                              + temporal_opacity(prim(i), grid.time(i), grid, cfg)) - 1.0)
                    for i in range(1, grid.frame_count - 1))
    plateau = min(float(temporal_opacity(prim(k), torch.linspace(k + 5 * cfg.gamma, k + 1 - 5 * cfg.gamma, 201,
                                                                 dtype=torch.float64), grid, cfg).min())
                  for k in range(grid.interval_count))
    ends = max(abs(float(temporal_opacity(prim(0), grid.t_start, grid, cfg)) - 1.0),
               abs(float(temporal_opacity(prim(grid.interval_count - 1), grid.t_end, grid, cfg)) - 1.0))
    ok = partition <= 1e-6 and plateau >= sigmoid(5.0) ** 2 - 1e-12 and ends <= 1e-9
    assert record("2 temporal-opacity laws", ok,
                  f"partition error {partition:.1e}, plateau min {plateau:.6f} "
                  f"(bound {sigmoid(5.0) ** 2:.6f}), boundary error {ends:.1e}")


# 3 -------------------------------------------------------------------------

def test_criterion_3_spline_laws():
    grid = TimeGrid(7)
    rng = np.random.default_rng(3)
    endpoint = 0.0
    for k in range(grid.interval_count):
        p = Primitive.create(grid.interval_mid(k), mu=rng.normal(size=3), v1=rng.normal(size=3),
                             v2=rng.normal(size=3), v3=rng.normal(size=3), dtype=torch.float64)
        cp = control_points(p, grid)
        endpoint = max(endpoint, float((position_at(p, grid.time(k), grid) - cp.p1).abs().max()),
                       float((position_at(p, grid.time(k + 1), grid) - cp.p2).abs().max()))
    z = np.zeros(3)
    still = Primitive.create(2.5, mu=(0.4, -0.1, 0.9), v1=z, v2=z, v3=z, dtype=torch.float64)
    ts = torch.linspace(-1.0, 7.0, 33, dtype=torch.float64)
    static = float((position_at(still, ts, grid) - still.mu).abs().max())
    v = rng.normal(size=3)
    line = Primitive.create(3.5, mu=rng.normal(size=3), v1=v, v2=v, v3=v, dtype=torch.float64)
    dense = np.linspace(3.0, 4.0, 4097)
    oracle = line.mu.numpy()[None] + (dense - 3.5)[:, None] * v[None]
    linear = float(np.abs(position_at(line, torch.from_numpy(dense), grid).numpy() - oracle).max())
    ok = endpoint <= 1e-12 and static <= 1e-12 and linear <= 1e-9
    assert record("3 spline laws", ok,
                  f"endpoint error {endpoint:.1e}, static drift {static:.1e}, collinear error {linear:.1e}")


# 4 -------------------------------------------------------------------------

def test_criterion_4_conservation():
    rng = np.random.default_rng(4)
    scene = random_scene(rng, n=40, frames=6)
    n = len(scene)
    counts = set()
    for _ in range(1000):
        with torch.no_grad():
            scene.opacity_logit[torch.from_numpy(rng.random(n) < 0.15)] = -9.0
        scene = mcmc_relocate(scene, 0.01, rng).scene
        counts.add(len(scene))
    grid = TimeGrid(9)
    base = rng.uniform(-1, 1, (30, 3))
    prims = [Primitive.create(grid.interval_mid(k), mu=base[j] + rng.normal(0, 2e-3, 3),
                              sh=np.full((4, 3), 0.3), dtype=torch.float64)
             for k in range(grid.interval_count) for j in range(30)]
    s = Scene.from_primitives(grid, prims, 1, dtype=torch.float64)
    lattice_ok, grew = True, False
    for _ in range(100):
        before = len(s)
        s = dynamic_stretch(s, StretchConfig(nn_radius=0.02), rng).scene
        grew |= len(s) > before
        try:
            s.check_invariants()
        except Exception:
            lattice_ok = False
    ok = counts == {n} and lattice_ok and not grew
    assert record("4 conservation", ok,
                  f"relocation counts {sorted(counts)} (expected {n}) over 1000 events; "
                  f"lattice invariant {'held' if lattice_ok else 'broken'} over 100 stretch events, "
                  f"{(s.duration() > 1).double().mean():.0%} of primitives stretched")


# 5-7 -----------------------------------------------------------------------

@pytest.fixture(scope="session")
def suite_runs(suite_dirs):
    """Held-out metrics of the full method and each ablation on every suite scene."""
    runs = {}
    for name, data in suite_dirs.items():
        bundle, cams, clouds = load_bundle(data)
        runs[name] = {}
        for label, extra in {"full": {}, **ABLATIONS}.items():
            cfg = TrainConfig(**SUITE_STRETCH, **extra)
            scene = init_scene(clouds, cams, bundle, cfg.budget, seed=cfg.seed, use_flow=cfg.flow_init)
            start = time.perf_counter()
            res = train(scene, bundle, cams, cfg)
            elapsed = time.perf_counter() - start
            report = evaluate(res.scene, data, "heldout")
            entry = {"psnr": report.mean_psnr, "ssim": report.mean_ssim, "seconds": elapsed}
            if name == "circular" and label in ("full", "linear_trajectory"):
                entry["edge"] = edge_band_error(res.scene, data, "heldout")
            if name == "static_dynamic" and label == "full":
                entry["scene"] = res.scene
            runs[name][label] = entry
            print(f"{name:16s} {label:20s} PSNR {entry['psnr']:.2f} SSIM {entry['ssim']:.4f} ({elapsed:.0f} s)")
        runs[name]["baseline"] = nearest_frame_baseline(data).mean_psnr
        runs[name]["motion_px"] = mean_motion_px(next(s for s in standard_suite() if s.name == name))
    return runs


def test_criterion_5a_beats_nearest_frame_baseline(suite_runs):
    lines, ok = [], True
    for name in SCENES:
        r = suite_runs[name]
        gain = r["full"]["psnr"] - r["baseline"]
        large = r["motion_px"] >= 10.0
        if large and gain < 3.0:
            ok = False
        lines.append(f"{name} {r['full']['psnr']:.2f} vs {r['baseline']:.2f} dB "
                     f"(+{gain:.2f}, motion {r['motion_px']:.1f} px{'' if large else ', not required'})")
    slowest = max(r[label]["seconds"] for r in suite_runs.values() for label in ("full", *ABLATIONS))
    ok = ok and slowest < 30 * 60
    assert record("5a interpolation vs nearest frame", ok,
                  "; ".join(lines) + f"; slowest run {slowest:.0f} s")


@pytest.mark.parametrize("ablation", list(ABLATIONS))
def test_criterion_5b_beats_each_ablation(suite_runs, ablation):
    wins = [name for name in SCENES if suite_runs[name]["full"]["psnr"] > suite_runs[name][ablation]["psnr"]]
    detail = ", ".join(f"{name} {suite_runs[name]['full']['psnr']:.2f}/{suite_runs[name][ablation]['psnr']:.2f}"
                       for name in SCENES)
    assert record(f"5b full vs {ablation}", len(wins) >= 4,
                  f"full wins on {len(wins)}/5 scenes (full/ablation dB: {detail})")


def test_criterion_6_spline_reduces_edge_error(suite_runs):
    r = suite_runs["circular"]
    spline, linear = r["full"]["edge"], r["linear_trajectory"]["edge"]
    assert record("6 spline vs linear edge error", spline <= 0.8 * linear,
                  f"circular edge-band error spline {spline:.4f}, linear {linear:.4f}, "
                  f"ratio {spline / linear:.3f} (need <= 0.8)")


def _static_region(scene: Scene, script: SceneScript) -> np.ndarray:
    """True for primitives whose nearest blob surface (at their temporal center) is static."""
    mu = scene.mu.detach().double().numpy()
    times = scene.mu_tau.numpy()
    out = np.zeros(len(mu), dtype=bool)
    for t in np.unique(times):
        rows = np.nonzero(times == t)[0]
        blob, _ = script.nearest_blob(mu[rows], script.script_time(float(t)))
        out[rows] = [script.blobs[b].is_static for b in blob]
    return out


def test_criterion_7_stretching_effectiveness(suite_runs):
    scene = suite_runs["static_dynamic"]["full"]["scene"]
    script = next(s for s in standard_suite() if s.name == "static_dynamic")
    static = _static_region(scene, script)
    duration = scene.duration().numpy()
    stretched = float((duration[static] > 1 + 1e-9).mean())
    moving_kept = float((np.abs(duration[~static] - 1) < 1e-9).mean())
    ratio = float(duration.sum() / len(duration))
    ok = stretched >= 0.6 and ratio > 1.3 and moving_kept >= 0.9
    assert record("7 stretching effectiveness", ok,
                  f"{stretched:.1%} of {static.sum()} static-region primitives stretched, "
                  f"{moving_kept:.1%} of {(~static).sum()} moving-region primitives keep one interval, "
                  f"effective-count ratio {ratio:.2f}")


# 8 -------------------------------------------------------------------------

def translating_blob() -> SceneScript:
    return SceneScript("translating", [
        BlobTrack("linear", center=(-0.7, -0.2, 0.0), velocity=(0.09, 0.03, 0.0), size=0.4,
                  pattern="gradient", color=(0.9, 0.5, 0.2), color2=(0.2, 0.6, 0.9)),
    ], width=96, height=96, seed=8)


def test_criterion_8_flow_map_fidelity(tmp_path):
    data = generate(translating_blob(), tmp_path / "translating")
    bundle, cams, clouds = load_bundle(data)
    cfg = TrainConfig(**SUITE_STRETCH)
    scene = init_scene(clouds, cams, bundle, cfg.budget, seed=cfg.seed)
    trained = train(scene, bundle, cams, cfg).scene
    tcfg = TemporalConfig.for_grid(trained.grid, cfg.gamma)
    errors, on_mask = [], []
    for c, cam in enumerate(cams):
        for i in range(1, bundle.frame_count - 1):
            for group in (Group.prev_of(i), Group.next_of(i)):
                with torch.no_grad():
                    out = render_group_with_flow(trained, cam, float(i), group, tcfg, False,
                                                 (FlowDir.FWD, FlowDir.BWD))
                sel = out.alpha.numpy() > 0.5
                for pred, gt in ((out.fwd, bundle.fwd_at(c, i)), (out.bwd, bundle.bwd_at(c, i))):
                    epe = np.linalg.norm(pred.numpy() - gt, axis=-1)
                    errors.append(epe[sel])
                    on_mask.append(epe[sel & bundle.masks[c, i]])
    epe, fg = np.concatenate(errors), np.concatenate(on_mask)
    mean = float(epe.mean())
    assert record("8 flow-map fidelity", mean < 0.5,
                  f"mean endpoint error {mean:.3f} px over {len(epe)} pixels with alpha > 0.5 "
                  f"(90th percentile {np.quantile(epe, 0.9):.3f} px; {fg.mean():.3f} px inside the object mask)")


# 9 -------------------------------------------------------------------------

def test_criterion_9_determinism(tiny_dataset, tmp_path):
    bundle, cams, clouds = load_bundle(tiny_dataset)
    cfg = TrainConfig(**SUITE_STRETCH).scaled(150)
    blobs = []
    for run in ("a", "b"):
        scene = init_scene(clouds, cams, bundle, 800, seed=cfg.seed)
        res = train(scene, bundle, cams, cfg, loss_csv=tmp_path / f"{run}.csv")
        save_checkpoint(res.scene, tmp_path / f"{run}.r4d")
        blobs.append(((tmp_path / f"{run}.csv").read_bytes(), (tmp_path / f"{run}.r4d").read_bytes(), res.events))
    same_loss = blobs[0][0] == blobs[1][0]
    same_ckpt = blobs[0][1] == blobs[1][1]
    assert record("9 determinism", same_loss and same_ckpt,
                  f"loss history identical: {same_loss}, checkpoint identical: {same_ckpt}, "
                  f"{len(blobs[0][2])} density events per run")


# 10 ------------------------------------------------------------------------

def test_criterion_10_format_round_trips(tmp_path):
    rng = np.random.default_rng(10)
    checks = {}
    s = random_scene(rng, n=9)
    save_checkpoint(s, tmp_path / "s.r4d")
    back = load_checkpoint(tmp_path / "s.r4d")
    checks["checkpoint"] = all(torch.equal(getattr(s, f), getattr(back, f)) for f in PRIMITIVE_FIELDS)
    flow = rng.normal(size=(7, 5, 2)).astype(np.float32)
    write_flo(tmp_path / "f.flo", flow)
    checks[".flo"] = np.array_equal(read_flo(tmp_path / "f.flo"), flow)
    pts, cols = rng.normal(size=(30, 3)), rng.random((30, 3))
    write_ply(tmp_path / "p.ply", pts, cols)
    p2, c2 = read_ply(tmp_path / "p.ply")
    checks["PLY"] = np.array_equal(p2, pts.astype(np.float32)) and np.abs(c2 - cols).max() <= 0.5 / 255 + 1e-12
    cams = [Camera.look_at((1.0, 0.4, -3.0), (0, 0, 0), (0, 1, 0), 60, 61, 40, 30)]
    write_cameras(tmp_path / "c.json", cams)
    c = read_cameras(tmp_path / "c.json")[0]
    checks["cameras.json"] = (np.array_equal(c.rotation, cams[0].rotation)
                              and np.array_equal(c.translation, cams[0].translation)
                              and (c.fx, c.fy, c.cx, c.cy) == (cams[0].fx, cams[0].fy, cams[0].cx, cams[0].cy))
    typed = {}
    for name, data, reader in (("checkpoint", (tmp_path / "s.r4d").read_bytes()[:-7], load_checkpoint),
                               (".flo", (tmp_path / "f.flo").read_bytes()[:6], read_flo),
                               ("PLY", (tmp_path / "p.ply").read_bytes()[:-9], read_ply),
                               ("cameras.json", b"[{\"fx\": 1}]", read_cameras)):
        bad = tmp_path / f"bad_{name.strip('.')}"
        bad.write_bytes(data)
        try:
            reader(bad)
            typed[name] = False
        except FormatError as exc:
            typed[name] = bad.name in str(exc)
    try:
        read_flo(tmp_path / "missing.flo")
        typed["missing"] = False
    except MissingFileError:
        typed["missing"] = True
    ok = all(checks.values()) and all(typed.values())
    assert record("10 format round-trips", ok,
                  "round trips " + ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items())
                  + "; malformed inputs typed " + ", ".join(f"{k} {'ok' if v else 'FAILED'}"
                                                            for k, v in typed.items()))
