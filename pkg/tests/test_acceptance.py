"""Acceptance criteria 1-11, one test each.

Every test records a single PASS/FAIL line (shown in the terminal summary)
before asserting, so a failing criterion still reports its measurements.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from splatdepth.appearance import AsgBank, frame_from_axis
from splatdepth.cli import main as cli_main
from splatdepth.depth import WindowSearchConfig, extract_all, first_surface_depth
from splatdepth.losses import LossWeights, rgb_loss, stage_total
from splatdepth.metrics import chamfer, f1_score, nearest_distances
from splatdepth.pipeline import run as run_pipeline
from splatdepth.rasterizer import SplatFragmentList, composite, render_view, set_threads
from splatdepth.scene import SceneFile, load_scene
from splatdepth.synth import SynthSpec, _plane_mesh, dilemma_report, generate
from splatdepth.trainer import (FROZEN_STAGE2, GROUPS, TrainConfig, TrainView, init_state,
                                load_checkpoint, save_checkpoint, smoothed, train_stage1,
                                train_stage2, view_loss)

from conftest import CRITERIA, camera, random_scene
from oracles import composite_naive, nearest_brute, transmittance_naive, window_search_naive

DT = 0.003


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA.append(line)
    print(line)


# --------------------------------------------------------------------------
# 1. window search equals the exhaustive anchored-window enumeration


def _random_fragment_lists(rng, count):
    out = []
    for _ in range(count):
        n = int(rng.integers(1, 201))
        if rng.random() < 0.5:
            a = rng.uniform(0.001, 0.08, n)          # many fragments inside the band
        else:
            a = rng.uniform(0.004, 0.6, n)
        span = float(rng.choice([0.002, 0.005, 0.02, 0.2]))
        d = rng.uniform(1.0, 1.0 + span, n)
        if rng.random() < 0.5:
            d = np.sort(d)
        out.append(SplatFragmentList.from_alphas(a, plane_depth=d))
    return out


def test_c1_window_search_oracle():
    rng = np.random.default_rng(101)
    cfg = WindowSearchConfig()
    lists = _random_fragment_lists(rng, 10_000)
    t0 = time.perf_counter()
    results = [first_surface_depth(f, cfg, fallback=-1.0) for f in lists]
    elapsed = time.perf_counter() - t0
    bad = 0
    worst = 0.0
    for f, r in zip(lists, results):
        depth, w, members = window_search_naive(f.T, f.alpha, f.plane_depth, cfg.t_start,
                                                cfg.t_end, cfg.dt)
        if math.isnan(depth):
            bad += not (r.no_candidate and r.depth == -1.0)
            continue
        err = abs(r.depth - depth)
        worst = max(worst, err)
        if list(r.members) != members or err > 1e-12 or abs(r.weight - w) > 1e-12:
            bad += 1
    ok = bad == 0 and elapsed < 10.0
    record(1, ok, f"{bad} mismatches in 10^4 lists, max depth diff {worst:.2e}, "
                  f"library time {elapsed:.2f} s (< 10 s)")
    assert ok


# --------------------------------------------------------------------------
# 2. first-surface error bounded by the window; blended depth pulled to the wall


def _c2_specs():
    rng = np.random.default_rng(202)
    for seed in range(20):
        yield SynthSpec(
            scenario="plate-over-wall", seed=seed, n_views=2, width=128, height=128,
            plate_opacity=float(rng.uniform(0.62, 0.66)),
            d1=float(rng.uniform(0.95, 1.05)), d2=float(rng.uniform(1.45, 1.6)),
        )


def test_c2_depth_error_bound():
    worst_first = 0.0
    worst_ratio = math.inf
    fails = []
    for spec in _c2_specs():
        scene, gt = generate(spec)
        errs_u = []
        for cam, vt in zip(gt.cameras, gt.views):
            m = extract_all(scene, cam, WindowSearchConfig())
            plate = vt.mask > 0
            worst_first = max(worst_first, float(np.abs(m.first[plate] - spec.d1).max()))
            errs_u.append(np.abs(m.unbiased[plate] - spec.d1))
        ratio = float(np.concatenate(errs_u).mean()) / (spec.d2 - spec.d1)
        worst_ratio = min(worst_ratio, ratio)
        if ratio < 0.3:
            fails.append(spec.seed)
    ok = worst_first <= DT and not fails
    record(2, ok, f"max |D_first - d1| = {worst_first * 1000:.3f} mm (<= 3 mm); "
                  f"min mean|D_unbiased - d1|/(d2 - d1) = {worst_ratio:.3f} (>= 0.3) over 20 configs")
    assert ok


# --------------------------------------------------------------------------
# 3. nearest depth is dragged forward by floaters; first-surface is not


def test_c3_floater_pathology():
    rows_all = []
    ok = True
    for seed in (0, 1, 2):
        spec = SynthSpec(scenario="floater-field", seed=seed, n_views=2, width=96, height=96)
        scene, gt = generate(spec)
        rows = {r["estimator"]: r for r in dilemma_report(scene, gt)}
        near, first = rows["nearest"], rows["first"]
        ok &= near["signed_mean"] < -5 * DT and near["max_abs"] > 10 * DT
        ok &= first["mean_abs"] <= 2 * DT
        rows_all.append((near["signed_mean"], near["max_abs"], first["mean_abs"]))
    s = "; ".join(f"nearest mean {a * 1000:.1f} mm max {b * 1000:.1f} mm, first {c * 1000:.2f} mm"
                  for a, b, c in rows_all)
    record(3, ok, s + " (need < -15, > 30, <= 6)")
    assert ok


# --------------------------------------------------------------------------
# 4. compositing against the double loop


def test_c4_compositing():
    rng = np.random.default_rng(404)
    worst = 0.0
    monotone = True
    for _ in range(10_000):
        n = int(rng.integers(1, 201))
        alpha = rng.uniform(0.001, 0.99, n) if rng.random() < 0.5 else rng.uniform(0.001, 0.1, n)
        f = SplatFragmentList.from_alphas(
            alpha, z=np.sort(rng.uniform(0.5, 5, n)), color=rng.random((n, 3)),
            normal=rng.normal(size=(n, 3)), distance=rng.uniform(0.1, 3, n))
        out = composite(f)
        payload = np.column_stack([f.color, f.z, f.normal, f.distance])
        ref, wsum, t_final = composite_naive(f.alpha, payload)
        got = np.concatenate([out["color"], [out["depth_standard"]], out["normal"],
                              [out["distance"]]])
        worst = max(worst, float(np.abs(got - ref).max()), abs(out["alpha"] - wsum),
                    abs(out["T_final"] - t_final), abs(out["alpha"] - (1 - out["T_final"])))
        T = f.T
        monotone &= bool((np.diff(T) <= 0).all() and T[0] == 1.0)
        worst = max(worst, float(np.abs(T - transmittance_naive(f.alpha)).max()))
    ok = worst < 1e-12 and monotone
    record(4, ok, f"max deviation {worst:.2e} (< 1e-12) over 10^4 lists, transmittance "
                  f"{'monotone' if monotone else 'NOT monotone'}")
    assert ok


# --------------------------------------------------------------------------
# 5. analytic gradients against central differences


def _fd_scene(n=8, seed=0):
    """Large overlapping splats at 16x16, kept clear of every kink.

    Screen std ~6 px centred in frame: no pixel crosses the alpha cutoff or
    the 3-sigma cull.  Opacity <= 0.35 keeps the clamp and early stop
    inactive, depths 6 cm apart fix the sort order, distinct scales fix the
    normal axis, and colours stay inside (0, 1).
    """
    rng = np.random.default_rng(seed)
    z = 1.9 + 0.06 * np.arange(n)
    centers = np.column_stack([rng.uniform(-0.08, 0.08, n), rng.uniform(-0.08, 0.08, n), z])
    q = np.column_stack([np.ones(n), rng.normal(0, 0.15, (n, 3))])
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scales = np.column_stack([rng.uniform(0.5, 0.6, n), rng.uniform(0.4, 0.45, n),
                              rng.uniform(0.03, 0.05, n)])
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = rng.uniform(0.3, 0.5, (n, 3)) / 0.28209479177387814
    sh[:, 1:] = rng.normal(0, 0.05, (n, 3, 3))
    bank = AsgBank.init(2, 2, n_freqs=1, hidden=4, seed=3)
    bank.amplitude = rng.uniform(0.2, 0.6, (2, 2))
    # lobes near the mirrored view direction (about -z), so every lobe
    # parameter moves the image by a measurable amount
    for i, axis in enumerate(([0.1, -0.05, -1.0], [-0.2, 0.1, -1.0])):
        bank.frames[i] = frame_from_axis(np.asarray(axis) / np.linalg.norm(axis))
    bank.w2 = bank.w2 * 5.0
    return SceneFile.from_activated(centers, q, scales, rng.uniform(0.2, 0.35, n), sh,
                                    rng.uniform(0.2, 0.8, n), asg=rng.normal(0, 0.1, (n, 4)),
                                    sh_degree=1, asg_k=2, asg_f=2, bank=bank)


def _fd_view():
    rng = np.random.default_rng(1)
    cam = camera(16, 16)
    normals = np.zeros((16, 16, 3))
    normals[..., 2] = -1
    mask = (rng.random((16, 16)) > 0.5).astype(float)
    # targets well above every rendered value, so the L1 kink is never crossed
    return TrainView(cam, rng.uniform(0.8, 1.0, (16, 16, 3)), rng.uniform(0.8, 1.0, (16, 16, 3)),
                     mask, normals)


def _terms(state, view):
    """Every loss term, with the colour term split into its L1 and SSIM parts."""
    _, p, _ = view_loss(state, view, LossWeights(lambda_r=0.0))
    _, q, _ = view_loss(state, view, LossWeights(lambda_r=1.0))
    return {"l1": p["rgb"], "ssim": q["rgb"], "trans": p["trans"],
            "normal_prior": p["normal_prior"], "normal_consistency": p["normal_consistency"],
            "flatten": p["flatten"]}


def _leaves(state):
    out = {k: state.params[k] for k in GROUPS}
    if state.stage == 2:
        out.update({"bank." + k: state.bank[k] for k in AsgBank.TRAINABLE})
    return out


def _gradcheck(state, view, only=None, h=1e-4):
    """Per (term, group): analytic gradient and central differences."""
    leaves = {k: v for k, v in _leaves(state).items() if only is None or only(k)}
    analytic = {}
    terms = _terms(state, view)
    for name, val in terms.items():
        for t in leaves.values():
            t.grad = None
        val.backward(retain_graph=True)
        for g, t in leaves.items():
            analytic[name, g] = (t.grad.clone() if t.grad is not None
                                 else torch.zeros_like(t)).ravel()
    fd = {key: torch.zeros_like(v) for key, v in analytic.items()}
    with torch.no_grad():
        for g, t in leaves.items():
            flat = t.data.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                fp = _terms(state, view)
                flat[i] = old - h
                fm = _terms(state, view)
                flat[i] = old
                for name in terms:
                    fd[name, g][i] = (float(fp[name]) - float(fm[name])) / (2 * h)
    return analytic, fd


def test_c5_gradient_checks():
    t0 = time.perf_counter()
    view = _fd_view()
    scene = _fd_scene()
    results = {}
    st1 = init_state(scene, stage=1)
    a1, f1 = _gradcheck(st1, view)
    st2 = init_state(scene, stage=2)
    a2, f2 = _gradcheck(st2, view, only=lambda g: g == "asg" or g.startswith("bank."))
    for (name, g), ga in a1.items():
        results[name, g, 1] = (ga, f1[name, g])
    for (name, g), ga in a2.items():
        if name in ("l1", "ssim"):
            results[name, g, 2] = (ga, f2[name, g])
    elapsed = time.perf_counter() - t0

    worst = {}
    zero_bad = []
    checked = 0
    for (name, g, stage), (ga, gf) in results.items():
        nf = float(gf.norm())
        if nf < 1e-10:
            # the term does not depend on this group: the gradient must vanish too
            if float(ga.norm()) > 1e-8:
                zero_bad.append((name, g, stage))
            continue
        checked += 1
        rel = float((ga - gf).norm()) / nf
        worst[name] = max(worst.get(name, 0.0), rel)
    tol = {k: (1e-3 if k == "ssim" else 1e-4) for k in worst}
    ok = (all(worst[k] < tol[k] for k in worst) and not zero_bad and elapsed < 60.0
          and {"l1", "ssim", "trans", "normal_prior", "normal_consistency", "flatten"} <= set(worst)
          and any(g.startswith("bank.") for (_, g, s) in results if s == 2))
    detail = ", ".join(f"{k} {v:.1e}" for k, v in sorted(worst.items()))
    record(5, ok, f"max rel. error per term: {detail}; {checked} (term, group) pairs incl. ASG "
                  f"decoder; {len(zero_bad)} spurious gradients; {elapsed:.1f} s (< 60 s)")
    assert ok


# --------------------------------------------------------------------------
# 6. loss arithmetic


def test_c6_loss_arithmetic():
    w = LossWeights()
    ones = {"rgb": 1.0, "trans": 1.0, "normal_prior": 0.5, "normal_consistency": 0.5,
            "flatten": 1.0}
    total = float(stage_total(1, ones, w))
    total_b = float(stage_total(1, {"rgb": 1.0, "trans": 1.0, "normal": 1.0, "flatten": 1.0}, w))
    # constant images: every window has zero variance, so the structural index is
    # (2ab + C1) / (a^2 + b^2 + C1) with C1 = 1e-4; the loss is 0.8 |a - b| + 0.2 (1 - index)
    cases = [(0.5, 0.3, 0.18352249338429874), (0.9, 0.1, 0.7960785270089014)]
    errs = []
    for a, b, expect in cases:
        got = float(rgb_loss(np.full((16, 16, 3), a), np.full((16, 16, 3), b), 0.2))
        errs.append(abs(got - expect))
    ok = total == 101.2 and total_b == 101.2 and max(errs) < 1e-12
    record(6, ok, f"weighted total {total!r} (== 101.2 exactly); colour term on constant images "
                  f"off by {max(errs):.1e}")
    assert ok


# --------------------------------------------------------------------------
# 7. stage 2 never moves opacity or the transparency logits


def test_c7_freeze_contract(tmp_path):
    ok = True
    runs = []
    for seed, scenario in [(0, "plate-over-wall"), (1, "floater-field"), (2, "opaque-wall")]:
        spec = SynthSpec(scenario=scenario, seed=seed, n_views=2, width=32, height=32,
                         plate_spacing=0.03, wall_spacing=0.1, sh_degree=1)
        scene, gt = generate(spec)
        views = [TrainView.from_priors(c, v.priors()) for c, v in zip(gt.cameras, gt.views)]
        cfg = TrainConfig(iters_stage1=20, iters_stage2=20, densify_interval=10, seed=seed,
                          asg_k=2, asg_f=2)
        st = train_stage1(scene, views, cfg)
        ck = tmp_path / f"s1_{seed}"
        save_checkpoint(st, ck)
        before = {k: st.params[k].detach().clone() for k in FROZEN_STAGE2}
        # in memory, and again from the checkpoint on disk
        st = train_stage2(st, views, cfg)
        st_disk = train_stage2(load_checkpoint(ck, cfg), views, cfg)
        saved = load_scene(ck / "scene.splat")
        for k in FROZEN_STAGE2:
            ok &= torch.equal(st.params[k].detach(), before[k])
        after = st_disk.scene()
        ok &= after.opacity_logits.tobytes() == saved.opacity_logits.tobytes()
        ok &= after.tau_logits.tobytes() == saved.tau_logits.tobytes()
        ok &= not np.array_equal(after.sh, saved.sh)        # stage 2 did train something
        runs.append(scenario)
    record(7, ok, f"opacity and transparency logits bit-identical after stage 2 ({', '.join(runs)})")
    assert ok


# --------------------------------------------------------------------------
# 8. end to end


@pytest.mark.slow
def test_c8_end_to_end():
    t0 = time.perf_counter()
    res = run_pipeline(SynthSpec(), TrainConfig())
    elapsed = time.perf_counter() - t0
    m = res.metrics
    frozen = (res.scene.opacity_logits.tobytes() == res.stage1_scene.opacity_logits.tobytes()
              and res.scene.tau_logits.tobytes() == res.stage1_scene.tau_logits.tobytes())
    totals = [r["total"] for r in res.state.history]
    n1 = TrainConfig().iters_stage1
    s1, s2 = smoothed(totals[:n1]), smoothed(totals[n1:])
    trend = s1[-1] < s1[49] and s2[-1] < s2[49]
    ok = m["chamfer"] < 0.01 and m["f1"] > 0.7 and elapsed < 900 and frozen
    record(8, ok, f"CD {m['chamfer'] * 1000:.2f} mm (< 10), F1 {m['f1']:.3f} (> 0.7), "
                  f"P {m['precision']:.3f} R {m['recall']:.3f}, {elapsed:.0f} s (< 900), "
                  f"{m['count']} gaussians, loss trend {'down' if trend else 'NOT down'}")
    assert ok
    assert trend


# --------------------------------------------------------------------------
# 9. metric oracles


def test_c9_metric_oracles():
    plane = _plane_mesh(1.0, 0.2, 0.2, 0.01)
    cd_same = chamfer(plane, plane, n_samples=100_000)
    offset = 0.02
    other = _plane_mesh(1.0 + offset, 0.2, 0.2, 0.01)
    cd_par = chamfer(plane, other, n_samples=100_000)
    tau = 0.005
    f_same = f1_score(plane, plane, tau, with_chamfer=False).f1
    f_far = f1_score(plane.translated([0, 0, 2 * tau]), plane, tau, with_chamfer=False).f1
    rng = np.random.default_rng(909)
    a, b = rng.random((1000, 3)), rng.random((1000, 3))
    nn_exact = np.array_equal(nearest_distances(a, b), nearest_brute(a, b))
    rel = abs(cd_par - offset) / offset
    ok = cd_same < 1e-6 and rel < 0.02 and f_same == 1.0 and f_far == 0.0 and nn_exact
    record(9, ok, f"CD(identical) {cd_same:.1e}; parallel planes {cd_par * 1000:.3f} mm vs 20 mm "
                  f"({rel * 100:.2f}% < 2%); F1 identical {f_same}, 2-tau shift {f_far}; "
                  f"tree NN {'==' if nn_exact else '!='} brute force")
    assert ok


# --------------------------------------------------------------------------
# 10. determinism: manifest reruns and record permutation


def _cli(argv):
    code = cli_main(argv)
    assert code == 0, (argv, code)


def test_c10_determinism(tmp_path):
    small = ["--set", "synth.n_views=2", "--set", "synth.width=32", "--set", "synth.height=32",
             "--set", "synth.plate_spacing=0.03", "--set", "synth.wall_spacing=0.1",
             "--set", "synth.sh_degree=1"]
    train = ["--set", "train.iters_stage1=12", "--set", "train.iters_stage2=6",
             "--set", "train.densify_interval=5", "--set", "train.asg_k=2",
             "--set", "train.asg_f=2", "--set", "fuse.voxel=0.02", "--set", "eval.n_samples=5000"]
    d = tmp_path
    data = d / "data"
    runs = {
        "synth": ["synth", "--out", str(data)] + small,
        "render": ["render", "--scene", str(data / "scene_gt.splat"), "--camera",
                   str(data / "views"), "--out", str(d / "render")],
        "extract-depth": ["extract-depth", "--scene", str(data / "scene_gt.splat"), "--camera",
                          str(data / "views"), "--out", str(d / "depth"), "--stage", "1"],
        "loss-report": ["loss-report", "--scene", str(data / "scene_gt.splat"), "--view",
                        str(data / "views" / "cam_000.json"), "--priors", str(data / "priors"),
                        "--out", str(d / "loss.json")],
        "train": ["train", "--scene-init", str(data / "scene_gt.splat"), "--views",
                  str(data / "views"), "--priors", str(data / "priors"), "--out",
                  str(d / "ckpt"), "--report"] + train,
        "fuse": ["fuse", "--depths", str(d / "depth"), "--cameras", str(data / "views"),
                 "--out", str(d / "mesh.ply"), "--set", "fuse.voxel=0.02"],
        "eval": ["eval", "--pred", str(d / "mesh.ply"), "--gt", str(data / "gt_mesh.ply"),
                 "--out", str(d / "eval.json"), "--set", "eval.n_samples=5000"],
        "eval-img": ["eval-img", "--pred", str(d / "render" / "cam_000" / "color.png"),
                     "--gt", str(data / "views" / "image_000.png"), "--out", str(d / "img.json")],
        "dilemma-report": ["dilemma-report", "--data", str(data), "--out", str(d / "dil.json"),
                           "--figure", str(d / "dil.png")],
        "pipeline": ["pipeline", "--out", str(d / "pipe"), "--report"] + small + train,
    }
    manifests = {}
    for name, argv in runs.items():
        _cli(argv)
        out = argv[argv.index("--out") + 1]
        p = Path(out)
        manifests[name] = p / "manifest.json" if not p.suffix else p.with_name(p.name + ".manifest.json")
    differ = []
    for name, mf in manifests.items():
        recorded = json.loads(mf.read_text())
        assert recorded["status"] == "ok" and recorded["outputs"], name
        if cli_main(["rerun", str(mf)]) != 0:
            differ.append(name)

    # permutation of scene records leaves every render bit-identical
    rng = np.random.default_rng(1010)
    perm_bad = 0
    for stage in (1, 2):
        sc = random_scene(500, rng, opacity=(0.1, 0.9))
        sc.bank = AsgBank.init(4, 2, seed=1)
        cam = camera(48, 48, fov=35)
        ref = render_view(sc, cam, stage=stage).maps()
        for _ in range(3):
            got = render_view(sc.subset(rng.permutation(len(sc))), cam, stage=stage).maps()
            perm_bad += sum(ref[k].tobytes() != got[k].tobytes() for k in ref)
    ok = not differ and perm_bad == 0
    record(10, ok, f"{len(manifests) - len(differ)}/{len(manifests)} commands rerun bit-identical"
                   f"{' (differ: ' + ', '.join(differ) + ')' if differ else ''}; "
                   f"{perm_bad} render maps changed under 6 record permutations")
    assert ok


# --------------------------------------------------------------------------
# 11. performance floor


def test_c11_performance():
    rng = np.random.default_rng(1111)
    sc = random_scene(10_000, rng, spread=0.6, scale=(0.005, 0.03), opacity=(0.1, 0.9))
    cam = camera(128, 128, fov=45)
    render_view(sc, cam)          # compile

    def best_of(k):
        t = []
        for _ in range(k):
            t0 = time.perf_counter()
            render_view(sc, cam)
            t.append(time.perf_counter() - t0)
        return min(t)

    try:
        n1 = set_threads(1)
        t1 = best_of(3)
        n8 = set_threads(8)
        t8 = best_of(3)
    finally:
        set_threads(None)
    speedup = t1 / t8
    ok_single = t1 < 2.0
    ok_scale = speedup >= 3.0
    ok = ok_single and ok_scale
    cores = os.cpu_count()
    record(11, ok, f"10k gaussians at 128x128: {t1:.3f} s single-threaded (< 2 s) "
                   f"{'PASS' if ok_single else 'FAIL'}; {n8} worker(s) available on "
                   f"{cores} core(s), speedup {speedup:.2f}x (>= 3x) {'PASS' if ok_scale else 'FAIL'}")
    assert ok_single
    assert ok_scale, f"only {n8} worker thread(s) on a {cores}-core machine"
