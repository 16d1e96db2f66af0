import math

import numpy as np
import pytest

from splatdepth.depth import (FLAG_FALLBACK, WindowConfigError, WindowSearchConfig,
                              extract_all, first_surface_depth, nearest_depth, plane_depth,
                              unbiased_depth)
from splatdepth.rasterizer import SplatFragmentList, composite, render_view
from splatdepth.synth import SynthSpec, generate

from conftest import camera, random_scene, wall_scene
from oracles import window_search_naive

RAY = np.array([0.0, 0.0, 1.0])


def test_plane_depth_front_on():
    d, grazing = plane_depth(2.0, [0, 0, -1], RAY)
    assert d == 2.0 and not grazing


def test_plane_depth_tilted():
    n = np.array([0.0, -np.sin(np.pi / 3), -0.5])
    d, _ = plane_depth(2.0, n, RAY)
    assert abs(d - 4.0) < 1e-12


def test_plane_depth_grazing_clamps():
    n = np.array([0.0, -np.sqrt(1 - 1e-12), -1e-6])
    d, grazing = plane_depth(2.0, n, RAY)
    assert grazing and abs(d - 2.0 / 1e-4) < 1e-6


def test_unbiased_frontal_plane_and_sentinel():
    assert abs(unbiased_depth(2.0, [0, 0, -1], RAY, alpha=1.0) - 2.0) < 1e-6
    assert unbiased_depth(0.0, [0, 0, 0], RAY, alpha=0.0) == 0.0


def test_unbiased_mixes_plate_and_wall():
    # plate at 1 m carrying weight 0.5, opaque wall at 3 m behind it
    f = SplatFragmentList.from_alphas([0.5, 0.99], z=[1.0, 3.0], normal=np.array([[0, 0, -1.0]] * 2),
                                      distance=np.array([1.0, 3.0]))
    out = composite(f)
    # independent fragment-level evaluation of blended distance over blended cosine
    w = f.T * f.alpha
    expect = (w * f.distance).sum() / (w * 1.0).sum()
    got = unbiased_depth(out["distance"], out["normal"], RAY, out["alpha"])
    assert abs(got - expect) < 1e-12
    assert got > 1.0


def test_nearest_examples():
    f = SplatFragmentList.from_alphas([0.3, 0.3, 0.3], plane_depth=[1.2, 0.9, 3.0])
    assert nearest_depth(f) == 0.9
    g = SplatFragmentList.from_alphas([0.01, 0.3, 0.3, 0.3], plane_depth=[0.3, 1.2, 0.9, 3.0])
    assert nearest_depth(g) == 0.3
    assert nearest_depth(SplatFragmentList.from_alphas([])) == 0.0


def test_single_cluster_is_its_weighted_mean(rng):
    d = 2.0 + rng.uniform(0, 0.001, 8)
    f = SplatFragmentList.from_alphas(np.full(8, 0.005), plane_depth=d)
    r = first_surface_depth(f, WindowSearchConfig(t_start=1.0, t_end=0.0))
    w = f.T * f.alpha
    assert abs(r.depth - (w * d).sum() / w.sum()) < 1e-12
    assert d.min() <= r.depth <= d.max()
    assert list(r.members) == list(range(8))


def _plate_wall(plate_net=0.4, wall_net=0.55, n_plate=8, n_wall=6, wall_spread=0.03):
    """Plate cluster within 1 mm of 1 m, then wall fragments spread behind 3 m.

    The plate's first fragment sits at T = 1, above the band, so a fine split
    keeps most of the plate in the candidate set; spreading the wall over
    several window widths keeps any single wall window light.
    """
    a_p = 1 - (1 - plate_net) ** (1 / n_plate)
    rest = wall_net / (1 - plate_net)
    a_w = 1 - (1 - rest) ** (1 / n_wall)
    alpha = [a_p] * n_plate + [a_w] * n_wall
    d = list(1.0 + np.linspace(0, 0.001, n_plate)) + list(3.0 + np.linspace(0, wall_spread, n_wall))
    return SplatFragmentList.from_alphas(alpha, plane_depth=d)


def test_plate_wins_window_when_heavier_in_band():
    f = _plate_wall(0.4, 0.55)
    cfg = WindowSearchConfig()
    r = first_surface_depth(f, cfg)
    ref_depth, ref_w, ref_members = window_search_naive(f.T, f.alpha, f.plane_depth,
                                                       cfg.t_start, cfg.t_end, cfg.dt)
    assert list(r.members) == ref_members
    assert abs(r.depth - ref_depth) < 1e-12
    assert abs(r.depth - 1.0) <= cfg.dt
    # a compact wall holds all of its weight in one window and wins instead
    g = _plate_wall(0.4, 0.55, wall_spread=0.001)
    assert abs(first_surface_depth(g, cfg).depth - 3.0) <= cfg.dt


def test_random_lists_match_exhaustive_windows(rng):
    cfg = WindowSearchConfig()
    for _ in range(2000):
        n = int(rng.integers(1, 60))
        d = rng.uniform(1.0, 1.02, n)
        f = SplatFragmentList.from_alphas(rng.uniform(0.004, 0.5, n), plane_depth=d)
        r = first_surface_depth(f, cfg, fallback=-1.0)
        ref_depth, ref_w, members = window_search_naive(f.T, f.alpha, d, cfg.t_start, cfg.t_end, cfg.dt)
        if math.isnan(ref_depth):
            assert r.no_candidate and r.depth == -1.0
            continue
        assert list(r.members) == members
        assert abs(r.depth - ref_depth) < 1e-12
        assert abs(r.weight - ref_w) < 1e-12


def test_window_is_optimal_and_scale_invariant(rng):
    cfg = WindowSearchConfig(t_start=1.0, t_end=0.0)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        d = rng.uniform(1.0, 1.03, n)
        f = SplatFragmentList.from_alphas(rng.uniform(0.004, 0.3, n), plane_depth=d)
        r = first_surface_depth(f, cfg)
        w = f.T * f.alpha
        for j in range(n):
            inside = (d >= d[j]) & (d < d[j] + cfg.dt)
            assert r.weight >= w[inside].sum() - 1e-15
        # common factor on every weight: same window, same depth
        scaled = SplatFragmentList(alpha=f.alpha * 0.5, T=f.T, z=f.z, plane_depth=d)
        r2 = first_surface_depth(scaled, cfg)
        assert list(r2.members) == list(r.members)
        assert abs(r2.depth - r.depth) < 1e-12


def test_floater_below_margin_changes_nothing():
    f = _plate_wall(0.5, 0.4)
    cfg = WindowSearchConfig(t_start=1.0, t_end=0.0)
    base = first_surface_depth(f, cfg)
    # floater in front, with tiny weight
    alpha = np.concatenate([[0.002], f.alpha])
    g = SplatFragmentList.from_alphas(alpha, plane_depth=np.concatenate([[0.5], f.plane_depth]))
    r = first_surface_depth(g, cfg)
    assert abs(r.depth - base.depth) < 1e-12
    assert nearest_depth(g) == 0.5 <= r.depth


def test_no_candidate_falls_back():
    f = SplatFragmentList.from_alphas([0.99, 0.99], plane_depth=[1.0, 2.0])
    r = first_surface_depth(f, WindowSearchConfig(t_start=0.5, t_end=0.4), fallback=7.0)
    assert r.no_candidate and r.depth == 7.0


def test_config_validation():
    with pytest.raises(WindowConfigError):
        WindowSearchConfig(t_start=0.05, t_end=0.05).validate()
    with pytest.raises(WindowConfigError):
        WindowSearchConfig(dt=0.0).validate()


def test_opaque_wall_gate_closed():
    cam = camera(48, 48)
    m = extract_all(wall_scene(z=2.0), cam)
    hit = m.alpha > 0
    assert np.array_equal(m.first[hit], m.unbiased[hit])
    assert (m.flags[hit] & FLAG_FALLBACK).all()


def test_plate_over_wall_depths():
    spec = SynthSpec(n_views=2, width=64, height=64)
    scene, gt = generate(spec)
    cfg = WindowSearchConfig()
    for cam, vt in zip(gt.cameras, gt.views):
        m = extract_all(scene, cam, cfg)
        plate = vt.mask > 0
        assert np.abs(m.first - vt.depth)[plate].mean() <= cfg.dt
        assert np.abs(m.unbiased - vt.depth)[plate].mean() > 10 * cfg.dt
        # nearest never lies behind first-surface on the same candidates
        both = plate & (m.first > 0)
        assert (m.nearest[both] <= m.first[both] + cfg.dt).all()


def test_depth_maps_permutation_invariant(rng):
    sc = random_scene(200, rng, opacity=(0.1, 0.6))
    cam = camera(32, 32, fov=30)
    a = extract_all(sc, cam)
    b = extract_all(sc.subset(rng.permutation(len(sc))), cam)
    for k in ("standard", "unbiased", "nearest", "first"):
        assert a.get(k).tobytes() == b.get(k).tobytes()
    assert np.isfinite(a.first).all()


def test_unknown_mode():
    m = extract_all(wall_scene(), camera(16, 16))
    with pytest.raises(ValueError):
        m.get("median")


def test_render_then_unbiased_matches_plane():
    cam = camera(48, 48)
    b = render_view(wall_scene(z=2.0), cam)
    m = extract_all(wall_scene(z=2.0), cam)
    inner = (slice(8, -8), slice(8, -8))
    assert np.abs(m.unbiased[inner] - 2.0).max() < 1e-6
    assert b.alpha[inner].min() > 0.99
