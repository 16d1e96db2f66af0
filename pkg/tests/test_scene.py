import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatdepth.appearance import AsgBank
from splatdepth.scene import (Gaussian, SceneFile, SceneFormatError, SceneIOError, activate,
                              export_text, import_text, load_scene, save_scene)

from conftest import random_scene


def _fields_equal(a: SceneFile, b: SceneFile):
    for name in ("centers", "rotations", "log_scales", "opacity_logits", "sh", "tau_logits", "asg"):
        x, y = getattr(a, name), getattr(b, name)
        assert x.shape == y.shape
        assert x.tobytes() == y.tobytes(), name
    assert (a.sh_degree, a.asg_k, a.asg_f, a.unit_scale) == (b.sh_degree, b.asg_k, b.asg_f, b.unit_scale)


def test_single_gaussian_at_origin(tmp_path):
    sc = SceneFile.from_activated(np.zeros((1, 3)), [[1.0, 0, 0, 0]], np.ones((1, 3)) * 0.1,
                                  [1.0], np.zeros((1, 16, 3)), [0.5])
    save_scene(sc, tmp_path / "one.splat")
    back = load_scene(tmp_path / "one.splat")
    assert len(back) == 1
    assert np.array_equal(back.centers[0], [0, 0, 0])


def test_save_load_save_is_byte_identical(tmp_path, rng):
    sc = random_scene(50, rng, sh_degree=3)
    sc.bank = AsgBank.init(k=4, f=2, seed=3)
    f = tmp_path / "a.splat"
    save_scene(sc, f)
    save_scene(load_scene(f), tmp_path / "b.splat")
    assert f.read_bytes() == (tmp_path / "b.splat").read_bytes()


def test_large_scene_round_trip_preserves_order(tmp_path, rng):
    sc = random_scene(10_000, rng, sh_degree=3)
    save_scene(sc, tmp_path / "big.splat")
    back = load_scene(tmp_path / "big.splat")
    _fields_equal(sc, back)


def test_zero_scale_is_rejected_with_record_index(tmp_path, rng):
    sc = random_scene(5, rng)
    sc.log_scales[3, 1] = -np.inf       # scale exactly 0
    save_scene(sc, tmp_path / "bad.splat")
    with pytest.raises(SceneFormatError) as err:
        load_scene(tmp_path / "bad.splat")
    assert err.value.kind == "nonfinite-field"
    assert err.value.record == 3


def test_bad_magic_and_empty_scene(tmp_path, rng):
    p = tmp_path / "x.splat"
    p.write_bytes(b"NOTASCENE" * 4)
    with pytest.raises(SceneFormatError) as err:
        load_scene(p)
    assert err.value.kind == "malformed-header"
    save_scene(SceneFile.empty(), p)
    with pytest.raises(SceneFormatError) as err:
        load_scene(p)
    assert err.value.kind == "empty-scene"


def test_truncated_file_is_malformed(tmp_path, rng):
    p = tmp_path / "t.splat"
    save_scene(random_scene(4, rng), p)
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(SceneFormatError):
        load_scene(p)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_read_only_target_fails(tmp_path, rng):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    with pytest.raises(SceneIOError):
        save_scene(random_scene(2, rng), d / "s.splat")


def test_unwritable_target_fails(tmp_path, rng):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SceneIOError):
        save_scene(random_scene(2, rng), blocker / "s.splat")


def test_missing_file_is_io_failure(tmp_path):
    with pytest.raises(SceneIOError):
        load_scene(tmp_path / "nope.splat")


def test_text_export_round_trip(rng):
    sc = random_scene(20, rng, sh_degree=2)
    sc.bank = AsgBank.init(k=4, f=2, seed=1)
    back = import_text(export_text(sc))
    _fields_equal(sc, back)
    assert np.array_equal(back.bank.pack(), sc.bank.pack())


def _g(opacity_logit=0.0, log_scale=(0, 0, 0), rotation=(1, 0, 0, 0), tau_logit=0.0):
    return Gaussian(np.zeros(3), np.asarray(rotation, float), np.asarray(log_scale, float),
                    opacity_logit, np.zeros((1, 3)), tau_logit, np.zeros(0))


def test_activation_examples():
    assert activate(_g(opacity_logit=0.0)).opacity == 0.5
    assert np.array_equal(activate(_g(log_scale=(0, 0, 0))).scale, [1, 1, 1])
    assert np.array_equal(activate(_g(rotation=(2, 0, 0, 0))).rotation, [1, 0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-30, 30), st.floats(-30, 30),
    st.lists(st.floats(-20, 5), min_size=3, max_size=3),
    st.lists(st.floats(-10, 10), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3),
)
def test_activation_ranges(o, t, s, q):
    a = activate(_g(opacity_logit=o, log_scale=s, rotation=q, tau_logit=t))
    assert 0 < a.opacity < 1 and 0 < a.tau < 1
    assert (a.scale > 0).all()
    assert abs(np.linalg.norm(a.rotation) - 1) < 1e-7
