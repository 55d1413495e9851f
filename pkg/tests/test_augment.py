import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from icongan.augment import (AugmentParams, apply_augment, augment_batch, params_to_array,
                             sample_augment, sample_augment_batch)
from icongan.config import AugmentConfig


def disk_icon(res=64, radius=16.0):
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    inside = ((xx - res / 2) ** 2 + (yy - res / 2) ** 2 <= radius ** 2).astype(np.float64)
    img = np.full((4, res, res), -1.0)
    img[0] = 2 * inside - 1
    img[3] = 2 * inside - 1
    return torch.from_numpy(img)


def bbox_width(alpha: torch.Tensor) -> int:
    cols = torch.nonzero((alpha > 0).any(0)).flatten()
    return int(cols.max() - cols.min() + 1)


def test_theme_flip_and_rotation_frequencies():
    params = sample_augment_batch("theme", 10_000, np.random.default_rng(0))
    flips = np.mean([p.flip for p in params])
    assert abs(flips - 0.5) <= 0.015
    rots = np.bincount([p.rotation_quarter_turns for p in params], minlength=4) / 10_000
    # 5 sigma multinomial bound per bin
    assert np.all(np.abs(rots - 0.25) < 5 * np.sqrt(0.25 * 0.75 / 10_000))


def test_kind_invariants():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = sample_augment("app", rng)
        assert a.flip is False and a.rotation_quarter_turns == 0
        assert 0.8 <= a.scale <= 1.25
        assert all(0.75 <= g <= 1.25 for g in a.gain) and all(-0.1 <= b <= 0.1 for b in a.bias)
        t = sample_augment("theme", rng)
        assert t.scale == 1.0 and t.color_shift == ((1.0, 1.0, 1.0), (0.0, 0.0, 0.0))


def test_app_scale_is_log_uniform():
    params = sample_augment_batch("app", 20_000, np.random.default_rng(2))
    logs = np.log([p.scale for p in params])
    # log-uniform on [0.8, 1.25] is symmetric around 0 in log space
    assert abs(np.mean(logs)) < 0.005
    hist, _ = np.histogram(logs, bins=10, range=(np.log(0.8), np.log(1.25)))
    assert np.all(np.abs(hist / 20_000 - 0.1) < 0.01)


def test_unknown_kind():
    with pytest.raises(ValueError):
        sample_augment("both", np.random.default_rng(0))


def test_identity_is_bit_identical():
    img = torch.rand(4, 32, 32) * 2 - 1
    for kind in ("theme", "app"):
        assert torch.equal(apply_augment(img, AugmentParams(kind)), img)


def test_rot180_is_an_involution():
    img = torch.rand(4, 32, 32) * 2 - 1
    p = AugmentParams("theme", rotation_quarter_turns=2)
    assert torch.equal(apply_augment(apply_augment(img, p), p), img)


def test_rotation_and_flip_are_permutations():
    img = torch.rand(4, 16, 16, dtype=torch.float64)
    for flip in (False, True):
        for turns in range(4):
            out = apply_augment(img, AugmentParams("theme", flip=flip, rotation_quarter_turns=turns))
            assert torch.equal(out.flatten().sort().values, img.flatten().sort().values)


def test_scale_grows_bounding_box():
    img = disk_icon()
    out = apply_augment(img, AugmentParams("app", scale=1.25))
    ratio = bbox_width(out[3]) / bbox_width(img[3])
    assert abs(ratio - 1.25) <= 0.05


def test_downscale_pads_transparently():
    img = torch.ones(4, 32, 32, dtype=torch.float64)
    out = apply_augment(img, AugmentParams("app", scale=0.8))
    assert torch.allclose(out[3, 0, :], torch.full((32,), -1.0, dtype=torch.float64))
    assert torch.allclose(out[3, 16, 16], torch.tensor(1.0, dtype=torch.float64))


def test_color_shift_leaves_alpha_and_clamps():
    img = torch.rand(4, 8, 8, dtype=torch.float64) * 2 - 1
    p = AugmentParams("app", gain=(1.25, 1.25, 1.25), bias=(0.1, -0.1, 0.1))
    out = apply_augment(img, p)
    assert torch.equal(out[3], img[3])
    assert out.min() >= -1 and out.max() <= 1
    expect = (img[0] * 1.25 + 0.1).clamp(-1, 1)
    assert torch.allclose(out[0], expect)


def test_non_square_rotation_rejected():
    with pytest.raises(ValueError):
        apply_augment(torch.zeros(4, 8, 16), AugmentParams("theme", rotation_quarter_turns=1))


def test_batch_is_differentiable():
    x = torch.rand(3, 4, 16, 16, dtype=torch.float64, requires_grad=True)
    for kind in ("theme", "app"):
        params = sample_augment_batch(kind, 3, np.random.default_rng(0))
        augment_batch(x, params).sum().backward()
        assert x.grad is not None and torch.isfinite(x.grad).all()
        x.grad = None


def test_batch_matches_per_image():
    x = torch.rand(6, 4, 16, 16, dtype=torch.float64) * 2 - 1
    for kind in ("theme", "app"):
        params = sample_augment_batch(kind, 6, np.random.default_rng(4))
        batched = augment_batch(x, params)
        for i, p in enumerate(params):
            assert torch.allclose(batched[i], apply_augment(x[i], p))


def test_params_to_array_layout():
    p = AugmentParams("app", scale=1.1, gain=(1.0, 0.9, 0.8), bias=(0.0, 0.05, -0.05))
    assert params_to_array([p]).tolist() == [[0, 0, 1.1, 1.0, 0.9, 0.8, 0.0, 0.05, -0.05]]


def test_disabled_ranges_respected():
    cfg = AugmentConfig(scale_min=1.0, scale_max=1.0, gain_min=1.0, gain_max=1.0, bias_max=0.0)
    for p in sample_augment_batch("app", 20, np.random.default_rng(0), cfg):
        assert p.scale == 1.0 and p.gain == (1.0, 1.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(flip=st.booleans(), turns=st.integers(0, 3),
       gain=st.tuples(*[st.floats(0.5, 1.5)] * 3), bias=st.tuples(*[st.floats(-0.2, 0.2)] * 3),
       seed=st.integers(0, 2**16))
def test_theme_augment_commutes_with_color_maps(flip, turns, gain, bias, seed):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(4, 12, 12, generator=g, dtype=torch.float64) * 2 - 1
    geo = AugmentParams("theme", flip=flip, rotation_quarter_turns=turns)
    col = AugmentParams("app", gain=gain, bias=bias)
    a = apply_augment(apply_augment(img, col), geo)
    b = apply_augment(apply_augment(img, geo), col)
    assert torch.equal(a, b)


@settings(max_examples=40, deadline=None)
@given(gain=st.tuples(*[st.floats(0.5, 1.5)] * 3), bias=st.tuples(*[st.floats(-0.2, 0.2)] * 3),
       seed=st.integers(0, 2**16))
def test_unscaled_app_augment_is_pixelwise(gain, bias, seed):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(4, 12, 12, generator=g, dtype=torch.float64) * 2 - 1
    p = AugmentParams("app", gain=gain, bias=bias)
    out = apply_augment(img, p)
    perm = torch.randperm(144, generator=g)
    shuffled = img.flatten(1)[:, perm].reshape(4, 12, 12)
    out_shuffled = apply_augment(shuffled, p)
    assert torch.equal(out.flatten(1)[:, perm], out_shuffled.flatten(1))
