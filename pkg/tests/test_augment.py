import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from tdaug import augment as aug
from tdaug.data import SliceSample


class FixedRng:
    """Stand-in RNG that replays scripted draws."""

    def __init__(self, random=0.0, integers=(0,), uniform=0.0):
        self._r, self._i, self._u = random, list(integers), uniform

    def random(self):
        return self._r

    def integers(self, *a):
        return self._i.pop(0)

    def uniform(self, *a):
        return self._u


def sample(seed=0, H=16, W=16, C=3):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, C, (H, W))
    return SliceSample(rng.random((H, W)), (lab[..., None] == np.arange(C)).astype(float))


def test_affine_noop_branch():
    s = sample()
    out = aug.random_affine(s, aug.AffineAugConfig(), FixedRng(random=0.95))
    assert out is s


def test_flip_is_involution():
    s = sample(1)
    rng = FixedRng(random=0.1, integers=[aug.AFFINE_OPS.index("flip")])
    once = aug.random_affine(s, aug.AffineAugConfig(), rng)
    np.testing.assert_array_equal(once.image, s.image[:, ::-1])
    twice = aug.apply_affine_op(once, "flip")
    np.testing.assert_array_equal(twice.image, s.image)
    np.testing.assert_array_equal(twice.label_onehot, s.label_onehot)


def test_full_turn_matches_identity():
    s = sample(2)
    rng = FixedRng(random=0.1, integers=[aug.AFFINE_OPS.index("rotate_multiple"), 8])
    op, value = aug.draw_affine(aug.AffineAugConfig(), rng)
    assert (op, value) == ("rotate_multiple", 360.0)
    out = aug.apply_affine_op(s, op, value)
    assert np.abs(out.image - s.image).max() < 1e-5
    np.testing.assert_allclose(out.label_onehot, s.label_onehot, atol=1e-5)


def test_quarter_turns_are_exact_rotations():
    s = sample(3, 9, 9)
    out = aug.apply_affine_op(s, "rotate_multiple", 90.0)
    np.testing.assert_allclose(out.image, np.rot90(s.image, -1), atol=1e-5)


def test_affine_draw_frequencies():
    rng = np.random.default_rng(0)
    cfg = aug.AffineAugConfig()
    ops = [aug.draw_affine(cfg, rng) for _ in range(8000)]
    assert abs(np.mean([o == "none" for o, _ in ops]) - 0.2) < 0.02
    for op, v in ops:
        if op == "scale":
            assert 0.9 <= v <= 1.1
        elif op == "rotate_small":
            assert -15 <= v <= 15
        elif op == "rotate_multiple":
            assert v % 45 == 0 and 0 <= v <= 360


def test_scale_magnifies_about_center():
    img = np.zeros((21, 21))
    img[10, 14] = 1.0  # 4 px right of centre
    s = SliceSample(img, np.ones((21, 21, 1)))
    out = aug.apply_affine_op(s, "scale", 2.0)
    # 2x magnification: pixel 18 samples at 14; its neighbours sample at 13.5 and 14.5
    np.testing.assert_allclose(out.image[10, 16:21], [0, 0.5, 1, 0.5, 0])
    assert out.image[10, 10] == 0


def test_affine_unknown_op():
    with pytest.raises(ValueError):
        aug.apply_affine_op(sample(), "shear", 1.0)


def test_elastic_control_std():
    cfg = aug.ElasticAugConfig()
    draws = np.concatenate([aug.draw_elastic_controls(cfg, np.random.default_rng(i)).ravel()
                            for i in range(10_000 // 18 + 1)])
    assert draws.size >= 10_000
    assert abs(draws.std() - 10) / 10 < 0.05
    assert abs(draws.mean()) < 0.5


def test_elastic_constant_grid_and_zero_sigma():
    grid = np.full((3, 3, 2), 2.5)
    np.testing.assert_allclose(aug.upsample_control_grid(grid, (40, 31)), 2.5, atol=1e-12)
    f = aug.random_elastic_field((20, 20), aug.ElasticAugConfig(sigma=0.0), np.random.default_rng(0))
    assert f.shape == (20, 20, 2) and np.all(f == 0)
    with pytest.raises(ValueError):
        aug.random_elastic_field((2, 2), aug.ElasticAugConfig(), np.random.default_rng(0))


def test_elastic_interpolates_corners():
    grid = np.random.default_rng(0).normal(size=(3, 3, 2))
    f = aug.upsample_control_grid(grid, (25, 25))
    np.testing.assert_allclose(f[0, 0], grid[0, 0], atol=1e-12)
    np.testing.assert_allclose(f[12, 12], grid[1, 1], atol=1e-12)
    np.testing.assert_allclose(f[24, 24], grid[2, 2], atol=1e-12)


def test_random_elastic_keeps_labels_normalised():
    s = sample(4)
    out = aug.random_elastic(s, aug.ElasticAugConfig(sigma=3), np.random.default_rng(1))
    np.testing.assert_allclose(out.label_onehot.sum(-1), 1, atol=1e-6)


def test_contrast_brightness_hand_values():
    x = np.random.default_rng(0).random((4, 4))
    np.testing.assert_allclose(aug.contrast_brightness(x, 1.0, 0.0), x, atol=1e-15)
    np.testing.assert_allclose(aug.contrast_brightness(np.full((3, 3), 0.5), 1.2, 0.1), 0.6)
    np.testing.assert_allclose(aug.contrast_brightness(np.array([0.0, 1.0]), 0.8, -0.1), [0.0, 0.8],
                               atol=1e-12)


def test_random_intensity_leaves_label():
    s = sample(5)
    out = aug.random_intensity(s, aug.IntensityAugConfig(), np.random.default_rng(0))
    np.testing.assert_array_equal(out.label_onehot, s.label_onehot)
    with pytest.raises(ValueError):
        aug.IntensityAugConfig(contrast_range=(1.2, 0.8))


def test_mixup_fixed_lambda():
    a, b = sample(6), sample(7)
    cfg = aug.MixupConfig()
    same = aug.mixup(a, b, cfg, None, lam=1.0)
    np.testing.assert_array_equal(same.image, a.image)
    np.testing.assert_array_equal(same.label_onehot, a.label_onehot)
    mid = aug.mixup(a, b, cfg, None, lam=0.5)
    np.testing.assert_allclose(mid.image, (a.image + b.image) / 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_mixup_convex_hull_and_label_sums(seed):
    a, b = sample(seed), sample(seed + 1)
    out = aug.mixup(a, b, aug.MixupConfig(), np.random.default_rng(seed))
    lo = np.minimum(a.image, b.image) - 1e-6
    hi = np.maximum(a.image, b.image) + 1e-6
    assert np.all((out.image >= lo) & (out.image <= hi))
    np.testing.assert_allclose(out.label_onehot.sum(-1), 1, atol=1e-6)


def test_mixup_lambda_distribution():
    rng = np.random.default_rng(0)
    cfg = aug.MixupConfig()
    base = SliceSample(np.ones((1, 1)), np.ones((1, 1, 1)))
    zero = SliceSample(np.zeros((1, 1)), np.ones((1, 1, 1)))
    lams = np.array([aug.mixup(base, zero, cfg, rng).image[0, 0] for _ in range(10_000)])
    assert abs(lams.mean() - 0.5) < 0.02
    # equal-width bins are insensitive to float32 rounding of draws near 0 and 1
    edges = np.linspace(0, 1, 11)
    expected = np.diff(stats.beta(0.2, 0.2).cdf(edges)) * len(lams)
    assert stats.chisquare(np.histogram(lams, edges)[0], expected).pvalue > 1e-3


def test_mixup_rejects_mismatch():
    with pytest.raises(ValueError):
        aug.mixup(sample(C=3), sample(C=2), aug.MixupConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        aug.MixupConfig(alpha=0)
