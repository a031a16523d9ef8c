import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tdaug.warp import (affine_flow, apply_deformation, apply_deformation_to_label,
                        apply_intensity, compose_transforms, renormalize_labels, warp,
                        warp_labels)


def shift_with_zero_fill(a, dy, dx):
    """out[i, j] = a[i + dy, j + dx] when in range, else 0."""
    H, W = a.shape
    out = np.zeros_like(a)
    for i in range(H):
        for j in range(W):
            if 0 <= i + dy < H and 0 <= j + dx < W:
                out[i, j] = a[i + dy, j + dx]
    return out


def fractional_field(rng, shape, dtype=np.float64):
    whole = rng.integers(-2, 3, size=shape)
    frac = rng.uniform(0.2, 0.8, size=shape) * rng.choice([-1, 1], size=shape)
    return (whole + frac).astype(dtype)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([np.float32, np.float64]))
def test_zero_field_is_identity(seed, dtype):
    x = np.random.default_rng(seed).normal(size=(2, 3, 9, 7)).astype(dtype)
    out = warp(torch.from_numpy(x), torch.zeros(2, 2, 9, 7))
    assert np.abs(out.numpy() - x).max() == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(-4, 4), st.integers(-4, 4), st.integers(0, 1000))
def test_integer_shift_matches_roll_with_zero_fill(dy, dx, seed):
    a = np.random.default_rng(seed).random((7, 6)).astype(np.float32)
    field = np.zeros((7, 6, 2), np.float32)
    field[..., 0], field[..., 1] = dy, dx
    np.testing.assert_array_equal(apply_deformation(a, field), shift_with_zero_fill(a, dy, dx))


def test_unit_x_shift_moves_columns():
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    field = np.zeros((3, 4, 2), np.float32)
    field[..., 1] = 1
    out = apply_deformation(a, field)
    np.testing.assert_array_equal(out[:, :3], a[:, 1:])
    np.testing.assert_array_equal(out[:, 3], 0)


def test_hand_bilinear_value():
    a = np.array([[0.0, 1.0], [2.0, 3.0]])
    field = np.zeros((2, 2, 2))
    field[0, 0] = (0.5, 0.5)
    assert apply_deformation(a, field)[0, 0] == pytest.approx(1.5, abs=1e-12)


def test_field_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    img = torch.from_numpy(rng.normal(size=(2, 1, 8, 8)))
    v0 = fractional_field(rng, (2, 2, 8, 8))
    v = torch.tensor(v0, requires_grad=True)
    warp(img, v).sum().backward()
    # out(p) depends only on v(p), so perturbing every pixel at once gives the diagonal
    h = 1e-4
    for c in range(2):
        e = np.zeros_like(v0)
        e[:, c] = h
        plus = warp(img, torch.from_numpy(v0 + e))
        minus = warp(img, torch.from_numpy(v0 - e))
        fd = ((plus - minus) / (2 * h))[:, 0].numpy()
        an = v.grad[:, c].numpy()
        rel = np.abs(an - fd) / np.maximum(np.abs(fd), 1e-8)
        big = np.abs(fd) > 1e-6
        assert rel[big].max() < 1e-3
        assert np.abs(an[~big]).max() < 1e-6


def test_full_gradcheck_image_and_field():
    rng = np.random.default_rng(1)
    img = torch.tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    v = torch.tensor(fractional_field(rng, (1, 2, 5, 5)), requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b: warp(a, b), (img, v), eps=1e-6, atol=1e-6)


def test_border_padding_clamps():
    a = np.arange(9, dtype=np.float64).reshape(3, 3)
    field = np.zeros((3, 3, 2))
    field[..., 1] = 10
    np.testing.assert_array_equal(apply_deformation(a, field, "border"), np.repeat(a[:, 2:], 3, 1))


def test_warp_errors():
    with pytest.raises(ValueError, match="NaN"):
        warp(torch.zeros(1, 1, 3, 3), torch.full((1, 2, 3, 3), float("nan")))
    with pytest.raises(ValueError):
        warp(torch.zeros(1, 1, 3, 3), torch.zeros(1, 2, 4, 3))
    with pytest.raises(ValueError):
        apply_deformation(np.zeros((3, 3)), np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        warp(torch.zeros(1, 1, 3, 3), torch.zeros(1, 2, 3, 3), "reflect")


def onehot_map(rng, H, W, C):
    lab = rng.integers(0, C, (H, W))
    return (lab[..., None] == np.arange(C)).astype(np.float64)


def test_label_warp_identity_and_partition_of_unity():
    rng = np.random.default_rng(2)
    y = onehot_map(rng, 10, 10, 4)
    np.testing.assert_array_equal(apply_deformation_to_label(y, np.zeros((10, 10, 2))), y)
    field = rng.uniform(-1, 1, (10, 10, 2))
    out = apply_deformation_to_label(y, field)
    np.testing.assert_allclose(out[2:-2, 2:-2].sum(-1), 1, atol=1e-12)
    assert out.min() >= 0 and out.max() <= 1


def test_label_out_of_frame_falls_back_to_background():
    y = np.zeros((4, 4, 3))
    y[..., 2] = 1
    field = np.zeros((4, 4, 2))
    field[..., 1] = 100
    out = apply_deformation_to_label(y, field)
    np.testing.assert_array_equal(out[..., 0], 1)
    np.testing.assert_array_equal(out[..., 1:], 0)


def test_renormalize_partial_mass():
    soft = torch.tensor([0.0, 0.3, 0.1]).view(1, 3, 1, 1)
    np.testing.assert_allclose(renormalize_labels(soft).ravel().numpy(), [0, 0.75, 0.25])


def test_label_channel_shape_checked():
    with pytest.raises(ValueError):
        apply_deformation_to_label(np.zeros((4, 4, 2)), np.zeros((4, 5, 2)))


def test_intensity_field_arithmetic():
    x = np.full((3, 3), 0.5)
    np.testing.assert_array_equal(apply_intensity(x, np.zeros((3, 3))), x)
    np.testing.assert_allclose(apply_intensity(x, np.full((3, 3), 0.25)), 0.75)
    np.testing.assert_allclose(apply_intensity(np.full((2, 2), 0.9), np.full((2, 2), 0.5)), 1.4)
    with pytest.raises(ValueError):
        apply_intensity(x, np.zeros((3, 2)))


def test_compose_matches_sequential():
    rng = np.random.default_rng(3)
    x = rng.random((8, 8))
    y = onehot_map(rng, 8, 8, 3)
    v = rng.normal(size=(8, 8, 2))
    d = rng.normal(size=(8, 8))
    zero_v = np.zeros((8, 8, 2))
    xi, yi = compose_transforms(x, y, zero_v, np.zeros((8, 8)))
    np.testing.assert_array_equal(xi, x)
    np.testing.assert_array_equal(yi, y)
    xo, _ = compose_transforms(x, y, zero_v, d)
    np.testing.assert_array_equal(xo, apply_intensity(x, d))
    xs, ys = compose_transforms(x, y, v, d)
    np.testing.assert_array_equal(xs, apply_intensity(apply_deformation(x, v), d))
    np.testing.assert_array_equal(ys, apply_deformation_to_label(y, v))


def test_tensor_inputs_stay_tensors_and_batch_label_warp():
    x = torch.rand(6, 6)
    assert isinstance(apply_deformation(x, torch.zeros(6, 6, 2)), torch.Tensor)
    y = torch.zeros(2, 3, 6, 6)
    y[:, 1] = 1
    np.testing.assert_array_equal(warp_labels(y, torch.zeros(2, 2, 6, 6)).numpy(), y.numpy())


def test_affine_flow_identity_and_rotation():
    assert torch.all(affine_flow(np.eye(2, 3), (5, 6)) == 0)
    # sampling at q = A(p - c) + c with this A gives out[i, j] = a[4 - j, i]
    a = np.arange(25, dtype=np.float64).reshape(5, 5)
    m = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]])
    f = affine_flow(m, (5, 5), dtype=torch.float64).permute(1, 2, 0).numpy()
    np.testing.assert_allclose(apply_deformation(a, f), np.rot90(a, -1), atol=1e-12)
