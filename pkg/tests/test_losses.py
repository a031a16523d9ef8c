import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tdaug.losses import (LossWeights, adversarial_losses, default_class_weights,
                          discriminator_loss, generator_adversarial_loss, large_deviation_loss,
                          regularization_loss, task_driven_objective, weighted_cross_entropy)
from tdaug.networks import build_generator, build_segmenter
from tdaug.warp import warp, warp_labels


def brute_force_wce(logits, target, w):
    N, C, H, W = logits.shape
    total = 0.0
    for n in range(N):
        for i in range(H):
            for j in range(W):
                z = logits[n, :, i, j]
                m = max(z)
                lse = m + math.log(sum(math.exp(v - m) for v in z))
                total -= sum(w[c] * target[n, c, i, j] * (z[c] - lse) for c in range(C))
    return total / (N * H * W)


def test_class_weights():
    assert default_class_weights(4) == pytest.approx((0.1, 0.3, 0.3, 0.3))
    assert default_class_weights(2) == pytest.approx((0.1, 0.9))
    assert LossWeights().class_weights == (0.1, 0.3, 0.3, 0.3)
    with pytest.raises(ValueError):
        default_class_weights(1)


@pytest.mark.parametrize("soft", [False, True])
def test_wce_matches_brute_force(soft):
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 3, (1, 4, 16, 16))
    if soft:
        target = rng.dirichlet(np.ones(4), (1, 16, 16)).transpose(0, 3, 1, 2)
    else:
        lab = rng.integers(0, 4, (1, 16, 16))
        target = (lab[:, None] == np.arange(4)[None, :, None, None]).astype(float)
    w = default_class_weights(4)
    got = weighted_cross_entropy(torch.from_numpy(logits), torch.from_numpy(target), w).item()
    assert got == pytest.approx(brute_force_wce(logits, target, w), abs=1e-6)


def test_wce_uniform_logits_background():
    target = torch.zeros(1, 4, 3, 3)
    target[:, 0] = 1
    got = weighted_cross_entropy(torch.zeros(1, 4, 3, 3), target, default_class_weights(4))
    assert got.item() == pytest.approx(0.1 * math.log(4), abs=1e-7)


def test_wce_confident_limit_and_errors():
    target = torch.zeros(1, 3, 2, 2)
    target[:, 1] = 1
    conf = weighted_cross_entropy(20 * target.double(), target.double(), (0.1, 0.45, 0.45)).item()
    assert 0 < conf < 1e-8
    with pytest.raises(ValueError):
        weighted_cross_entropy(torch.full((1, 3, 2, 2), float("inf")), target, (1, 1, 1))
    with pytest.raises(ValueError):
        weighted_cross_entropy(torch.zeros(1, 3, 2, 2), target, (1, 1))


def test_discriminator_loss_at_chance_and_separation():
    even = torch.zeros(5, 2)
    assert discriminator_loss(even, even).item() == pytest.approx(2 * math.log(2))
    real = torch.tensor([[-10.0, 10.0]], dtype=torch.float64)
    fake = torch.tensor([[10.0, -10.0]], dtype=torch.float64)
    assert 0 < discriminator_loss(real, fake).item() < 1e-8
    d, g = adversarial_losses(real, fake)
    assert g.item() == pytest.approx(20, rel=1e-6)  # non-saturating: -log p(real | fake)


def test_generator_adversarial_forms():
    fake = torch.tensor([[0.3, -0.2], [1.0, 0.5]])
    p_real = torch.softmax(fake, 1)[:, 1]
    ns = generator_adversarial_loss(fake).item()
    sat = generator_adversarial_loss(fake, saturating=True).item()
    assert ns == pytest.approx(-torch.log(p_real).mean().item(), rel=1e-6)
    assert sat == pytest.approx(torch.log(1 - p_real).mean().item(), rel=1e-6)


def test_large_deviation_values():
    f = torch.tensor([[1.0, -2.0], [3.0, -4.0]]).view(1, 1, 2, 2)
    assert large_deviation_loss(f, "sum").item() == -10
    assert large_deviation_loss(f, "mean").item() == -2.5
    assert large_deviation_loss(torch.zeros(2, 2, 5, 5), "mean").item() == 0
    with pytest.raises(ValueError):
        large_deviation_loss(f, "max")


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_large_deviation_homogeneous(a, seed):
    f = torch.from_numpy(np.random.default_rng(seed).normal(size=(2, 2, 4, 4)))
    for red in ("sum", "mean"):
        assert large_deviation_loss(a * f, red).item() == pytest.approx(
            a * large_deviation_loss(f, red).item(), rel=1e-12)


def test_regularization_composition():
    w = LossWeights()
    assert regularization_loss(1.0, -100.0, w) == pytest.approx(0.9, abs=1e-12)
    assert regularization_loss(0.7, -3.0, LossWeights(lambda_adv=0, lambda_ld=0)) == 0
    assert regularization_loss(0.7, -3.0, LossWeights(lambda_ld=0)) == 0.7
    adv, ld = 0.37, -12.5
    assert regularization_loss(adv, ld, w) == pytest.approx(1.0 * adv + 1e-3 * ld, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.floats(0, 1), st.floats(-10, 10), st.floats(-1e3, 0))
def test_regularization_is_linear(la, ll, adv, ld):
    w = LossWeights(lambda_adv=la, lambda_ld=ll)
    assert regularization_loss(adv, ld, w) == pytest.approx(la * adv + ll * ld, abs=1e-9)
    assert task_driven_objective(1.5, regularization_loss(adv, ld, w)) == pytest.approx(
        1.5 + la * adv + ll * ld, abs=1e-9)


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_adv=-1)
    with pytest.raises(ValueError):
        LossWeights(ld_reduction="median")
    with pytest.raises(ValueError):
        LossWeights(class_weights=(0.0, 1.0))


def _toy_objective(G, S, D, x, y, z, w: LossWeights, use_generated=True):
    v = G(x, z)
    xg, yg = warp(x, v), warp_labels(y, v)
    if use_generated:
        xs, ys = torch.cat([x, xg]), torch.cat([y, yg])
    else:
        xs, ys = x, y
    seg = weighted_cross_entropy(S(xs), ys, w.class_weights[:y.shape[1]])
    adv = generator_adversarial_loss(D(xg))
    return task_driven_objective(seg, regularization_loss(adv, large_deviation_loss(v, "mean"), w))


def _toy_models():
    torch.manual_seed(0)
    G = build_generator("deform", 8, image_widths=(3,), z_widths=(), z_base_channels=2,
                        common_widths=(3,), z_dim=4).double()
    with torch.no_grad():  # make the field large enough to matter
        G.head.weight.mul_(50)
    S = build_segmenter(8, 3, widths=(3, 3)).double()
    lin = torch.nn.Linear(64, 2).double()
    D = lambda im: lin(im.flatten(1))
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.random((2, 1, 8, 8)))
    lab = rng.integers(0, 3, (2, 8, 8))
    y = torch.from_numpy((lab[:, None] == np.arange(3)[None, :, None, None]).astype(float))
    z = torch.randn(2, 4, dtype=torch.float64)
    return G, S, D, x, y, z


def test_objective_gradient_wrt_generator_weight():
    G, S, D, x, y, z = _toy_models()
    w = LossWeights(class_weights=(0.1, 0.45, 0.45))
    f = lambda: _toy_objective(G, S, D, x, y, z, w)
    G.zero_grad()
    f().backward()
    p = G.head.weight
    h = 1e-6
    for idx in [(0, 0, 0, 0), (1, 2, 0, 0)]:
        an = p.grad[idx].item()
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + h
            up = f().item()
            p[idx] = old - h
            down = f().item()
            p[idx] = old
        fd = (up - down) / (2 * h)
        assert an == pytest.approx(fd, rel=1e-4, abs=1e-8)
        assert abs(fd) > 1e-6


def test_objective_has_no_generator_gradient_without_generated_samples():
    G, S, D, x, y, z = _toy_models()
    w = LossWeights(class_weights=(0.1, 0.45, 0.45), lambda_adv=0, lambda_ld=0)
    G.zero_grad()
    _toy_objective(G, S, D, x, y, z, w, use_generated=False).backward()
    assert all(p.grad is None or torch.all(p.grad == 0) for p in G.parameters())
