import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bia.data import NormStats
from bia.objectives import (ObjectiveError, ObjectiveKind, RNParams, Variant, attended_loss, attention_map,
                            combined_loss, cosine_feature_loss, ensemble_loss, objective_loss, random_normalize)
from conftest import tiny_classifier

VARIANTS = list(Variant)
FIXED_RN = RNParams(sample=(0.45, 0.7))


def _kind(v, tap="stage2"):
    return ObjectiveKind(v, tap, FIXED_RN if v.uses_rn else None)


def _np_cos(a, b):
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    return np.mean([np.dot(u, w) / (np.linalg.norm(u) * np.linalg.norm(w)) for u, w in zip(a, b)])


def test_cosine_matches_numpy():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(4, 3, 2, 2, generator=g, dtype=torch.float64), torch.randn(4, 3, 2, 2, generator=g,
                                                                                   dtype=torch.float64)
    assert abs(float(cosine_feature_loss(a, b)) - _np_cos(a.numpy(), b.numpy())) < 1e-12


def test_cosine_identities():
    f = torch.randn(3, 5, 4, 4)
    assert float(cosine_feature_loss(f, f)) == 1.0
    assert abs(float(cosine_feature_loss(-f, f)) + 1.0) < 1e-6
    assert abs(float(cosine_feature_loss(7.5 * f + 0.0, f)) - 1.0) < 1e-6


def test_degenerate_clean_feature():
    with pytest.raises(ObjectiveError, match="degenerate"):
        cosine_feature_loss(torch.ones(2, 3), torch.zeros(2, 3))


@pytest.mark.parametrize("variant", VARIANTS)
def test_identical_inputs_give_exactly_one(variant, tiny):
    x = torch.rand(3, 3, 8, 8, dtype=torch.float64)
    with torch.no_grad():
        assert float(objective_loss(_kind(variant), tiny, x.clone(), x)) == 1.0


@pytest.mark.parametrize("variant", VARIANTS)
def test_variant_values_in_range(variant, tiny):
    g = torch.Generator().manual_seed(3)
    for _ in range(10):
        x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
        x_adv = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
        with torch.no_grad():
            v = float(objective_loss(_kind(variant), tiny, x_adv, x))
        assert -1.0 <= v <= 1.0


def test_attention_worked_example():
    # channel sums: [[0,-4],[4,4]] over C=2 channels
    f = torch.tensor([[[[1.0, -1.0], [3.0, 2.0]], [[-1.0, -3.0], [1.0, 2.0]]]])
    expected = torch.tensor([[[[0.0, 2.0], [2.0, 2.0]]]])
    assert torch.equal(attention_map(f), expected)


def test_attention_single_pixel():
    f = torch.zeros(1, 4, 3, 3)
    f[0, :, 1, 2] = torch.tensor([1.0, 2.0, -1.0, 2.0])
    A = attention_map(f)
    assert float(A[0, 0, 1, 2]) == 1.0
    assert torch.count_nonzero(A) == 1


def test_attention_is_detached():
    f = torch.rand(1, 2, 3, 3, requires_grad=True)
    assert not attention_map(f).requires_grad


def test_attention_collapse():
    f = torch.zeros(1, 2, 3, 3)
    with pytest.raises(ObjectiveError, match="collapsed"):
        attended_loss(torch.rand(1, 2, 3, 3), torch.rand(1, 2, 3, 3), attention_map(f))


def test_rn_worked_value():
    stats = NormStats((0.485, 0.485, 0.485), (0.229, 0.229, 0.229))
    out = random_normalize(torch.full((1, 3, 1, 1), 0.8, dtype=torch.float64), stats, RNParams(sample=(0.4, 0.8)))
    # oracle: 0.229 * (0.8 - 0.4) / 0.8 + 0.485
    expected = 0.229 * 0.5 + 0.485
    assert abs(expected - 0.5995) < 1e-12
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-9, rtol=0)


def test_rn_identity_for_channel_uniform_stats():
    stats = NormStats((0.3, 0.3, 0.3), (0.6, 0.6, 0.6))
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    assert torch.equal(random_normalize(x, stats, RNParams(sample=(0.3, 0.6))), x)
    assert torch.equal(random_normalize(x.float(), stats, RNParams(sample=(0.3, 0.6))), x.float())


def test_rn_draw_statistics():
    rng = np.random.default_rng(0)
    rn = RNParams()
    draws = np.array([rn.draw(rng).sample for _ in range(10_000)])
    se_mu = 0.08 / np.sqrt(len(draws))
    assert abs(draws[:, 0].mean() - 0.5) < 4 * se_mu
    assert abs(draws[:, 1].mean() - 0.75) < 4 * se_mu
    assert draws[:, 1].min() > 0.05


def test_rn_sigma_floor_gives_up():
    with pytest.raises(ObjectiveError, match="redraws"):
        RNParams(sigma_mean=-1.0, sigma_std=0.01).draw(np.random.default_rng(0))


def test_rn_per_image_draws():
    rn = RNParams(per_image=True).draw(np.random.default_rng(0), 4)
    x = torch.full((4, 3, 2, 2), 0.5, dtype=torch.float64)
    out = random_normalize(x, NormStats(), rn)
    assert len(set(out[:, 0, 0, 0].tolist())) == 4


def test_objective_kind_validation():
    with pytest.raises(ObjectiveError):
        ObjectiveKind(Variant.BIA, rn=RNParams())
    assert ObjectiveKind.parse("bia_rn").rn == RNParams()
    assert ObjectiveKind.parse("bia", rn=RNParams()).rn is None
    with pytest.raises(ValueError):
        ObjectiveKind.parse("nope")


def test_combined_loss_matches_stepwise_oracle(tiny):
    g = torch.Generator().manual_seed(5)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    x_adv = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    mu, sigma = 0.45, 0.7
    stats = tiny.preprocess
    mean = np.array(stats.mean).reshape(1, 3, 1, 1)
    std = np.array(stats.std).reshape(1, 3, 1, 1)
    rn = lambda t: torch.from_numpy(std * (t.numpy() - mu) / sigma + mean)
    with torch.no_grad():
        fa = tiny.features(rn(x_adv), "stage2").numpy()
        fc = tiny.features(rn(x), "stage2").numpy()
    A = np.abs(fc.sum(1, keepdims=True)) / fc.shape[1]
    expected = _np_cos(A * fa, A * fc)
    got = float(combined_loss(x_adv, x, tiny, "stage2", None, FIXED_RN))
    assert abs(got - expected) < 1e-12
    assert float(objective_loss(_kind(Variant.BIA_RN_DA), tiny, x_adv, x)) == got


def test_da_differs_from_plain_when_attention_is_not_uniform(tiny):
    g = torch.Generator().manual_seed(6)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    x_adv = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    plain = float(objective_loss(_kind(Variant.BIA), tiny, x_adv, x))
    da = float(objective_loss(_kind(Variant.BIA_DA), tiny, x_adv, x))
    assert abs(plain - da) > 1e-6


def test_uniform_attention_reduces_to_plain():
    g = torch.Generator().manual_seed(7)
    fa, fc = torch.randn(2, 3, 4, 4, generator=g), torch.randn(2, 3, 4, 4, generator=g)
    A = torch.full((2, 1, 4, 4), 0.3)
    assert abs(float(attended_loss(fa, fc, A)) - float(cosine_feature_loss(fa, fc))) < 1e-6


def test_attended_scale_invariance():
    g = torch.Generator().manual_seed(8)
    fa, fc = torch.randn(2, 3, 4, 4, generator=g), torch.randn(2, 3, 4, 4, generator=g)
    A = attention_map(fc)
    base = float(attended_loss(fa, fc, A))
    assert abs(float(attended_loss(3.0 * fa, fc, A)) - base) < 1e-6
    assert abs(float(attended_loss(fa, fc, 5.0 * A)) - base) < 1e-6
    assert abs(float(attended_loss(-fc, fc, A)) + 1.0) < 1e-6


def test_ensemble_is_mean_with_shared_draw():
    m1, m2 = tiny_classifier(seed=1), tiny_classifier(seed=2)
    g = torch.Generator().manual_seed(9)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    x_adv = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    kind = ObjectiveKind(Variant.BIA_RN, "stage1")
    got = float(ensemble_loss([(m1, "stage1"), (m2, "stage2")], kind, x_adv, x, np.random.default_rng(3)))
    sample = kind.rn.draw(np.random.default_rng(3), 2)
    fixed = lambda tap: ObjectiveKind(Variant.BIA_RN, tap, sample)
    expected = (float(objective_loss(fixed("stage1"), m1, x_adv, x)) +
                float(objective_loss(fixed("stage2"), m2, x_adv, x))) / 2
    assert abs(got - expected) < 1e-12


def test_ensemble_needs_members():
    with pytest.raises(ObjectiveError):
        ensemble_loss([], ObjectiveKind(), torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4))


@pytest.mark.parametrize("variant", VARIANTS)
def test_gradient_matches_finite_differences(variant, tiny):
    g = torch.Generator().manual_seed(11)
    x = torch.rand(2, 3, 6, 6, generator=g, dtype=torch.float64)
    x_adv = torch.rand(2, 3, 6, 6, generator=g, dtype=torch.float64).requires_grad_(True)
    kind = _kind(variant)
    loss = objective_loss(kind, tiny, x_adv, x)
    (grad,) = torch.autograd.grad(loss, x_adv)
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        v = torch.randn(x.shape, generator=g, dtype=torch.float64)
        with torch.no_grad():
            fd = (objective_loss(kind, tiny, x_adv + h * v, x) - objective_loss(kind, tiny, x_adv - h * v, x)) / (2 * h)
        an = (grad * v).sum()
        worst = max(worst, float((fd - an).abs() / an.abs().clamp_min(1e-12)))
    assert worst < 1e-3


def test_no_gradient_through_clean_path(tiny):
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    x_adv = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    objective_loss(_kind(Variant.BIA_RN_DA), tiny, x_adv, x).backward()
    assert x.grad is None
    assert x_adv.grad is not None


def test_da_gradient_treats_attention_as_constant(tiny):
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    x_adv = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    (g1,) = torch.autograd.grad(objective_loss(_kind(Variant.BIA_DA), tiny, x_adv, x), x_adv)
    with torch.no_grad():
        fc = tiny.features(x, "stage2")
    A = (fc.sum(1, keepdim=True).abs() / fc.shape[1]).clone()
    (g2,) = torch.autograd.grad(cosine_feature_loss(A * tiny.features(x_adv, "stage2"), A * fc), x_adv)
    torch.testing.assert_close(g1, g2, atol=1e-14, rtol=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(1e-3, 1e3))
def test_cosine_bounds_and_scale_property(seed, scale):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(3, 4, 2, 2, generator=g, dtype=torch.float64), torch.randn(3, 4, 2, 2, generator=g,
                                                                                   dtype=torch.float64)
    v = float(cosine_feature_loss(a, b))
    assert -1.0 <= v <= 1.0
    assert abs(float(cosine_feature_loss(scale * a, b)) - v) < 1e-6
