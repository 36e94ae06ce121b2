import math

import numpy as np
import pytest
import torch

from bia.data import DatasetSpec, NormStats, load_dataset
from bia.models import (BasicBlock, build_classifier, extract_features, list_taps, load_classifier,
                        save_classifier, train_classifier, accuracy)

ARCHS = ["smallconv", "smallres", "smalldense"]


def test_registry_stages():
    m = build_classifier("smallconv", 10, (32, 32))
    assert list_taps(m) == ["stage1", "stage2", "stage3"]
    assert "head" not in list_taps(m)
    assert set(dict(m.named_children())) >= {"stages", "head"}


def test_smallres_has_skip_connections():
    m = build_classifier("smallres", 10, (32, 32))
    blocks = [mod for mod in m.modules() if isinstance(mod, BasicBlock)]
    assert len(blocks) == 3
    # every residual group ends at a tap boundary
    assert list_taps(m) == ["stage1", "stage2", "stage3"]


def test_unknown_arch():
    with pytest.raises(KeyError):
        build_classifier("nosuch", 10, (32, 32))


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("res", [8, 16, 32, 40])
def test_forward_finite_and_shaped(arch, res):
    m = build_classifier(arch, 7, (res, res)).eval()
    out = m(torch.rand(2, 3, res, res))
    assert out.shape == (2, 7)
    assert torch.isfinite(out).all()


@pytest.mark.parametrize("arch", ARCHS)
def test_head_replay_matches_forward(arch):
    m = build_classifier(arch, 10, (32, 32)).eval()
    x = torch.rand(3, 3, 32, 32)
    logits = m(x)
    for tap in list_taps(m):
        replay = m.run_from(tap, extract_features(m, tap, x))
        torch.testing.assert_close(replay, logits, atol=1e-5, rtol=0)


def test_stage2_shape_from_stride_schedule():
    m = build_classifier("smallconv", 10, (32, 32), width=16)
    f = extract_features(m, "stage2", torch.rand(4, 3, 32, 32))
    # two stride-2 pools: 32 / 2 / 2 = 8; stage2 has 2 * width channels
    assert f.shape == (4, 32, 8, 8)


def test_zero_batch_bias_free_stage_gives_zero_features():
    m = build_classifier("smallconv", 10, (32, 32), preprocess=NormStats((0, 0, 0), (1, 1, 1)))
    with torch.no_grad():
        for mod in m.stages["stage1"].modules():
            if isinstance(mod, torch.nn.Conv2d):
                mod.bias.zero_()
    f = extract_features(m, "stage1", torch.zeros(2, 3, 32, 32))
    assert torch.count_nonzero(f) == 0


def test_identical_rows_identical_features():
    m = build_classifier("smallres", 10, (32, 32)).eval()
    x = torch.rand(1, 3, 32, 32).repeat(2, 1, 1, 1)
    f = extract_features(m, "stage2", x)
    assert torch.equal(f[0], f[1])


def test_invalid_tap():
    m = build_classifier("smallconv", 10, (32, 32))
    with pytest.raises(KeyError):
        extract_features(m, "head", torch.rand(1, 3, 32, 32))


def test_features_carry_gradients_to_input():
    m = build_classifier("smallconv", 10, (32, 32)).eval()
    x = torch.rand(1, 3, 32, 32, requires_grad=True)
    extract_features(m, "stage1", x).sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0


def test_preprocessing_is_inside_forward():
    stats = NormStats((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
    m = build_classifier("smallconv", 10, (32, 32), preprocess=stats)
    x = torch.full((1, 3, 32, 32), 0.5)
    torch.testing.assert_close(m.normalize(x), torch.zeros_like(x))


@pytest.fixture(scope="module")
def separable():
    tr = load_dataset(DatasetSpec("separable", "train", size=400, seed=0))
    te = load_dataset(DatasetSpec("separable", "test", size=200, seed=0))
    return tr, te


def test_separable_set_has_a_linear_separator(separable):
    # oracle: least-squares linear fit on raw pixels classifies the train set perfectly
    tr, te = separable
    X = np.stack([img.reshape(-1) / 255.0 for img, _ in tr.items])
    X = np.hstack([X, np.ones((len(X), 1))])
    y = tr.labels * 2.0 - 1.0
    w, *_ = np.linalg.lstsq(X, y, rcond=None)
    assert np.all(np.sign(X @ w) == y)


def test_training_reaches_high_accuracy_on_separable(separable):
    tr, te = separable
    m = build_classifier("smallconv", 2, (32, 32), seed=0)
    _, acc = train_classifier(m, tr, te, epochs=5, lr=1e-3, seed=0)
    assert acc >= 0.95


def test_zero_epochs_is_chance_level():
    te = load_dataset(DatasetSpec("shapes", "test", size=500, seed=0))
    m = build_classifier("smallconv", 10, (32, 32), seed=3)
    _, acc = train_classifier(m, te, te, epochs=0)
    p = 0.1
    sigma = math.sqrt(p * (1 - p) / len(te))
    assert abs(acc - p) <= 3 * sigma


def test_training_is_deterministic(separable):
    tr, te = separable
    runs = []
    for _ in range(2):
        m, _ = train_classifier(build_classifier("smallres", 2, (32, 32), seed=1), tr, te, epochs=1, seed=4)
        runs.append(m.state_dict())
    for k in runs[0]:
        assert torch.equal(runs[0][k], runs[1][k]), k


def test_classifier_checkpoint_round_trip(tmp_path):
    m = build_classifier("smalldense", 10, (32, 32), preprocess=NormStats((0.5,) * 3, (0.5,) * 3), seed=2).eval()
    path = tmp_path / "clf.biaf"
    save_classifier(m, path, seed=2)
    loaded = load_classifier(path)
    assert loaded.preprocess == m.preprocess
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(loaded(x), m(x))


def test_accuracy_ties_break_to_lowest_index():
    class Constant(torch.nn.Module):
        def forward(self, x):
            return torch.zeros(x.shape[0], 3)
    imgs = [np.zeros((4, 4, 3), np.uint8)] * 5
    from bia.data import from_arrays
    h = from_arrays(imgs, [0, 0, 0, 1, 2], 3)
    assert accuracy(Constant(), h) == pytest.approx(0.6)
