import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from honeymark.datasets import ImageSample, generate_synthetic
from honeymark.diffnet import (
    ArchDescriptor,
    Classifier,
    TrainConfig,
    accuracy,
    cross_entropy,
    forward,
    input_gradient,
    load_checkpoint,
    param_gradients,
    save_checkpoint,
    train,
)
from honeymark.errors import CorruptCheckpoint, RejectedInput, UnsupportedVersion
from oracles import REL_TOL, fd_compare, gradient_case


def _sample(shape, seed=0, label=0):
    return ImageSample("s", np.random.default_rng(seed).random(shape), label)


def test_zero_weights_give_uniform_probs():
    arch = ArchDescriptor.mlp((1, 4, 4), 5)
    p = forward(Classifier.zeros(arch), _sample((1, 4, 4)))
    assert np.allclose(p, 0.2)


def test_softmax_of_known_logits():
    # a dense layer with bias (2, 0) and zero weights yields logits (2, 0)
    arch = ArchDescriptor.mlp((1, 2, 2), 2, hidden_sizes=(1,))
    params = np.zeros(arch.param_count())
    params[-2:] = [2.0, 0.0]
    p = forward(Classifier(arch, params), _sample((1, 2, 2)))
    assert p == pytest.approx([0.8808, 0.1192], abs=1e-4)


def test_forward_is_bitwise_repeatable():
    model = Classifier.initialize(ArchDescriptor.small_cnn((1, 8, 8), 3), 4)
    s = _sample((1, 8, 8))
    assert np.array_equal(forward(model, s), forward(model, s))


def test_cross_entropy_values():
    assert cross_entropy(np.array([0.0, 1.0]), 1) == 0.0
    assert cross_entropy(np.full(10, 0.1), 3) == pytest.approx(math.log(10))
    assert cross_entropy(np.array([1.0, 0.0]), 1) == pytest.approx(27.631021, abs=1e-6)


def test_duplicated_batch_keeps_mean_gradient():
    model = Classifier.initialize(ArchDescriptor.mlp((1, 4, 4), 3, (8,)), 1)
    batch = [_sample((1, 4, 4), i, i % 3) for i in range(4)]
    assert np.allclose(param_gradients(model, batch), param_gradients(model, batch + batch), atol=1e-15)


def test_hundred_parameter_mlp_matches_finite_differences():
    arch = ArchDescriptor.mlp((1, 3, 3), 2, (6, 4))
    assert 90 <= arch.param_count() <= 110
    model = Classifier.initialize(arch, 3)
    batch = [_sample((1, 3, 3), i, i % 2) for i in range(3)]
    g = param_gradients(model, batch)

    def loss(p):
        m = Classifier(arch, p)
        return np.mean([cross_entropy(forward(m, s), s.label) for s in batch])

    worst, checked, _ = fd_compare(loss, model.params.copy(), g, [(i,) for i in range(arch.param_count())])
    assert checked >= 95 and worst <= REL_TOL


def test_zero_loss_point_has_zero_gradient():
    arch = ArchDescriptor.mlp((1, 2, 2), 2, (1,))
    params = np.zeros(arch.param_count())
    params[-2:] = [0.0, 800.0]  # exp(-800) underflows, so p(label 1) is exactly 1
    g = param_gradients(Classifier(arch, params), [_sample((1, 2, 2), label=1)])
    assert np.all(g == 0.0)


@pytest.mark.parametrize("kind", ["mlp", "small_cnn"])
def test_gradients_match_finite_differences(kind):
    for seed in range(5):
        r = gradient_case(kind, 100 + seed)
        assert r["param_err"] <= REL_TOL and r["input_err"] <= REL_TOL
        assert r["skipped"] <= 0.05 * (r["checked"] + r["skipped"])


def test_disconnected_pixel_has_zero_input_gradient():
    arch = ArchDescriptor.mlp((1, 3, 3), 3, (5,))
    params = Classifier.initialize(arch, 0).params.copy()
    params[: 9 * 5].reshape(9, 5)[4] = 0.0  # first-layer row of pixel (1, 1)
    g = input_gradient(Classifier(arch, params), _sample((1, 3, 3), label=2))
    assert g[0, 1, 1] == 0.0
    assert np.any(g != 0.0)


def test_input_gradient_is_linear_across_models():
    arch = ArchDescriptor.small_cnn((1, 8, 8), 3)
    a, b = Classifier.initialize(arch, 1), Classifier.initialize(arch, 2)
    s = _sample((1, 8, 8), label=1)

    def diff(x):
        z = s.with_pixels(x)
        return cross_entropy(forward(a, z), 1) - cross_entropy(forward(b, z), 1)

    g = input_gradient(a, s) - input_gradient(b, s)
    coords = [(0, i, j) for i in range(0, 8, 3) for j in range(0, 8, 3)]
    worst, _, _ = fd_compare(diff, s.pixels.copy(), g, coords)
    assert worst <= REL_TOL


def _blobs(n=200):
    rng = np.random.default_rng(7)
    samples = []
    for i in range(n):
        label = i % 2
        px = np.full((1, 4, 4), 0.2 + 0.6 * label) + rng.normal(0, 0.05, (1, 4, 4))
        samples.append(ImageSample(f"b{i}", np.clip(px, 0, 1), label))
    return samples


def test_training_is_deterministic():
    data = _blobs(60)
    cfg = TrainConfig(epochs=3, seed=5)
    arch = ArchDescriptor.mlp((1, 4, 4), 2)
    assert train(arch, data, cfg).identical_to(train(arch, data, cfg))


def test_separable_blobs_are_fit():
    data = _blobs()
    model = train(ArchDescriptor.mlp((1, 4, 4), 2), data, TrainConfig(epochs=50, seed=1))
    assert accuracy(model, data) >= 0.99


def test_noise_free_synthetic_is_learned_by_small_cnn():
    spec = {"num_classes": 4, "samples_per_class": 60, "image_side": 12, "class_separation": 4.0, "noise_sigma": 0.0}
    train_set, test_set = generate_synthetic(spec, 1), generate_synthetic(spec, 2)
    model = train(ArchDescriptor.small_cnn(train_set.shape, 4), train_set, TrainConfig(epochs=20, seed=0))
    assert accuracy(model, test_set) >= 0.99


def test_zero_epochs_rejected():
    with pytest.raises(RejectedInput):
        TrainConfig(epochs=0)


def test_checkpoint_round_trip(tmp_path):
    model = Classifier.initialize(ArchDescriptor.small_cnn((1, 8, 8), 3), 9)
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    assert load_checkpoint(path).identical_to(model)


def test_checkpoint_bad_magic(tmp_path):
    path = save_checkpoint(Classifier.initialize(ArchDescriptor.mlp((1, 2, 2), 2), 0), tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_future_version(tmp_path):
    path = save_checkpoint(Classifier.initialize(ArchDescriptor.mlp((1, 2, 2), 2), 0), tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersion):
        load_checkpoint(path)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_probabilities_are_normalized(seed):
    model = Classifier.initialize(ArchDescriptor.small_cnn((1, 6, 6), 4, (3, 4)), seed)
    p = forward(model, _sample((1, 6, 6), seed % 1000))
    assert p.min() >= 0.0 and abs(p.sum() - 1.0) < 1e-12
