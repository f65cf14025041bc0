import numpy as np
import pytest

from atpair import ImageBatch, build_model
from atpair.errors import ConfigurationError, InputError
from atpair.pairing import softmax_cross_entropy

from oracles import central_difference


def make_batch(n=8, channels=1, size=32, seed=0, classes=2):
    rng = np.random.default_rng(seed)
    return ImageBatch(
        pixels=rng.uniform(0, 1, size=(n, channels, size, size)),
        labels=rng.integers(0, classes, size=n),
    )


def test_build_contract_shapes():
    model = build_model("smallcnn4", 2, 7)
    result = model.forward(make_batch(8))
    assert result.logits.shape == (8, 2)
    assert len(result.group_activations) == 4
    spatial = [a.shape[2] for a in result.group_activations]
    assert spatial == [16, 8, 4, 2]
    for a, width in zip(result.group_activations, (16, 32, 64, 128)):
        assert a.shape[:2] == (8, width)
        assert a.shape[2] == a.shape[3]
    assert all(s1 > s2 for s1, s2 in zip(spatial, spatial[1:]))


def test_build_determinism_bit_identical():
    a = build_model("smallcnn4", 10, 7)
    b = build_model("smallcnn4", 10, 7)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a.params[k].dtype == b.params[k].dtype
        assert np.array_equal(a.params[k], b.params[k])


def test_build_different_seeds_differ():
    a = build_model("smallcnn4", 2, 0)
    b = build_model("smallcnn4", 2, 1)
    assert not np.array_equal(a.params["group0.conv_weight"], b.params["group0.conv_weight"])


def test_unknown_architecture_is_configuration_error():
    with pytest.raises(ConfigurationError):
        build_model("resnet101", 17, 0)


def test_too_few_classes_is_configuration_error():
    with pytest.raises(ConfigurationError):
        build_model("smallcnn4", 1, 0)


def test_forward_deterministic():
    model = build_model("smallcnn4", 2, 3)
    batch = make_batch(4)
    r1 = model.forward(batch)
    r2 = model.forward(batch)
    assert np.array_equal(r1.logits, r2.logits)
    for a1, a2 in zip(r1.group_activations, r2.group_activations):
        assert np.array_equal(a1, a2)


def test_forward_does_not_mutate_parameters():
    model = build_model("smallcnn4", 2, 3)
    before = {k: v.copy() for k, v in model.params.items()}
    model.forward(make_batch(4))
    for k in before:
        assert np.array_equal(before[k], model.params[k])


def test_zero_head_gives_zero_logits_on_zero_batch():
    model = build_model("smallcnn4", 2, 0)
    model.params["head.weight"][:] = 0
    model.params["head.bias"][:] = 0
    batch = ImageBatch(pixels=np.zeros((3, 1, 32, 32)), labels=np.zeros(3, dtype=np.int64))
    assert np.array_equal(model.forward(batch).logits, np.zeros((3, 2)))


def test_activations_non_negative():
    model = build_model("smallcnn4", 2, 1)
    result = model.forward(make_batch(4, seed=5))
    for a in result.group_activations:
        assert a.min() >= 0


@pytest.mark.parametrize(
    "shape", [(2, 3, 32, 32), (2, 1, 30, 30), (2, 1, 32, 24), (2, 1, 8, 8)]
)
def test_bad_input_shapes_rejected(shape):
    model = build_model("smallcnn4", 2, 0)
    with pytest.raises(InputError):
        model.forward(ImageBatch(pixels=np.zeros(shape), labels=np.zeros(shape[0], dtype=np.int64)))


def test_tap_consistency_recomputes_logits():
    model = build_model("smallcnn4", 3, 11)
    batch = make_batch(4, seed=2, classes=3)
    result = model.forward(batch)
    x = np.ascontiguousarray(batch.pixels)
    for j in range(4):
        x = model.run_group(j, x)
        assert np.array_equal(x, result.group_activations[j])
    assert np.array_equal(model.run_head(x), result.logits)


def test_input_gradient_matches_finite_differences():
    model = build_model("smallcnn4", 2, 9, dtype=np.float64)
    rng = np.random.default_rng(1)
    pixels = rng.uniform(0.05, 0.95, size=(2, 1, 16, 16))
    projection = rng.standard_normal((2, 2))

    def value():
        batch = ImageBatch(pixels=pixels, labels=np.zeros(2, dtype=np.int64))
        return float((model.forward(batch).logits * projection).sum())

    result, cache = model.forward_with_cache(
        ImageBatch(pixels=pixels, labels=np.zeros(2, dtype=np.int64))
    )
    d_pixels, _ = model.backward(cache, projection)
    for _ in range(10):
        idx = tuple(rng.integers(0, s) for s in pixels.shape)
        fd = central_difference(value, pixels, idx, 1e-6)
        assert abs(fd - d_pixels[idx]) <= 1e-3 * max(abs(fd), abs(d_pixels[idx]), 1e-10)


def test_concurrent_forward_reads_are_safe():
    from concurrent.futures import ThreadPoolExecutor

    model = build_model("smallcnn4", 2, 6)
    batch = make_batch(4, seed=3)
    expected = model.forward(batch).logits
    with ThreadPoolExecutor(max_workers=4) as pool:
        results = list(pool.map(lambda _: model.forward(batch).logits, range(16)))
    for logits in results:
        assert np.array_equal(logits, expected)


def test_ce_input_gradient_direction():
    # moving along the gradient must increase the cross-entropy
    model = build_model("smallcnn4", 2, 4, dtype=np.float64)
    batch = make_batch(4, seed=8)
    grad = model.input_gradient(batch.pixels, batch.labels)
    loss0, _ = softmax_cross_entropy(model.forward(batch).logits, batch.labels)
    stepped = ImageBatch(
        pixels=np.clip(batch.pixels + 1e-3 * np.sign(grad), 0, 1), labels=batch.labels
    )
    loss1, _ = softmax_cross_entropy(model.forward(stepped).logits, batch.labels)
    assert loss1 > loss0
