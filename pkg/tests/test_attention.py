import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from amcr import io as aio
from amcr.attention import (
    AttentionLayer,
    AttentionStack,
    SoftMask,
    build_soft_mask,
    export_mask,
    head_average,
    layer_aggregate,
    mask_to_pixels,
    per_token_masks,
    token_reduce_max,
)
from amcr.errors import ContractViolation


def random_layer(rng, grid, heads=2, L=3):
    x = rng.random((heads, grid[0] * grid[1], L + 1))
    x /= x.sum(axis=-1, keepdims=True)
    return AttentionLayer(x[..., :L], grid)


def test_layer_validation():
    with pytest.raises(ContractViolation):
        AttentionLayer(-np.ones((1, 4, 2)), (2, 2))
    with pytest.raises(ContractViolation):
        AttentionLayer(np.full((1, 4, 2), 0.6), (2, 2))
    with pytest.raises(ContractViolation):
        AttentionLayer(np.zeros((1, 5, 2)), (2, 2))
    a, b = AttentionLayer(np.zeros((1, 4, 2)), (2, 2)), AttentionLayer(np.zeros((1, 4, 3)), (2, 2))
    with pytest.raises(ContractViolation):
        AttentionStack((a, b), ())


def test_head_average(rng):
    layer = random_layer(rng, (2, 2), heads=1)
    np.testing.assert_array_equal(head_average(layer), layer.heads[0])
    layer = random_layer(rng, (2, 2), heads=2)
    np.testing.assert_allclose(head_average(layer), (layer.heads[0] + layer.heads[1]) / 2)
    swapped = AttentionLayer(layer.heads[::-1].copy(), layer.grid)
    np.testing.assert_allclose(head_average(swapped), head_average(layer), atol=1e-15)


def test_token_reduce(rng):
    m = rng.random((16, 3))
    np.testing.assert_array_equal(token_reduce_max(m[:, :1]), m[:, 0])
    dom = m.copy()
    dom[:, 1] += 2
    np.testing.assert_array_equal(token_reduce_max(dom), dom[:, 1])
    oracle = np.array([max(row) for row in m])
    np.testing.assert_array_equal(token_reduce_max(m), oracle)
    np.testing.assert_array_equal(token_reduce_max(m, [0, 1, 2]), token_reduce_max(m))
    np.testing.assert_array_equal(token_reduce_max(m, [2]), m[:, 2])
    with pytest.raises(ContractViolation):
        token_reduce_max(m, [])


def test_layer_aggregate_hand_oracle():
    small = np.array([[0.0, 1.0], [2.0, 3.0]])
    big = np.arange(16.0).reshape(4, 4) / 16
    ax = lambda p, q: [p, 0.75 * p + 0.25 * q, 0.25 * p + 0.75 * q, q]  # noqa: E731
    top, bottom = ax(0.0, 1.0), ax(2.0, 3.0)
    up = np.array([ax(top[j], bottom[j]) for j in range(4)]).T
    np.testing.assert_allclose(layer_aggregate([small, big]), (up + big) / 2, atol=1e-12)
    np.testing.assert_allclose(layer_aggregate([small, big], [3, 1]), (3 * up + big) / 4, atol=1e-12)
    np.testing.assert_array_equal(layer_aggregate([big]), big)
    np.testing.assert_allclose(layer_aggregate([big, big]), big)
    with pytest.raises(ContractViolation):
        layer_aggregate([big, big], [1.0])
    with pytest.raises(ContractViolation):
        layer_aggregate([big], [0.0])


def test_uniform_attention_gives_zero_mask():
    layer = AttentionLayer(np.full((2, 16, 4), 0.25), (4, 4))
    mask = build_soft_mask(AttentionStack((layer,), ("a", "b", "c", "d")))
    np.testing.assert_array_equal(mask.field, np.zeros((4, 4)))


def test_concentrated_attention():
    heads = np.zeros((1, 9, 2))
    heads[0, 4, 1] = 1.0
    mask = build_soft_mask(AttentionStack((AttentionLayer(heads, (3, 3)),), ("x", "y")))
    expected = np.zeros((3, 3))
    expected[1, 1] = 1.0
    np.testing.assert_array_equal(mask.field, expected)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 0.9))
def test_mask_invariants(seed, kappa):
    rng = np.random.default_rng(seed)
    layers = (random_layer(rng, (4, 4), heads=3), random_layer(rng, (2, 2), heads=3))
    stack = AttentionStack(layers, ("a", "b", "c"))
    mask = build_soft_mask(stack)
    assert mask.field.min() >= 0 and mask.field.max() <= 1
    assert mask.field.max() == 1.0 or not mask.field.any()
    perm = AttentionStack(tuple(AttentionLayer(l.heads[rng.permutation(3)], l.grid) for l in layers), stack.token_labels)
    np.testing.assert_allclose(build_soft_mask(perm).field, mask.field, atol=1e-12)
    scaled = AttentionStack(tuple(AttentionLayer(kappa * l.heads, l.grid) for l in layers), stack.token_labels)
    np.testing.assert_allclose(build_soft_mask(scaled).field, mask.field, atol=1e-9)


def test_per_token_masks(rng):
    stack = AttentionStack((random_layer(rng, (4, 4)),), ("a", "b", "c"))
    masks = per_token_masks(stack)
    assert len(masks) == 3
    np.testing.assert_allclose(masks[2].field, build_soft_mask(stack, tokens=[2]).field)


def test_shipped_stack_matches_staged_oracle(fixtures_dir):
    [stack] = aio.load_attention(fixtures_dir / "attention_2l2h.amcr")
    assert len(stack.layers) == 2 and all(l.heads.shape[0] == 2 for l in stack.layers)
    fields = []
    for layer in stack.layers:
        mean = sum(layer.heads[h] for h in range(layer.heads.shape[0])) / layer.heads.shape[0]
        fields.append(np.array([max(row) for row in mean]).reshape(layer.grid))
    u = layer_aggregate(fields)
    expected = (u - u.min()) / (u.max() - u.min())
    np.testing.assert_allclose(build_soft_mask(stack).field, expected, atol=1e-9)


def test_export_rounding(tmp_path):
    mask = SoftMask(np.array([[0.0, 0.5], [1.0, 0.25]]))
    np.testing.assert_array_equal(mask_to_pixels(mask), [[0, 128], [255, 64]])
    path = export_mask(mask, tmp_path / "m.png")
    img = Image.open(path)
    assert img.mode == "L"
    np.testing.assert_array_equal(np.asarray(img), [[0, 128], [255, 64]])
    again = export_mask(mask, tmp_path / "n.png")
    assert path.read_bytes() == again.read_bytes()
    black = export_mask(SoftMask(np.zeros((3, 3))), tmp_path / "z.png")
    assert not np.asarray(Image.open(black)).any()
