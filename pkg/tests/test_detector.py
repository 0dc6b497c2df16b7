import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amcr import io as aio
from amcr.attention import SoftMask
from amcr.detector import (
    DetectionReport,
    PatchEmbeddings,
    Rule,
    detect,
    mask_weights,
    partial_similarity,
    pooled_embedding,
    step_similarity,
)
from amcr.errors import AlignmentError, ContractViolation, DegeneratePoolError


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def patches(rng, grid=(2, 2), d=8):
    return PatchEmbeddings(unit_rows(rng, grid[0] * grid[1], d), grid)


def test_patch_validation():
    with pytest.raises(ContractViolation):
        PatchEmbeddings(np.ones((4, 3)), (2, 2))
    with pytest.raises(ContractViolation):
        PatchEmbeddings(np.eye(3), (2, 2))


def test_mask_weights_rules():
    np.testing.assert_array_equal(mask_weights(np.array([[0.0, 1.0], [0.0, 0.0]])), [0, 1, 0, 0])
    np.testing.assert_array_equal(mask_weights(np.zeros((2, 2))), [0.25] * 4)
    np.testing.assert_allclose(mask_weights(np.array([0.2, 0.8])), [0.2, 0.8])
    assert mask_weights(np.ones((4, 4)), (2, 2)).shape == (4,)


def test_pooled_embedding(rng):
    p = patches(rng)
    np.testing.assert_allclose(pooled_embedding(p, np.array([0, 0, 1.0, 0])), p.vectors[2])
    same = PatchEmbeddings(np.tile(p.vectors[0], (4, 1)), (2, 2))
    np.testing.assert_allclose(pooled_embedding(same, rng.random(4) + 0.1), p.vectors[0], atol=1e-12)
    w = rng.random(4)
    y = sum(w[i] * p.vectors[i] for i in range(4))
    np.testing.assert_allclose(pooled_embedding(p, w), y / np.linalg.norm(y), atol=1e-12)
    e = np.eye(2)
    anti = PatchEmbeddings(np.array([e[0], -e[0]]), (1, 2))
    with pytest.raises(DegeneratePoolError):
        pooled_embedding(anti, np.array([0.5, 0.5]))
    with pytest.raises(ContractViolation):
        pooled_embedding(p, np.ones(3))


def test_degenerate_pool_falls_back_to_uniform():
    e = np.eye(3)
    gen = PatchEmbeddings(np.array([e[0], -e[0], e[1], e[2]]), (2, 2))
    ref = PatchEmbeddings(np.array([e[1]]), (1, 1))
    s = step_similarity(gen, np.array([[1.0, 1.0], [0.0, 0.0]]), ref, 20.0)
    g = pooled_embedding(gen, np.full(4, 0.25))
    assert s == pytest.approx(float(g @ e[1]))


def test_partial_similarity_examples(rng):
    g = unit_rows(rng, 1, 8)[0]
    for beta in (0.5, 20, 1000):
        assert partial_similarity(g, PatchEmbeddings(g[None], (1, 1)), beta) == pytest.approx(1.0)
    ref = PatchEmbeddings(unit_rows(rng, 3, 8), (1, 3))
    sims = ref.vectors @ g
    assert partial_similarity(g, ref, 1000) == pytest.approx(sims.max(), abs=1e-3)
    assert partial_similarity(g, ref, 5) == pytest.approx(math.log(sum(math.exp(5 * s) for s in sims)) / 5, abs=1e-12)


def step_fixture(rng, d=8, grid=(2, 2), n_ref=4):
    gen = patches(rng, grid, d)
    ref = PatchEmbeddings(unit_rows(rng, n_ref, d), (1, n_ref))
    return gen, SoftMask(rng.random(grid)), ref


def test_single_step_rules_agree(rng):
    gen, mask, ref = step_fixture(rng)
    a = detect({4: (gen, mask)}, {4: ref}, 0.5, rule=Rule.WEIGHTED_MEAN)
    b = detect({4: (gen, mask)}, {4: ref}, 0.5, rule=Rule.MAX_OVER_STEPS)
    assert a.overall == b.overall == a.per_step[4]


def test_three_steps_uniform_mean(rng):
    gen_steps, ref_steps = {}, {}
    for t in (2, 5, 9):
        gen, mask, ref = step_fixture(rng)
        gen_steps[t], ref_steps[t] = (gen, mask), ref
    r = detect(gen_steps, ref_steps, 0.3)
    assert r.overall == pytest.approx(sum(r.per_step.values()) / 3, abs=1e-15)
    assert set(r.per_step) == {2, 5, 9}


def test_self_comparison_and_strict_boundary(rng):
    p = PatchEmbeddings(np.eye(4), (2, 2))
    one_hot = SoftMask(np.array([[1.0, 0.0], [0.0, 0.0]]))
    r = detect({1: (p, one_hot)}, {1: p}, 0.9)
    assert r.overall == pytest.approx(1.0, abs=1e-6) and r.infringed
    at = detect({1: (p, one_hot)}, {1: p}, r.overall)
    assert not at.infringed


def test_alignment_and_pi_errors(rng):
    gen, mask, ref = step_fixture(rng)
    with pytest.raises(AlignmentError):
        detect({1: (gen, mask)}, {2: ref}, 0.5)
    with pytest.raises(AlignmentError):
        detect({1: (gen, mask)}, {1: ref}, 0.5, pi={2: 1.0})
    with pytest.raises(ContractViolation):
        detect({1: (gen, mask)}, {1: ref}, 0.5, pi={1: 0.5})
    with pytest.raises(ContractViolation):
        detect({}, {}, 0.5)


def test_report_round_trip(rng):
    gen, mask, ref = step_fixture(rng)
    r = detect({3: (gen, mask)}, {3: ref}, 0.5)
    assert DetectionReport.from_dict(r.to_dict()) == r


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_reference_monotonicity_and_rule_order(seed):
    rng = np.random.default_rng(seed)
    gen, mask, ref = step_fixture(rng, n_ref=3)
    bigger = PatchEmbeddings(np.vstack([ref.vectors, unit_rows(rng, 1, 8)]), (1, 4))
    assert step_similarity(gen, mask, bigger, 20.0) >= step_similarity(gen, mask, ref, 20.0)
    steps = {t: step_fixture(rng) for t in (1, 2, 3)}
    g = {t: (s[0], s[1]) for t, s in steps.items()}
    r = {t: s[2] for t, s in steps.items()}
    pi = dict(zip((1, 2, 3), rng.dirichlet(np.ones(3))))
    assert detect(g, r, 0.5, pi, rule="MaxOverSteps").overall >= detect(g, r, 0.5, pi).overall


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 5.0))
def test_mask_weight_toward_matching_patch(seed, delta):
    rng = np.random.default_rng(seed)
    ref = PatchEmbeddings(unit_rows(rng, 5, 8), (1, 5))
    vecs = unit_rows(rng, 4, 8)
    gen0 = PatchEmbeddings(vecs, (2, 2))
    w = rng.random(4) + 0.05
    g = pooled_embedding(gen0, w / w.sum())
    star = int(np.argmax(ref.vectors @ g))
    vecs[1] = ref.vectors[star]  # patch 1 reproduces the reference argmax patch
    gen = PatchEmbeddings(vecs, (2, 2))
    before = step_similarity(gen, w.reshape(2, 2), ref, 1000.0)
    w2 = w.copy()
    w2[1] += delta
    after = step_similarity(gen, w2.reshape(2, 2), ref, 1000.0)
    assert after >= before - math.log(5) / 1000


def test_selfcheck_fixture(fixtures_dir):
    gen = aio.load_patches(fixtures_dir / "selfcheck/patches_gen.amcr")
    ref = aio.load_patches(fixtures_dir / "selfcheck/patches_ref.amcr")
    masks = aio.load_masks(fixtures_dir / "selfcheck/masks.amcr")
    r = detect({t: (gen[t], masks[t]) for t in gen}, ref, 0.9)
    assert r.overall == pytest.approx(1.0, abs=1e-6) and r.infringed
