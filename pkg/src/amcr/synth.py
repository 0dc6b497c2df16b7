"""Deterministic synthetic inputs for the desk-scale pipeline and its tests."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .attention import AttentionLayer, AttentionStack, SoftMask, build_soft_mask
from .backends import DeterministicTestEncoder, LinearPatchEncoder
from .diffusion import NoiseSchedule, forward_diffuse, make_schedule
from .mitigator import MitigationFixture, PreserveSample, ToyPredictor, v_target

LATENT_SHAPE = (1, 8, 8)
TOKENS = ("<bos>", "plumber", "red", "cap")


def smooth_basis(shape: tuple[int, int] = (8, 8), k: int = 6) -> np.ndarray:
    """``k`` orthonormal low-frequency cosine images, flattened to rows."""
    rows, cols = shape
    y = (np.arange(rows) + 0.5) / rows
    x = (np.arange(cols) + 0.5) / cols
    freqs = sorted(((i, j) for i in range(rows) for j in range(cols)), key=lambda f: (f[0] + f[1], f))[:k]
    basis = np.stack([np.outer(np.cos(np.pi * i * y), np.cos(np.pi * j * x)).ravel() for i, j in freqs])
    q, _ = np.linalg.qr(basis.T)
    return q.T


def smooth_latent(rng: np.random.Generator, shape: tuple[int, ...] = LATENT_SHAPE, k: int = 6) -> np.ndarray:
    coef = rng.standard_normal(k)
    return (coef @ smooth_basis(shape[-2:], k) * np.sqrt(shape[-1] * shape[-2] / k)).reshape(shape)


def region_mask(shape: tuple[int, int], rows: slice, cols: slice) -> np.ndarray:
    m = np.zeros(shape)
    m[rows, cols] = 1.0
    return m


def attention_stack(
    rng: np.random.Generator,
    focus: np.ndarray,
    grids: Sequence[tuple[int, int]] = ((8, 8), (4, 4)),
    n_heads: int = 2,
    tokens: Sequence[str] = TOKENS,
    step: int = 0,
    strength: float = 3.0,
) -> AttentionStack:
    """Softmax attention whose content tokens favour the ``focus`` region.

    An extra unlisted sink token absorbs leftover mass, so rows sum below 1.
    """
    from .numerics import bilinear_resize

    L = len(tokens)
    layers = []
    for grid in grids:
        f = bilinear_resize(focus, grid).ravel()
        heads = []
        for _ in range(n_heads):
            logits = 0.5 * rng.standard_normal((f.size, L + 1))
            logits[:, 1:L] += strength * f[:, None]
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            heads.append((e / e.sum(axis=1, keepdims=True))[:, :L])
        layers.append(AttentionLayer(np.stack(heads), grid))
    return AttentionStack(tuple(layers), tuple(tokens), step)


def fit_predictor(batch: Sequence[PreserveSample], sched: NoiseSchedule, ridge: float = 1e-3) -> ToyPredictor:
    """Ridge least-squares affine v-predictor on the preservation batch."""
    X = np.stack([forward_diffuse(s.z0, s.t, sched, s.eps).ravel() for s in batch])
    Y = np.stack([v_target(s.z0, s.eps, s.t, sched).ravel() for s in batch])
    Xa = np.hstack([X, np.ones((len(batch), 1))])
    reg = ridge * np.eye(Xa.shape[1])
    reg[-1, -1] = 0.0
    sol = np.linalg.solve(Xa.T @ Xa + reg, Xa.T @ Y)
    return ToyPredictor(sol[:-1].T.copy(), sol[-1].copy(), batch[0].z0.shape)


def preserve_batch(rng: np.random.Generator, sched: NoiseSchedule, n: int = 96, shape=LATENT_SHAPE) -> list[PreserveSample]:
    return [
        PreserveSample(smooth_latent(rng, shape), rng.standard_normal(shape), int(rng.integers(1, sched.T + 1)))
        for _ in range(n)
    ]


def mitigation_fixture(seed: int = 0, steps: Sequence[int] = (3, 5, 8), T: int = 10) -> MitigationFixture:
    """8x8 single-channel setup where the generation copies a quadrant of the reference."""
    rng = np.random.default_rng(seed)
    sched = make_schedule(T, "cosine")
    ref = smooth_latent(rng)
    gen = smooth_latent(rng)
    gen[:, :4, :4] = ref[:, :4, :4]
    focus = region_mask((8, 8), slice(0, 4), slice(0, 4))
    masks: dict[int, SoftMask] = {}
    for t in steps:
        masks[t] = build_soft_mask(attention_stack(rng, focus, step=t))
    batch = preserve_batch(rng, sched)
    base = fit_predictor(batch, sched)
    encoder = LinearPatchEncoder(patch=2, dim=32, channels=1, seed=seed)
    prompt = DeterministicTestEncoder(seed, dim=32).embed_one("plumber fixing a sink in a kitchen")
    return MitigationFixture(sched, list(steps), gen, ref, masks, prompt, batch, encoder, base, seed)
