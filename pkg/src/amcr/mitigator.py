"""Mitigation objective: v-prediction preservation, partial-similarity risk and
prompt alignment, with hand-derived gradients for a linear toy predictor.

The soft masks are treated as constants (stop-gradient); gradients flow
through the clean estimate, the patch encoder, mask pooling, cosine and the
log-sum-exp pooling.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .attention import SoftMask
from .backends import LinearPatchEncoder
from .detector import DEFAULT_BETA, PatchEmbeddings, mask_weights, partial_similarity, pooled_embedding
from .diffusion import Conditioning, NoiseSchedule, NoiseStream, forward_diffuse
from .errors import ContractViolation, NumericError
from .numerics import cosine, lse_weights

log = logging.getLogger(__name__)

WEIGHT_FAMILIES = ("constant", "snr")


@dataclass(frozen=True)
class MitigationConfig:
    lambda_r: float = 1.0
    lambda_a: float = 0.1
    beta: float = DEFAULT_BETA
    pi: Mapping[int, float] | None = None
    w_preserve: str = "constant"
    w_risk: str = "snr"
    w_align: str = "constant"

    def __post_init__(self) -> None:
        if self.lambda_r < 0 or self.lambda_a < 0:
            raise ContractViolation("loss weights must be nonnegative")
        if not self.beta > 0:
            raise ContractViolation("beta must be positive")
        for fam in (self.w_preserve, self.w_risk, self.w_align):
            if fam not in WEIGHT_FAMILIES:
                raise ContractViolation(f"unknown weighting family {fam!r}")
        if self.pi is not None:
            vals = np.array(list(self.pi.values()), dtype=np.float64)
            if np.any(vals < 0) or abs(vals.sum() - 1.0) > 1e-9:
                raise ContractViolation("pi must be a probability distribution")

    def step_weights(self, steps: Sequence[int]) -> dict[int, float]:
        if self.pi is None:
            return {int(t): 1.0 / len(steps) for t in steps}
        return {int(t): float(self.pi.get(t, 0.0)) for t in steps}


class ToyPredictor:
    """Affine v-predictor ``v = W flatten(z_t) + b`` reshaped to the latent."""

    def __init__(self, W: np.ndarray, b: np.ndarray, shape: tuple[int, ...]):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.shape = tuple(shape)
        d = int(np.prod(self.shape))
        if self.W.shape != (d, d) or self.b.shape != (d,):
            raise ContractViolation(f"parameters do not match latent shape {self.shape}")

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> ToyPredictor:
        d = int(np.prod(shape))
        return cls(np.zeros((d, d)), np.zeros(d), shape)

    @classmethod
    def from_params(cls, params: np.ndarray, shape: tuple[int, ...]) -> ToyPredictor:
        d = int(np.prod(shape))
        p = np.asarray(params, dtype=np.float64)
        return cls(p[: d * d].reshape(d, d), p[d * d :], shape)

    def params(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b])

    def predict(self, z_t: np.ndarray, t: int, cond: Conditioning | None = None) -> np.ndarray:
        return (self.W @ np.ravel(z_t) + self.b).reshape(self.shape)


def v_target(z0: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    if np.shape(z0) != np.shape(eps):
        raise ContractViolation(f"shape mismatch: {np.shape(z0)} vs {np.shape(eps)}")
    a, s = sched.coeffs(t)
    return a * np.asarray(eps, dtype=np.float64) - s * np.asarray(z0, dtype=np.float64)


def snr_weight(t: int, sched: NoiseSchedule) -> float:
    """SNR/(1+SNR), i.e. alpha_t^2 under a VP schedule; 1 at zero noise."""
    a, _ = sched.coeffs(t)
    return a * a


def timestep_weight(family: str, t: int, sched: NoiseSchedule) -> float:
    if family == "constant":
        return 1.0
    if family == "snr":
        return snr_weight(t, sched)
    raise ContractViolation(f"unknown weighting family {family!r}")


@dataclass(frozen=True)
class PreserveSample:
    z0: np.ndarray
    eps: np.ndarray
    t: int
    cond: Conditioning = field(default_factory=Conditioning.minimal)


def loss_preserve(
    batch: Sequence[PreserveSample], predictor, sched: NoiseSchedule, w: str = "constant"
) -> float:
    """Batch mean of w(t) * ||v - v_hat(z_t)||^2."""
    if not batch:
        raise ContractViolation("empty batch")
    total = 0.0
    for smp in batch:
        z_t = forward_diffuse(smp.z0, smp.t, sched, smp.eps)
        r = v_target(smp.z0, smp.eps, smp.t, sched) - predictor.predict(z_t, smp.t, smp.cond)
        total += timestep_weight(w, smp.t, sched) * float(np.sum(r * r))
    return total / len(batch)


def loss_risk(
    inputs: Mapping[int, tuple[PatchEmbeddings, SoftMask | np.ndarray, PatchEmbeddings]],
    w_r: Mapping[int, float],
    pi: Mapping[int, float],
    beta: float = DEFAULT_BETA,
) -> float:
    """Sum over t of pi(t) w_r(t) S_img(t) for (generated, mask, reference) inputs."""
    total = 0.0
    for t, (gen, mask, ref) in inputs.items():
        if pi.get(t, 0.0) == 0.0:
            continue
        g = pooled_embedding(gen, mask_weights(mask, gen.grid))
        total += pi[t] * w_r[t] * partial_similarity(g, ref, beta)
    return total


def image_embedding(patches: PatchEmbeddings) -> np.ndarray:
    """Whole-image embedding: uniform pooling of the patch vectors."""
    return pooled_embedding(patches, np.full(patches.count, 1.0 / patches.count))


def loss_align(
    gen: Mapping[int, PatchEmbeddings],
    prompt_embedding: np.ndarray,
    w_a: Mapping[int, float],
    pi: Mapping[int, float],
) -> float:
    total = 0.0
    for t, patches in gen.items():
        if pi.get(t, 0.0) == 0.0:
            continue
        total += pi[t] * w_a[t] * -cosine(image_embedding(patches), prompt_embedding)
    return total


@dataclass
class LossReport:
    l_preserve: float
    l_risk: float
    l_align: float
    l_total: float
    weights: dict[str, float]
    per_step: dict[int, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "l_preserve": self.l_preserve,
            "l_risk": self.l_risk,
            "l_align": self.l_align,
            "l_total": self.l_total,
            "weights": dict(self.weights),
            "per_step": {str(t): dict(v) for t, v in self.per_step.items()},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LossReport:
        return cls(
            data["l_preserve"],
            data["l_risk"],
            data["l_align"],
            data["l_total"],
            dict(data["weights"]),
            {int(t): dict(v) for t, v in data.get("per_step", {}).items()},
        )


def loss_total(
    l_preserve: float,
    l_risk: float,
    l_align: float,
    cfg: MitigationConfig,
    per_step: dict[int, dict[str, float]] | None = None,
) -> LossReport:
    terms = (l_preserve, l_risk, l_align)
    if not all(math.isfinite(x) for x in terms):
        raise NumericError(f"non-finite loss term in {terms}")
    total = l_preserve + cfg.lambda_r * l_risk + cfg.lambda_a * l_align
    return LossReport(
        l_preserve, l_risk, l_align, total, {"lambda_r": cfg.lambda_r, "lambda_a": cfg.lambda_a}, per_step or {}
    )


@dataclass
class MitigationFixture:
    """Everything the objective needs besides the trainable predictor.

    The reference side is computed once from the frozen ``base`` predictor.
    """

    sched: NoiseSchedule
    steps: list[int]
    gen_latent: np.ndarray
    ref_latent: np.ndarray
    masks: dict[int, SoftMask]
    prompt_embedding: np.ndarray
    batch: list[PreserveSample]
    encoder: LinearPatchEncoder
    base: ToyPredictor
    seed: int = 0
    ref_patches: dict[int, PatchEmbeddings] = field(init=False)
    gen_noisy: dict[int, np.ndarray] = field(init=False)

    def __post_init__(self) -> None:
        noise = NoiseStream(self.seed, np.shape(self.gen_latent))
        self.gen_noisy = {}
        self.ref_patches = {}
        for t in self.steps:
            eps = noise.eps(t)
            self.gen_noisy[t] = forward_diffuse(self.gen_latent, t, self.sched, eps)
            ref_t = forward_diffuse(self.ref_latent, t, self.sched, eps)
            a, s = self.sched.coeffs(t)
            ref_hat = a * ref_t - s * self.base.predict(ref_t, t, Conditioning.minimal())
            self.ref_patches[t] = PatchEmbeddings(self.encoder.forward(ref_hat)[0], self.encoder.grid(ref_hat.shape), "reference")

    def clean_estimate(self, predictor: ToyPredictor, t: int) -> np.ndarray:
        a, s = self.sched.coeffs(t)
        z_t = self.gen_noisy[t]
        return a * z_t - s * predictor.predict(z_t, t)


def evaluate(predictor: ToyPredictor, fx: MitigationFixture, cfg: MitigationConfig) -> LossReport:
    """Forward evaluation of all three terms through the public loss functions."""
    pi = cfg.step_weights(fx.steps)
    w_r = {t: timestep_weight(cfg.w_risk, t, fx.sched) for t in fx.steps}
    w_a = {t: timestep_weight(cfg.w_align, t, fx.sched) for t in fx.steps}
    gen = {}
    for t in fx.steps:
        z_hat = fx.clean_estimate(predictor, t)
        gen[t] = PatchEmbeddings(fx.encoder.forward(z_hat)[0], fx.encoder.grid(z_hat.shape))
    l_p = loss_preserve(fx.batch, predictor, fx.sched, cfg.w_preserve)
    l_r = loss_risk({t: (gen[t], fx.masks[t], fx.ref_patches[t]) for t in fx.steps}, w_r, pi, cfg.beta)
    l_a = loss_align(gen, fx.prompt_embedding, w_a, pi)
    per_step = {}
    for t in fx.steps:
        g = pooled_embedding(gen[t], mask_weights(fx.masks[t], gen[t].grid))
        per_step[t] = {
            "pi": pi[t],
            "w_r": w_r[t],
            "w_a": w_a[t],
            "s_img": partial_similarity(g, fx.ref_patches[t], cfg.beta),
            "align_cos": cosine(image_embedding(gen[t]), fx.prompt_embedding),
        }
    return loss_total(l_p, l_r, l_a, cfg, per_step)


def _pool_backward(y: np.ndarray, d_g: np.ndarray) -> np.ndarray:
    # d/dy of y/|y| applied to an upstream gradient.
    n = np.linalg.norm(y)
    g = y / n
    return (d_g - g * (g @ d_g)) / n


def gradient(predictor: ToyPredictor, fx: MitigationFixture, cfg: MitigationConfig) -> np.ndarray:
    """Analytic gradient of the total loss w.r.t. ``predictor.params()``."""
    sched = fx.sched
    d = predictor.W.shape[0]
    dW = np.zeros((d, d))
    db = np.zeros(d)

    n = len(fx.batch)
    for smp in fx.batch:
        z_t = forward_diffuse(smp.z0, smp.t, sched, smp.eps).ravel()
        r = v_target(smp.z0, smp.eps, smp.t, sched).ravel() - (predictor.W @ z_t + predictor.b)
        c = -2.0 * timestep_weight(cfg.w_preserve, smp.t, sched) / n
        dW += c * np.outer(r, z_t)
        db += c * r

    pi = cfg.step_weights(fx.steps)
    for t in fx.steps:
        if pi[t] == 0.0:
            continue
        a, s = sched.coeffs(t)
        z_t = fx.gen_noisy[t]
        z_hat = a * z_t - s * predictor.predict(z_t, t)
        feats, cache = fx.encoder.forward(z_hat)
        d_feats = np.zeros_like(feats)

        c_r = cfg.lambda_r * pi[t] * timestep_weight(cfg.w_risk, t, sched)
        if c_r:
            w = mask_weights(fx.masks[t], fx.encoder.grid(z_hat.shape))
            y = w @ feats
            if not np.any(y):
                w = np.full(feats.shape[0], 1.0 / feats.shape[0])
                y = w @ feats
            g = y / np.linalg.norm(y)
            ref = fx.ref_patches[t].vectors
            p = lse_weights(ref @ g, cfg.beta)
            d_y = _pool_backward(y, c_r * (p @ ref))
            d_feats += np.outer(w, d_y)

        c_a = cfg.lambda_a * pi[t] * timestep_weight(cfg.w_align, t, sched)
        if c_a:
            P = feats.shape[0]
            y = feats.mean(axis=0)
            d_y = _pool_backward(y, -c_a * fx.prompt_embedding)
            d_feats += np.tile(d_y / P, (P, 1))

        d_zhat = fx.encoder.backward(cache, d_feats).ravel()
        dW += -s * np.outer(d_zhat, z_t.ravel())
        db += -s * d_zhat
    return np.concatenate([dW.ravel(), db])


def finite_diff_check(
    objective: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    params: np.ndarray,
    h: float = 1e-4,
    floor: float = 1e-8,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(|analytic|, |numeric|, floor)."""
    if not h > 0:
        raise ContractViolation(f"step h must be positive, got {h}")
    p = np.array(params, dtype=np.float64)
    analytic = np.asarray(grad(p) if callable(grad) else grad, dtype=np.float64)
    if analytic.shape != p.shape:
        raise ContractViolation("gradient shape does not match parameters")
    worst = 0.0
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        f_plus = objective(p)
        p[i] = orig - h
        f_minus = objective(p)
        p[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"objective is not finite around coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def finetune(
    predictor: ToyPredictor,
    fx: MitigationFixture,
    cfg: MitigationConfig,
    steps: int,
    lr: float,
) -> tuple[ToyPredictor, list[LossReport]]:
    """Plain gradient descent on the total loss.

    Returns the last finite predictor and ``steps + 1`` reports (the initial
    state first).  A non-finite loss stops the run early.
    """
    current = ToyPredictor(predictor.W.copy(), predictor.b.copy(), predictor.shape)
    history: list[LossReport] = []
    for it in range(steps + 1):
        try:
            report = evaluate(current, fx, cfg)
        except NumericError as exc:
            log.warning("finetune diverged at iteration %d: %s", it, exc)
            break
        history.append(report)
        last = current
        if it == steps:
            break
        params = current.params() - lr * gradient(current, fx, cfg)
        current = ToyPredictor.from_params(params, current.shape)
    return last, history


def toy_finetune(
    predictor: ToyPredictor,
    fx: MitigationFixture,
    cfg: MitigationConfig,
    steps: int,
    lr: float,
) -> list[LossReport]:
    return finetune(predictor, fx, cfg, steps, lr)[1]


def compiled_objective(fx: MitigationFixture, cfg: MitigationConfig, shape: tuple[int, ...]) -> Callable[[np.ndarray], float]:
    """Fast scalar ``L_total(params)`` for the toy predictor.

    Numerically the same objective as :func:`evaluate` (up to the cosine
    clamp), with the preservation batch and noisy latents precomputed so
    that coordinate-wise finite differences stay cheap.
    """
    sched = fx.sched
    X = np.stack([forward_diffuse(s.z0, s.t, sched, s.eps).ravel() for s in fx.batch])
    Y = np.stack([v_target(s.z0, s.eps, s.t, sched).ravel() for s in fx.batch])
    wp = np.array([timestep_weight(cfg.w_preserve, s.t, sched) for s in fx.batch]) / len(fx.batch)
    pi = cfg.step_weights(fx.steps)
    steps = []
    for t in fx.steps:
        if pi[t] == 0.0:
            continue
        a, s = sched.coeffs(t)
        z = fx.gen_noisy[t].ravel()
        w = mask_weights(fx.masks[t], fx.encoder.grid(shape))
        c_r = cfg.lambda_r * pi[t] * timestep_weight(cfg.w_risk, t, sched)
        c_a = cfg.lambda_a * pi[t] * timestep_weight(cfg.w_align, t, sched)
        steps.append((a, s, z, w, fx.ref_patches[t].vectors, c_r, c_a))
    d = int(np.prod(shape))
    u = np.asarray(fx.prompt_embedding, dtype=np.float64)
    u = u / np.linalg.norm(u)

    def objective(params: np.ndarray) -> float:
        W = params[: d * d].reshape(d, d)
        b = params[d * d :]
        r = Y - X @ W.T - b
        total = float(wp @ np.einsum("ij,ij->i", r, r))
        for a, s, z, w, ref, c_r, c_a in steps:
            z_hat = (a * z - s * (W @ z + b)).reshape(shape)
            feats, _ = fx.encoder.forward(z_hat)
            if c_r:
                y = w @ feats
                if not np.any(y):
                    y = feats.mean(axis=0)
                sims = ref @ (y / np.linalg.norm(y))
                m = sims.max()
                total += c_r * float(m + np.log(np.sum(np.exp(cfg.beta * (sims - m)))) / cfg.beta)
            if c_a:
                y = feats.mean(axis=0)
                total -= c_a * float(y @ u / np.linalg.norm(y))
        return total

    return objective
