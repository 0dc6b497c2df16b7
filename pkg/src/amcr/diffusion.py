"""Desk-scale latent diffusion: VP schedules, forward noising, clean estimates.

Latents are numpy arrays shaped ``(channels, rows, cols)``.
"""

from __future__ import annotations

import enum
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import ContractViolation


class ScheduleFamily(str, enum.Enum):
    COSINE = "cosine"
    LINEAR = "linear"


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficients for t = 1..T; index 0 holds the noise-free endpoint."""

    alpha: np.ndarray
    sigma: np.ndarray
    family: str = "custom"

    def __post_init__(self) -> None:
        a, s = self.alpha, self.sigma
        if a.shape != s.shape or a.ndim != 1 or a.size < 2:
            raise ContractViolation("alpha and sigma must be equal-length vectors covering t = 0..T")
        if np.max(np.abs(a**2 + s**2 - 1.0)) > 1e-9:
            raise ContractViolation("schedule is not variance preserving")
        if np.any(np.diff(a) > 0) or np.any(np.diff(s) < 0):
            raise ContractViolation("alpha must be nonincreasing and sigma nondecreasing")
        if a[-1] <= 0:
            raise ContractViolation("alpha_T must be positive")

    @property
    def T(self) -> int:
        return self.alpha.size - 1

    def coeffs(self, t: int) -> tuple[float, float]:
        if not 0 <= t <= self.T:
            raise ContractViolation(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha[t]), float(self.sigma[t])


def make_schedule(T: int, family: ScheduleFamily | str = ScheduleFamily.COSINE) -> NoiseSchedule:
    """Variance-preserving schedule with ``T`` steps.

    ``cosine``: alpha_t = cos(pi t / (2(T+1))).  ``linear``: the DDPM linear
    beta ramp (1e-4 .. 2e-2 at T = 1000, rescaled by 1000/T) with
    alpha_t = sqrt(prod(1 - beta)).
    """
    if int(T) != T or T < 1:
        raise ContractViolation(f"T must be a positive integer, got {T}")
    family = ScheduleFamily(family)
    t = np.arange(T + 1, dtype=np.float64)
    if family is ScheduleFamily.COSINE:
        angle = np.pi * t / (2.0 * (T + 1))
        alpha, sigma = np.cos(angle), np.sin(angle)
    else:
        scale = 1000.0 / T
        betas = np.clip(np.linspace(1e-4 * scale, 2e-2 * scale, T), 0.0, 0.999)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        alpha, sigma = np.sqrt(abar), np.sqrt(1.0 - abar)
    return NoiseSchedule(alpha, sigma, family.value)


class ConditioningKind(str, enum.Enum):
    PROMPT = "prompt"
    MINIMAL = "minimal"


@dataclass(frozen=True)
class Conditioning:
    kind: ConditioningKind
    tokens: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind is ConditioningKind.MINIMAL and self.tokens is not None:
            raise ContractViolation("minimal conditioning carries no tokens")
        if self.kind is ConditioningKind.PROMPT and self.tokens is None:
            raise ContractViolation("prompt conditioning needs token embeddings")

    @classmethod
    def minimal(cls) -> Conditioning:
        return cls(ConditioningKind.MINIMAL)

    @classmethod
    def prompt(cls, tokens: np.ndarray) -> Conditioning:
        return cls(ConditioningKind.PROMPT, np.atleast_2d(np.asarray(tokens, dtype=np.float64)))


class VPredictor(Protocol):
    def predict(self, z_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray: ...


class ZeroPredictor:
    def predict(self, z_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        return np.zeros_like(z_t)


class OraclePredictor:
    """Returns the true v target for a known clean latent and noise stream."""

    def __init__(self, z0: np.ndarray, noise: NoiseStream, sched: NoiseSchedule):
        self.z0 = np.asarray(z0, dtype=np.float64)
        self.noise = noise
        self.sched = sched

    def predict(self, z_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        a, s = self.sched.coeffs(t)
        return a * self.noise.eps(t) - s * self.z0


class NoiseStream:
    """Per-timestep Gaussian draws keyed by ``(seed, t)``.

    Generation and reference trajectories share a stream so both sides see
    identical noise at matched timesteps.
    """

    def __init__(self, seed: int, shape: tuple[int, ...]):
        self.seed = int(seed)
        self.shape = tuple(shape)

    def eps(self, t: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, int(t)]))
        return rng.standard_normal(self.shape)


def _check_shapes(*arrays: np.ndarray) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ContractViolation(f"shape mismatch: {sorted(shapes)}")


def forward_diffuse(z0: np.ndarray, t: int, sched: NoiseSchedule, eps: np.ndarray) -> np.ndarray:
    _check_shapes(z0, eps)
    a, s = sched.coeffs(t)
    return a * np.asarray(z0, dtype=np.float64) + s * np.asarray(eps, dtype=np.float64)


def estimate_clean(
    z_t: np.ndarray, t: int, sched: NoiseSchedule, predictor: VPredictor, cond: Conditioning
) -> np.ndarray:
    """One-step clean estimate alpha_t z_t - sigma_t v_hat."""
    v_hat = np.asarray(predictor.predict(z_t, t, cond), dtype=np.float64)
    _check_shapes(z_t, v_hat)
    a, s = sched.coeffs(t)
    return a * z_t - s * v_hat


def trajectory(
    z0: np.ndarray,
    sched: NoiseSchedule,
    predictor: VPredictor,
    cond: Conditioning,
    steps: Sequence[int],
    noise: NoiseStream,
) -> list[tuple[int, np.ndarray]]:
    """Clean estimates of ``z0`` at each requested timestep."""
    out = []
    for t in steps:
        z_t = forward_diffuse(z0, t, sched, noise.eps(t))
        out.append((int(t), estimate_clean(z_t, t, sched, predictor, cond)))
    return out


def reference_trajectory(
    z_ref: np.ndarray,
    sched: NoiseSchedule,
    base_predictor: VPredictor,
    steps: Sequence[int],
    noise: NoiseStream,
) -> list[tuple[int, np.ndarray]]:
    """Neutral baseline trajectory of a reference latent under minimal conditioning."""
    return trajectory(z_ref, sched, base_predictor, Conditioning.minimal(), steps, noise)
