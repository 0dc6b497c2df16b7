"""Partial-infringement scoring over aligned generation / reference trajectories."""

from __future__ import annotations

import enum
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .attention import SoftMask
from .errors import AlignmentError, ContractViolation, DegeneratePoolError
from .numerics import bilinear_resize, cosine, lse_pool, normalize_unit

log = logging.getLogger(__name__)

DEFAULT_BETA = 20.0


class Rule(str, enum.Enum):
    WEIGHTED_MEAN = "WeightedMean"
    MAX_OVER_STEPS = "MaxOverSteps"


@dataclass(frozen=True)
class PatchEmbeddings:
    """``P`` unit patch vectors laid out row-major on ``grid``."""

    vectors: np.ndarray
    grid: tuple[int, int]
    source: str = "generated"

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ContractViolation(f"patch embeddings must be (P, dim) with P >= 1, got {v.shape}")
        if v.shape[0] != self.grid[0] * self.grid[1]:
            raise ContractViolation(f"{v.shape[0]} patches do not fill a {self.grid} grid")
        if np.max(np.abs(np.linalg.norm(v, axis=1) - 1.0)) > 1e-9:
            raise ContractViolation("patch embeddings must be unit vectors")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


def mask_weights(mask: SoftMask | np.ndarray, grid: tuple[int, int] | None = None) -> np.ndarray:
    """Flattened patch weights proportional to the mask; uniform if the mask is all zero."""
    m = np.asarray(mask.field if isinstance(mask, SoftMask) else mask, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if grid is not None and tuple(m.shape) != tuple(grid):
        m = bilinear_resize(m, grid)
    flat = np.clip(m.ravel(), 0.0, None)
    total = flat.sum()
    if total <= 0:
        return np.full(flat.size, 1.0 / flat.size)
    return flat / total


def pooled_embedding(patches: PatchEmbeddings, weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (patches.count,):
        raise ContractViolation(f"{w.size} weights for {patches.count} patches")
    if w.sum() <= 0:
        raise ContractViolation("weights must have a positive sum")
    pooled = w @ patches.vectors
    if not np.any(pooled):
        raise DegeneratePoolError("weighted patch sum is exactly zero")
    return normalize_unit(pooled)


def partial_similarity(g: np.ndarray, ref: PatchEmbeddings, beta: float = DEFAULT_BETA) -> float:
    """Smooth max over reference patches of cos(g, u_j)."""
    return lse_pool([cosine(g, u) for u in ref.vectors], beta)


def step_similarity(gen: PatchEmbeddings, mask: SoftMask | np.ndarray, ref: PatchEmbeddings, beta: float) -> float:
    w = mask_weights(mask, gen.grid)
    try:
        g = pooled_embedding(gen, w)
    except DegeneratePoolError:
        log.warning("mask-weighted pool cancelled; retrying with uniform weights")
        g = pooled_embedding(gen, np.full(gen.count, 1.0 / gen.count))
    return partial_similarity(g, ref, beta)


def uniform_pi(steps: Sequence[int]) -> dict[int, float]:
    return {int(t): 1.0 / len(steps) for t in steps}


def _check_pi(pi: Mapping[int, float], steps: Sequence[int]) -> None:
    if set(pi) != set(steps):
        raise AlignmentError(f"timestep weights cover {sorted(pi)}, trajectories cover {sorted(steps)}")
    vals = np.array(list(pi.values()), dtype=np.float64)
    if np.any(vals < 0) or abs(vals.sum() - 1.0) > 1e-9:
        raise ContractViolation("timestep weights must be nonnegative and sum to 1")


@dataclass
class DetectionReport:
    per_step: dict[int, float]
    overall: float
    rule: str
    tau: float
    infringed: bool
    beta: float = DEFAULT_BETA
    pi: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_step": {str(t): v for t, v in self.per_step.items()},
            "overall": self.overall,
            "rule": self.rule,
            "tau": self.tau,
            "infringed": self.infringed,
            "beta": self.beta,
            "pi": {str(t): v for t, v in self.pi.items()},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DetectionReport:
        return cls(
            {int(t): v for t, v in data["per_step"].items()},
            data["overall"],
            data["rule"],
            data["tau"],
            data["infringed"],
            data.get("beta", DEFAULT_BETA),
            {int(t): v for t, v in data.get("pi", {}).items()},
        )


def detect(
    gen_steps: Mapping[int, tuple[PatchEmbeddings, SoftMask | np.ndarray]],
    ref_steps: Mapping[int, PatchEmbeddings],
    tau: float,
    pi: Mapping[int, float] | None = None,
    beta: float = DEFAULT_BETA,
    rule: Rule | str = Rule.WEIGHTED_MEAN,
) -> DetectionReport:
    """Score every aligned timestep and threshold the aggregate (strictly)."""
    rule = Rule(rule)
    steps = sorted(gen_steps)
    if not steps:
        raise ContractViolation("no timesteps to evaluate")
    if set(steps) != set(ref_steps):
        raise AlignmentError(
            f"generation steps {steps} and reference steps {sorted(ref_steps)} are not aligned"
        )
    pi = dict(pi) if pi is not None else uniform_pi(steps)
    _check_pi(pi, steps)
    per_step = {}
    for t in steps:
        patches, mask = gen_steps[t]
        per_step[t] = step_similarity(patches, mask, ref_steps[t], beta)
    if rule is Rule.WEIGHTED_MEAN:
        overall = float(sum(pi[t] * per_step[t] for t in steps))
    else:
        overall = max(per_step.values())
    return DetectionReport(per_step, overall, rule.value, float(tau), overall > tau, beta, pi)
