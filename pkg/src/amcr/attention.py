"""Cross-attention aggregation into soft region-of-interest masks."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractViolation
from .numerics import bilinear_resize, normalize_range01


@dataclass(frozen=True)
class AttentionLayer:
    """Per-head attention from ``rows x cols`` patches to ``L`` tokens.

    ``heads`` has shape ``(n_heads, rows * cols, L)``.
    """

    heads: np.ndarray
    grid: tuple[int, int]

    def __post_init__(self) -> None:
        h = np.asarray(self.heads, dtype=np.float64)
        if h.ndim != 3:
            raise ContractViolation(f"layer heads must be 3-D (heads, HW, L), got {h.shape}")
        if h.shape[1] != self.grid[0] * self.grid[1]:
            raise ContractViolation(f"{h.shape[1]} patches do not fill a {self.grid} grid")
        if not np.all(np.isfinite(h)) or np.any(h < 0):
            raise ContractViolation("attention weights must be finite and nonnegative")
        if np.any(h.sum(axis=-1) > 1 + 1e-6):
            raise ContractViolation("attention rows sum above 1")
        object.__setattr__(self, "heads", h)


@dataclass(frozen=True)
class AttentionStack:
    layers: tuple[AttentionLayer, ...]
    token_labels: tuple[str, ...]
    step: int = 0

    def __post_init__(self) -> None:
        if not self.layers:
            raise ContractViolation("attention stack has no layers")
        lengths = {layer.heads.shape[2] for layer in self.layers}
        if len(lengths) != 1:
            raise ContractViolation(f"layers disagree on token count: {sorted(lengths)}")
        if self.token_labels and len(self.token_labels) != lengths.pop():
            raise ContractViolation("token_labels length does not match L")

    @property
    def n_tokens(self) -> int:
        return self.layers[0].heads.shape[2]


@dataclass(frozen=True)
class SoftMask:
    field: np.ndarray
    step: int = 0


def head_average(layer: AttentionLayer) -> np.ndarray:
    if layer.heads.shape[0] < 1:
        raise ContractViolation("layer has no heads")
    return layer.heads.mean(axis=0)


def token_reduce_max(attn: np.ndarray, tokens: Sequence[int] | None = None) -> np.ndarray:
    """Per-patch maximum over tokens (optionally a token subset)."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 2 or attn.shape[1] < 1:
        raise ContractViolation(f"expected an (HW, L) map with L >= 1, got {attn.shape}")
    if tokens is not None:
        idx = list(tokens)
        if not idx:
            raise ContractViolation("token subset is empty")
        attn = attn[:, idx]
    return attn.max(axis=1)


def layer_aggregate(fields: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Resample every layer map to the finest grid and take the weighted mean."""
    if not fields:
        raise ContractViolation("need at least one layer")
    if weights is None:
        w = np.ones(len(fields))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(fields),):
            raise ContractViolation(f"{w.size} weights for {len(fields)} layers")
        if np.any(w < 0) or w.sum() <= 0:
            raise ContractViolation("layer weights must be nonnegative and not all zero")
    target = max((np.shape(f) for f in fields), key=lambda s: s[0] * s[1])
    acc = np.zeros(target)
    for f, wi in zip(fields, w, strict=True):
        acc += wi * bilinear_resize(f, target)
    return acc / w.sum()


def build_soft_mask(
    stack: AttentionStack,
    weights: Sequence[float] | None = None,
    tokens: Sequence[int] | None = None,
) -> SoftMask:
    """Heads -> token max -> layer mean -> [0, 1] rescale."""
    per_layer = [token_reduce_max(head_average(layer), tokens).reshape(layer.grid) for layer in stack.layers]
    return SoftMask(normalize_range01(layer_aggregate(per_layer, weights)), stack.step)


def per_token_masks(stack: AttentionStack, weights: Sequence[float] | None = None) -> list[SoftMask]:
    """One mask per prompt token, for inspecting which words drive which region."""
    return [build_soft_mask(stack, weights, tokens=[i]) for i in range(stack.n_tokens)]


def mask_to_pixels(mask: SoftMask) -> np.ndarray:
    return np.floor(255.0 * np.clip(mask.field, 0.0, 1.0) + 0.5).astype(np.uint8)


def export_mask(mask: SoftMask, path: str | Path) -> Path:
    """Write the mask as an 8-bit grayscale PNG (value = round-half-up of 255 m)."""
    path = Path(path)
    Image.fromarray(mask_to_pixels(mask)).save(path, format="PNG")
    return path
