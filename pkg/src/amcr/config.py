"""Layered configuration: flag > environment (``AMCR_<KEY>``) > JSON file > built-in."""

from __future__ import annotations

import json
import os
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ValidationError


@dataclass(frozen=True)
class Knob:
    default: Any
    type: type
    help: str


KNOBS: dict[str, Knob] = {
    # sanitizer
    "lam": Knob(0.5, float, "risk-reduction weight in the candidate score"),
    "budget": Knob(5, int, "maximum number of accepted replacements"),
    "gamma": Knob(0.02, float, "minimum mean risk drop over the recent window"),
    "window_m": Knob(3, int, "window length for the marginal-improvement stop"),
    "risk_quantile": Knob(0.5, float, "stop once every slot is below this quantile of the initial risks"),
    "candidates_per_element": Knob(4, int, "candidates requested per phrase"),
    # detector
    "beta": Knob(20.0, float, "log-sum-exp sharpness"),
    "tau": Knob(0.9, float, "infringement threshold (strict)"),
    "rule": Knob("WeightedMean", str, "step aggregation: WeightedMean or MaxOverSteps"),
    "pi": Knob("", str, "timestep weights as t:w,t:w (empty means uniform)"),
    # diffusion
    "schedule_t": Knob(10, int, "number of diffusion steps T"),
    "schedule_family": Knob("cosine", str, "noise schedule family: cosine or linear"),
    "timesteps": Knob("3,5,8", str, "comma-separated timesteps to evaluate"),
    # mitigator
    "lambda_r": Knob(1.0, float, "risk loss weight"),
    "lambda_a": Knob(0.1, float, "alignment loss weight"),
    "w_preserve": Knob("constant", str, "preservation timestep weighting: constant or snr"),
    "w_risk": Knob("snr", str, "risk timestep weighting: constant or snr"),
    "w_align": Knob("constant", str, "alignment timestep weighting: constant or snr"),
    "lr": Knob(0.01, float, "finetuning learning rate"),
    "iters": Knob(200, int, "finetuning iterations"),
    # calibration
    "operating_point": Knob("f1", str, "f1 or precision:<p>"),
    # providers
    "encoder_dim": Knob(64, int, "dimension of the deterministic test encoder"),
    "embed_endpoint": Knob("", str, "embedding service URL (empty uses the test encoder)"),
    "embed_timeout": Knob(10.0, float, "embedding request timeout in seconds"),
    "embed_token": Knob("", str, "bearer token for provider requests"),
    "slot_endpoint": Knob("", str, "slot extraction service URL (empty uses the grammar parser)"),
    "vocab": Knob("", str, "planted vocabulary JSON for the test encoder (empty uses the shipped one)"),
    "seed": Knob(0, int, "seed for noise draws and the test encoder"),
}

def coerce(key: str, value: Any) -> Any:
    knob = KNOBS[key]
    try:
        if knob.type is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return knob.type(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config key {key!r}: cannot read {value!r} as {knob.type.__name__}") from exc


def env_name(key: str) -> str:
    return "AMCR_" + key.upper()


def load_config(
    flags: Mapping[str, Any] | None = None,
    path: str | Path | None = None,
    environ: Mapping[str, str] | None = None,
) -> dict[str, Any]:
    """Merge the four layers; ``None`` flag values count as unset."""
    merged = {k: knob.default for k, knob in KNOBS.items()}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        unknown = set(data) - set(KNOBS)
        if unknown:
            raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
        merged.update({k: coerce(k, v) for k, v in data.items()})
    env = os.environ if environ is None else environ
    for key in KNOBS:
        if env_name(key) in env:
            merged[key] = coerce(key, env[env_name(key)])
    for key, value in (flags or {}).items():
        if key in KNOBS and value is not None:
            merged[key] = coerce(key, value)
    return merged


def parse_steps(text: str) -> list[int]:
    try:
        steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad step list {text!r}") from exc
    if not steps:
        raise ValidationError("step list is empty")
    return steps


def parse_pi(text: str) -> dict[int, float] | None:
    if not text.strip():
        return None
    out = {}
    try:
        for item in text.split(","):
            t, _, w = item.partition(":")
            out[int(t)] = float(w)
    except ValueError as exc:
        raise ValidationError(f"bad timestep weights {text!r} (use t:w,t:w)") from exc
    return out
