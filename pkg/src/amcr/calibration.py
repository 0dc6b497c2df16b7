"""Threshold calibration from labeled (score, infringing?) pairs."""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CalibrationError, ValidationError


@dataclass(frozen=True)
class LabeledPair:
    score: float
    infringing: bool


@dataclass(frozen=True)
class Calibration:
    tau: float
    f1: float
    precision: float
    recall: float
    operating_point: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "tau": self.tau,
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "operating_point": self.operating_point,
        }


def confusion(pairs: Sequence[LabeledPair], tau: float) -> tuple[int, int, int]:
    """True positives, false positives, false negatives under ``score > tau``."""
    tp = fp = fn = 0
    for p in pairs:
        flagged = p.score > tau
        if flagged and p.infringing:
            tp += 1
        elif flagged:
            fp += 1
        elif p.infringing:
            fn += 1
    return tp, fp, fn


def _metrics(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return f1, precision, recall


def parse_operating_point(text: str) -> float | None:
    """``"f1"`` or ``"precision:<p>"``; returns the precision floor or None."""
    if text == "f1":
        return None
    kind, _, value = text.partition(":")
    if kind == "precision":
        try:
            p = float(value)
        except ValueError:
            pass
        else:
            if 0.0 < p <= 1.0:
                return p
    raise CalibrationError(f"unknown operating point {text!r} (use 'f1' or 'precision:<p>')")


def calibrate(pairs: Iterable[LabeledPair], operating_point: str = "f1") -> Calibration:
    """Pick the threshold that maximizes F1 under the strict ``score > tau`` rule.

    Candidates sit one ulp below each observed score, so every achievable
    partition is reachable; ties go to the larger threshold.  With a
    ``precision:<p>`` operating point only thresholds reaching precision
    ``p`` are eligible and F1 is maximized among them.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise CalibrationError("need at least two labeled pairs")
    labels = {p.infringing for p in pairs}
    if len(labels) < 2:
        raise CalibrationError("both clean and infringing pairs are required")
    if not all(math.isfinite(p.score) for p in pairs):
        raise CalibrationError("scores must be finite")
    floor = parse_operating_point(operating_point)
    best: tuple[float, float, float, float] | None = None
    for s in sorted({p.score for p in pairs}, reverse=True):
        tau = float(np.nextafter(s, -np.inf))
        f1, precision, recall = _metrics(*confusion(pairs, tau))
        if floor is not None and precision < floor:
            continue
        if best is None or f1 > best[1]:
            best = (tau, f1, precision, recall)
    if best is None:
        raise CalibrationError(f"no threshold reaches the {operating_point} operating point")
    return Calibration(*best, operating_point)


def load_pairs(path: str | Path) -> list[LabeledPair]:
    """JSON lines of ``{"score": float, "label": bool | 0 | 1}``; ``#`` lines are comments."""
    path = Path(path)
    pairs = []
    with path.open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
                score = float(rec["score"])
                label = rec["label"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{n}: expected {{score, label}} ({exc})") from exc
            if label not in (True, False, 0, 1):
                raise ValidationError(f"{path}:{n}: label must be a boolean or 0/1")
            pairs.append(LabeledPair(score, bool(label)))
    return pairs
