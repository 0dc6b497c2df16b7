"""On-disk formats: tensor containers, fixture bundles and canonical reports.

Tensor container layout (all integers little-endian)::

    b"AMCR"  u16 version  4-byte kind tag
    u32 meta_len  meta_len bytes of UTF-8 JSON
    u32 count
    count x [ i32 step  u8 ndim  ndim x u32 dim  prod(dim) x f64 ]
"""

from __future__ import annotations

import json
import math
import struct
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .attention import AttentionLayer, AttentionStack, SoftMask
from .backends import LinearPatchEncoder, TextEncoder, fixture_encoder
from .detector import DetectionReport, PatchEmbeddings
from .diffusion import NoiseSchedule, make_schedule
from .errors import ContractViolation, NumericError, ValidationError
from .mitigator import LossReport, MitigationFixture, PreserveSample, ToyPredictor
from .risk import RiskCorpus, SlotRiskReport, load_corpus
from .sanitizer import SanitizationResult

MAGIC = b"AMCR"
VERSION = 1
KINDS = {"LATN", "ATTN", "PTCH", "MASK", "PRED"}


def write_container(path: str | Path, kind: str, records: Sequence[tuple[int, np.ndarray]], meta: Mapping[str, Any] | None = None) -> Path:
    if kind not in KINDS:
        raise ContractViolation(f"unknown container kind {kind!r}")
    path = Path(path)
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<H", VERSION), kind.encode("ascii"), struct.pack("<I", len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(records)))
    for step, arr in records:
        a = np.asarray(arr, dtype="<f8")
        if not np.all(np.isfinite(a)):
            raise NumericError(f"refusing to write non-finite values to {path}")
        parts.append(struct.pack("<iB", int(step), a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    path.write_bytes(b"".join(parts))
    return path


def read_container(path: str | Path, kind: str | None = None) -> tuple[dict[str, Any], list[tuple[int, np.ndarray]]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read ({exc})") from exc
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ValidationError(f"{path}: truncated container (needed {n} bytes at offset {pos})")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise ValidationError(f"{path}: not an AMCR container")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported container version {version}")
    found = take(4).decode("ascii", errors="replace")
    if kind is not None and found != kind:
        raise ValidationError(f"{path}: expected a {kind} container, found {found}")
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(meta_len).decode()) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: corrupt metadata ({exc})") from exc
    (count,) = struct.unpack("<I", take(4))
    records = []
    for _ in range(count):
        step, ndim = struct.unpack("<iB", take(5))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValidationError(f"{path}: record for step {step} has non-finite values")
        records.append((step, data))
    if pos != len(buf):
        raise ValidationError(f"{path}: {len(buf) - pos} trailing bytes after last record")
    return meta, records


# -- typed helpers -----------------------------------------------------------

def save_latents(path: str | Path, latents: Mapping[int, np.ndarray], names: Sequence[str] = ()) -> Path:
    return write_container(path, "LATN", sorted(latents.items()), {"names": list(names)} if names else None)


def load_latents(path: str | Path) -> dict[int, np.ndarray]:
    _, records = read_container(path, "LATN")
    out = {}
    for step, arr in records:
        if arr.ndim not in (2, 3):
            raise ValidationError(f"{path}: latent for step {step} has shape {arr.shape}")
        out[step] = arr if arr.ndim == 3 else arr[None]
    return out


def save_attention(path: str | Path, stacks: Sequence[AttentionStack]) -> Path:
    records = []
    for stack in stacks:
        for layer in stack.layers:
            h, hw, L = layer.heads.shape
            records.append((stack.step, layer.heads.reshape(h, *layer.grid, L)))
    labels = list(stacks[0].token_labels) if stacks else []
    return write_container(path, "ATTN", records, {"token_labels": labels})


def load_attention(path: str | Path) -> list[AttentionStack]:
    meta, records = read_container(path, "ATTN")
    labels = tuple(meta.get("token_labels", ()))
    by_step: dict[int, list[AttentionLayer]] = {}
    try:
        for step, arr in records:
            if arr.ndim != 4:
                raise ValidationError(f"{path}: attention layer must be 4-D, got {arr.shape}")
            h, rows, cols, L = arr.shape
            by_step.setdefault(step, []).append(AttentionLayer(arr.reshape(h, rows * cols, L), (rows, cols)))
        return [AttentionStack(tuple(layers), labels, step) for step, layers in sorted(by_step.items())]
    except ContractViolation as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def save_patches(path: str | Path, patches: Mapping[int, PatchEmbeddings]) -> Path:
    records = [(t, p.vectors.reshape(*p.grid, -1)) for t, p in sorted(patches.items())]
    return write_container(path, "PTCH", records)


def load_patches(path: str | Path, source: str = "generated") -> dict[int, PatchEmbeddings]:
    _, records = read_container(path, "PTCH")
    out = {}
    for step, arr in records:
        if arr.ndim != 3:
            raise ValidationError(f"{path}: patch record must be (rows, cols, dim), got {arr.shape}")
        try:
            out[step] = PatchEmbeddings(arr.reshape(-1, arr.shape[2]), arr.shape[:2], source)
        except ContractViolation as exc:
            raise ValidationError(f"{path}: step {step}: {exc}") from exc
    return out


def save_masks(path: str | Path, masks: Mapping[int, SoftMask]) -> Path:
    return write_container(path, "MASK", [(t, m.field) for t, m in sorted(masks.items())])


def load_masks(path: str | Path) -> dict[int, SoftMask]:
    _, records = read_container(path, "MASK")
    out = {}
    for step, arr in records:
        if arr.ndim != 2 or np.any(arr < 0) or np.any(arr > 1):
            raise ValidationError(f"{path}: mask for step {step} must be a 2-D field in [0, 1]")
        out[step] = SoftMask(arr, step)
    return out


def save_predictor(path: str | Path, predictor: ToyPredictor) -> Path:
    return write_container(path, "PRED", [(0, predictor.W), (1, predictor.b)], {"shape": list(predictor.shape)})


def load_predictor(path: str | Path) -> ToyPredictor:
    meta, records = read_container(path, "PRED")
    try:
        (_, W), (_, b) = records
        return ToyPredictor(W, b, tuple(meta["shape"]))
    except (ValueError, KeyError, ContractViolation) as exc:
        raise ValidationError(f"{path}: malformed predictor ({exc})") from exc


# -- fixture bundles ---------------------------------------------------------

@dataclass
class FixtureBundle:
    root: Path
    manifest: dict[str, Any]
    latents: dict[str, np.ndarray] = field(default_factory=dict)
    attention: list[AttentionStack] = field(default_factory=list)
    gen_patches: dict[int, PatchEmbeddings] = field(default_factory=dict)
    ref_patches: dict[int, PatchEmbeddings] = field(default_factory=dict)
    masks: dict[int, SoftMask] = field(default_factory=dict)
    corpus: RiskCorpus | None = None
    prompts: list[dict[str, Any]] = field(default_factory=list)
    predictor: ToyPredictor | None = None
    preserve: list[PreserveSample] = field(default_factory=list)

    @property
    def steps(self) -> list[int]:
        return [int(t) for t in self.manifest.get("steps", [])]

    def schedule(self) -> NoiseSchedule:
        sched = self.manifest.get("schedule", {})
        return make_schedule(int(sched.get("T", 10)), sched.get("family", "cosine"))

    def patch_encoder(self) -> LinearPatchEncoder:
        cfg = self.manifest.get("patch_encoder", {})
        return LinearPatchEncoder(**cfg)

    def mitigation_fixture(self, prompt_embedding: np.ndarray) -> MitigationFixture:
        if self.predictor is None or not self.preserve:
            raise ValidationError(f"{self.root}: bundle has no predictor / preserve batch for mitigation")
        return MitigationFixture(
            sched=self.schedule(),
            steps=self.steps,
            gen_latent=self.latents["generated"],
            ref_latent=self.latents["reference"],
            masks=self.masks,
            prompt_embedding=prompt_embedding,
            batch=self.preserve,
            encoder=self.patch_encoder(),
            base=self.predictor,
            seed=int(self.manifest.get("seed", 0)),
        )


def ingest_fixture_bundle(root: str | Path, encoder: TextEncoder | None = None) -> FixtureBundle:
    """Load and validate every artifact a bundle directory provides.

    Only ``manifest.json`` is mandatory; the other files are loaded when
    present (see docs/fixtures.md for the layout).  The corpus is embedded
    with ``encoder``, defaulting to the shipped test encoder.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{manifest_path}: {exc}") from exc
    bundle = FixtureBundle(root, manifest)
    files = manifest.get("files", {})

    def path(key: str, default: str) -> Path | None:
        p = root / files.get(key, default)
        return p if p.exists() else None

    for name, default in (("generated", "latent_gen.amcr"), ("reference", "latent_ref.amcr")):
        if p := path(f"{name}_latent", default):
            raw = load_latents(p)
            if len(raw) != 1:
                raise ValidationError(f"{p}: expected a single latent, found {len(raw)}")
            bundle.latents[name] = next(iter(raw.values()))
    if p := path("attention", "attention.amcr"):
        bundle.attention = load_attention(p)
    if p := path("gen_patches", "patches_gen.amcr"):
        bundle.gen_patches = load_patches(p, "generated")
    if p := path("ref_patches", "patches_ref.amcr"):
        bundle.ref_patches = load_patches(p, "reference")
    if p := path("masks", "masks.amcr"):
        bundle.masks = load_masks(p)
    if p := path("corpus", "corpus.jsonl"):
        bundle.corpus = load_corpus(p, encoder or fixture_encoder(int(manifest.get("seed", 0))))
    if p := path("prompts", "prompts.json"):
        bundle.prompts = json.loads(p.read_text(encoding="utf-8"))
    if p := path("predictor", "predictor.amcr"):
        bundle.predictor = load_predictor(p)
    if p := path("preserve", "preserve.amcr"):
        meta, records = read_container(p, "LATN")
        ts = meta.get("t", [])
        if len(records) != 2 * len(ts):
            raise ValidationError(f"{p}: expected {2 * len(ts)} records (z0, eps per sample), found {len(records)}")
        bundle.preserve = [
            PreserveSample(records[2 * i][1], records[2 * i + 1][1], int(t)) for i, t in enumerate(ts)
        ]
    if bundle.gen_patches and bundle.ref_patches and set(bundle.gen_patches) != set(bundle.ref_patches):
        raise ValidationError(f"{root}: generated and reference patch steps differ")
    return bundle


# -- canonical reports -------------------------------------------------------

REPORT_TYPES = {
    "slot_risk": SlotRiskReport,
    "sanitization": SanitizationResult,
    "detection": DetectionReport,
    "loss": LossReport,
}


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise NumericError(f"cannot serialize non-finite value {x}")
    return repr(float(x))


def canonical_json(obj: Any) -> str:
    """Sorted-key JSON with shortest round-trip floats; rejects NaN/inf."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, Mapping):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ", ".join(f"{json.dumps(k, ensure_ascii=False)}: {canonical_json(v)}" for k, v in items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(canonical_json(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def report_payload(report: Any) -> dict[str, Any]:
    for name, cls in REPORT_TYPES.items():
        if isinstance(report, cls):
            return {"type": name, "report": report.to_dict()}
    raise TypeError(f"not a report: {type(report).__name__}")


def dumps_report(report: Any) -> str:
    return canonical_json(report_payload(report)) + "\n"


def persist_report(report: Any, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps_report(report), encoding="utf-8")
    return path


def loads_report(text: str) -> Any:
    data = json.loads(text)
    cls = REPORT_TYPES.get(data.get("type"))
    if cls is None:
        raise ValidationError(f"unknown report type {data.get('type')!r}")
    return cls.from_dict(data["report"])


def load_report(path: str | Path) -> Any:
    return loads_report(Path(path).read_text(encoding="utf-8"))
