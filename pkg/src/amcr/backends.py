"""Provider contracts and the hermetic implementations used in tests.

Every text or image encoder returns unit-normalized rows; scoring code
downstream treats cosine as a plain inner product.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Protocol, runtime_checkable

import httpx
import numpy as np

from .errors import (
    ConsistencyError,
    ContractViolation,
    DimensionDriftError,
    ProtocolError,
    ProviderError,
    ProviderTimeout,
    ProviderUnavailable,
    ZeroNormError,
)
from .numerics import normalize_rows

log = logging.getLogger(__name__)


def fold(text: str) -> str:
    """Case-fold and collapse whitespace; used as the identity of a phrase."""
    return " ".join(text.casefold().split())


@runtime_checkable
class TextEncoder(Protocol):
    id: str
    dim: int
    concurrent_safe: bool

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return an ``(len(texts), dim)`` array of unit rows."""
        ...


class CandidateProvider(Protocol):
    def candidates(self, phrase: str, kind: str) -> list[str]: ...


class DeterministicTestEncoder:
    """Hash-keyed pseudorandom text embeddings.

    A string maps to the unit-normalized standard-normal draw seeded by
    ``sha256(seed, fold(text))``.  ``planted`` pins chosen phrases to given
    vectors so tests can rely on hand-computed cosines.
    """

    concurrent_safe = True

    def __init__(self, seed: int = 0, dim: int = 64, planted: Mapping[str, Sequence[float]] | None = None):
        if dim < 1:
            raise ContractViolation("dim must be positive")
        self.seed = int(seed)
        self.dim = int(dim)
        self._planted: dict[str, np.ndarray] = {}
        for phrase, vec in (planted or {}).items():
            v = np.asarray(vec, dtype=np.float64)
            if v.shape != (self.dim,):
                raise ConsistencyError(f"planted vector for {phrase!r} has shape {v.shape}, expected ({self.dim},)")
            self._planted[fold(phrase)] = normalize_rows(v[None, :])[0]
        self.id = f"deterministic-test/seed={self.seed}/dim={self.dim}"
        if self._planted:
            digest = hashlib.sha256()
            for key in sorted(self._planted):
                digest.update(key.encode())
                digest.update(self._planted[key].tobytes())
            self.id += f"/planted={digest.hexdigest()[:12]}"

    @classmethod
    def from_vocabulary(cls, vocab: Mapping[str, Any], seed: int = 0, dim: int = 64) -> DeterministicTestEncoder:
        """Build an encoder whose planted phrases are sums of named axes.

        ``vocab`` is ``{"axes": [name, ...], "phrases": {phrase: {axis: weight}}}``;
        axis ``i`` is the ``i``-th standard basis vector.
        """
        axes = {name: i for i, name in enumerate(vocab["axes"])}
        if len(axes) > dim:
            raise ConsistencyError(f"{len(axes)} axes do not fit in dimension {dim}")
        planted = {}
        for phrase, weights in vocab["phrases"].items():
            v = np.zeros(dim)
            for axis, w in weights.items():
                v[axes[axis]] += w
            planted[phrase] = v
        return cls(seed=seed, dim=dim, planted=planted)

    def _random_vector(self, key: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{key}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed_one(self, text: str) -> np.ndarray:
        key = fold(text)
        v = self._planted.get(key)
        return (v if v is not None else self._random_vector(key)).copy()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.embed_one(t) for t in texts])


@lru_cache(maxsize=1)
def fixture_vocabulary() -> dict[str, Any]:
    text = resources.files("amcr").joinpath("data/fixture_vocab.json").read_text(encoding="utf-8")
    return json.loads(text)


def fixture_encoder(seed: int = 0, dim: int = 64) -> DeterministicTestEncoder:
    """The test encoder with the shipped planted vocabulary."""
    return DeterministicTestEncoder.from_vocabulary(fixture_vocabulary(), seed=seed, dim=dim)


class StaticCandidateTable:
    """Replacement candidates looked up from a per-kind synonym table.

    The table maps ``kind -> {phrase: [candidates]}``; a ``"*"`` entry under
    a kind is used for phrases that have no row of their own.
    """

    concurrent_safe = True

    def __init__(self, table: Mapping[str, Mapping[str, Sequence[str]]]):
        self.table = {kind: {fold(p): list(c) for p, c in rows.items()} for kind, rows in table.items()}

    @classmethod
    def default(cls) -> StaticCandidateTable:
        text = resources.files("amcr").joinpath("data/candidates.json").read_text(encoding="utf-8")
        return cls(json.loads(text))

    def candidates(self, phrase: str, kind: str) -> list[str]:
        rows = self.table.get(kind)
        if rows is None:
            return []
        return list(rows.get(fold(phrase), rows.get("*", [])))


class LinearPatchEncoder:
    """Desk-scale stand-in for a ViT patch encoder.

    The latent grid is cut into non-overlapping ``patch x patch`` tiles; each
    tile is projected by a fixed random affine map and unit-normalized.
    Being smooth, it lets losses backpropagate into the latent.
    """

    def __init__(self, patch: int = 2, dim: int = 32, channels: int = 1, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.patch = patch
        self.dim = dim
        self.channels = channels
        self.proj = rng.standard_normal((dim, channels * patch * patch))
        self.bias = 0.5 * rng.standard_normal(dim)
        self.id = f"linear-patch/p={patch}/d={dim}/c={channels}/seed={seed}"

    def grid(self, shape: tuple[int, ...]) -> tuple[int, int]:
        h, w = shape[-2:]
        if h % self.patch or w % self.patch:
            raise ContractViolation(f"latent {h}x{w} is not divisible into {self.patch}x{self.patch} patches")
        return h // self.patch, w // self.patch

    def _tiles(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.ndim == 2:
            z = z[None]
        c, h, w = z.shape
        if c != self.channels:
            raise ContractViolation(f"encoder expects {self.channels} channels, got {c}")
        gh, gw = self.grid(z.shape)
        t = z.reshape(c, gh, self.patch, gw, self.patch).transpose(1, 3, 0, 2, 4)
        return t.reshape(gh * gw, c * self.patch * self.patch)

    def _untile(self, tiles: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        z_shape = shape if len(shape) == 3 else (1, *shape)
        c, h, w = z_shape
        gh, gw = h // self.patch, w // self.patch
        t = tiles.reshape(gh, gw, c, self.patch, self.patch).transpose(2, 0, 3, 1, 4)
        return t.reshape(shape)

    def forward(self, latent: np.ndarray) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray, tuple[int, ...]]]:
        raw = self._tiles(latent) @ self.proj.T + self.bias
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        feats = raw / norms
        return feats, (feats, norms, np.shape(latent))

    def backward(self, cache: tuple[np.ndarray, np.ndarray, tuple[int, ...]], d_feats: np.ndarray) -> np.ndarray:
        """Pull a gradient w.r.t. the unit patch rows back onto the latent."""
        feats, norms, shape = cache
        d_raw = (d_feats - feats * np.sum(d_feats * feats, axis=1, keepdims=True)) / norms
        return self._untile(d_raw @ self.proj, shape)

    def embed_patches(self, latent: np.ndarray):
        from .detector import PatchEmbeddings

        feats, _ = self.forward(latent)
        return PatchEmbeddings(feats, self.grid(np.shape(latent)))


@dataclass
class RetryPolicy:
    attempts: int = 3
    backoff: float = 0.2
    cap: float = 2.0

    def delay(self, attempt: int) -> float:
        return min(self.cap, self.backoff * 2**attempt)


def remote_embed(
    texts: Sequence[str],
    endpoint: str,
    timeout: float = 10.0,
    *,
    dim: int | None = None,
    retry: RetryPolicy | None = None,
    token: str | None = None,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> np.ndarray:
    """POST ``{"texts": [...]}`` to ``endpoint`` and return unit rows.

    Network failures and 5xx answers are retried with exponential backoff;
    malformed answers raise :class:`ProtocolError` immediately.
    """
    texts = list(texts)
    if not texts:
        return np.zeros((0, dim or 0))
    retry = retry or RetryPolicy()
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    owned = client is None
    client = client or httpx.Client(timeout=timeout)
    last: Exception | None = None
    try:
        for attempt in range(retry.attempts):
            if attempt:
                sleep(retry.delay(attempt - 1))
            try:
                response = client.post(endpoint, json={"texts": texts}, headers=headers, timeout=timeout)
            except httpx.TimeoutException as exc:
                last = ProviderTimeout(f"embedding request to {endpoint} timed out: {exc}")
                continue
            except httpx.TransportError as exc:
                last = ProviderUnavailable(f"embedding service {endpoint} unreachable: {exc}")
                continue
            if response.status_code >= 500:
                last = ProviderUnavailable(f"embedding service answered {response.status_code}")
                continue
            if response.status_code >= 400:
                raise ProtocolError(f"embedding service rejected request: {response.status_code} {response.text[:200]}")
            return _parse_vectors(response, len(texts), dim)
    finally:
        if owned:
            client.close()
    assert last is not None
    log.warning("giving up on %s after %d attempts", endpoint, retry.attempts)
    raise last


def _parse_vectors(response: httpx.Response, n: int, dim: int | None) -> np.ndarray:
    try:
        body = response.json()
        vectors = body["vectors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed embedding response: {exc}") from exc
    if not isinstance(vectors, list) or len(vectors) != n:
        got = len(vectors) if isinstance(vectors, list) else type(vectors).__name__
        raise ProtocolError(f"expected {n} vectors, got {got}")
    try:
        arr = np.asarray(vectors, dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise ProtocolError(f"vectors are not a numeric matrix: {exc}") from exc
    if arr.ndim != 2:
        raise ProtocolError("vectors are ragged")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionDriftError(f"service returned dimension {arr.shape[1]}, declared {dim}")
    if not np.all(np.isfinite(arr)):
        raise ProtocolError("service returned non-finite values")
    try:
        return normalize_rows(arr)
    except ZeroNormError as exc:
        raise ProtocolError(f"service returned a zero vector: {exc}") from exc


class RemoteTextEncoder:
    """TextEncoder backed by an HTTP embedding service."""

    concurrent_safe = True

    def __init__(
        self,
        endpoint: str,
        dim: int,
        timeout: float = 10.0,
        retry: RetryPolicy | None = None,
        token: str | None = None,
        encoder_id: str | None = None,
    ):
        self.endpoint = endpoint
        self.dim = dim
        self.timeout = timeout
        self.retry = retry or RetryPolicy()
        self.token = token
        self.id = encoder_id or f"remote:{endpoint}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return remote_embed(texts, self.endpoint, self.timeout, dim=self.dim, retry=self.retry, token=self.token)


class RemoteSlotProvider:
    """SlotProvider speaking the ``{prompt, schema}`` wire contract over HTTP."""

    def __init__(self, endpoint: str, timeout: float = 10.0, token: str | None = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.token = token

    def request(self, payload: dict[str, Any]) -> dict[str, Any]:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        try:
            response = httpx.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(str(exc)) from exc
        except httpx.TransportError as exc:
            raise ProviderUnavailable(str(exc)) from exc
        if response.status_code != 200:
            raise ProviderError(f"slot provider answered {response.status_code}")
        try:
            return response.json()
        except ValueError as exc:
            raise ProtocolError(f"slot provider sent invalid JSON: {exc}") from exc


def load_vocabulary(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
