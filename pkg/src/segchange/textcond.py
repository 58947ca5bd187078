"""Text conditioning: embedding providers, sequence-length control and conditioning modes."""
import enum
import hashlib
import json
import os
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ProviderError, ShapeError

URL_ENV_VAR = "SEGCHANGE_TEXT_URL"


@dataclass(frozen=True)
class TextEmbedding:
    """L×D token vectors; rows at or beyond ``valid_length`` are zero padding."""

    vectors: np.ndarray
    valid_length: int

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"text vectors must be L x D, got shape {v.shape}")
        if not 0 <= self.valid_length <= v.shape[0]:
            raise ShapeError(f"valid_length {self.valid_length} outside [0, {v.shape[0]}]")
        if not np.all(np.isfinite(v)):
            raise ShapeError("text vectors must be finite")
        if np.any(v[self.valid_length:] != 0):
            raise ShapeError("padding rows must be exactly zero")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def length(self):
        return self.vectors.shape[0]

    @property
    def width(self):
        return self.vectors.shape[1]

    @classmethod
    def empty(cls, length, width):
        return cls(np.zeros((length, width)), 0)


class ConditioningMode(str, enum.Enum):
    NONE = "none"
    STATIC = "static"
    DYNAMIC = "dynamic"


class StubProvider:
    """Hermetic provider: each whitespace token maps to a seeded pseudo-random unit vector.

    The vector depends only on (seed, token), so it is reproducible across
    processes and there is no positional mixing between tokens.
    """

    def __init__(self, width: int, seed: int = 0):
        self.width = int(width)
        self.seed = int(seed)

    def token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\x00{token}".encode("utf-8"), digest_size=16).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        v = rng.standard_normal(self.width)
        return v / np.linalg.norm(v)

    def __call__(self, prompt: str) -> np.ndarray:
        tokens = prompt.split()
        if not tokens:
            return np.zeros((0, self.width))
        return np.stack([self.token_vector(t) for t in tokens])


class HttpProvider:
    """Posts ``{"prompt": ...}`` and expects ``{"vectors": [[...], ...]}`` back."""

    def __init__(self, url: str, width: int, timeout: float = 10.0):
        self.url = url
        self.width = int(width)
        self.timeout = timeout

    def __call__(self, prompt: str) -> np.ndarray:
        body = json.dumps({"prompt": prompt}).encode("utf-8")
        req = urllib.request.Request(
            self.url, data=body, method="POST", headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = resp.read()
        except urllib.error.HTTPError as e:
            raise ProviderError(f"{self.url} returned HTTP {e.code}", retriable=e.code >= 500) from e
        except (socket.timeout, TimeoutError) as e:
            raise ProviderError(f"{self.url} timed out after {self.timeout}s", retriable=True) from e
        except urllib.error.URLError as e:
            retriable = isinstance(e.reason, (socket.timeout, TimeoutError, ConnectionError))
            raise ProviderError(f"{self.url} unreachable: {e.reason}", retriable=retriable) from e
        try:
            vectors = np.asarray(json.loads(payload)["vectors"], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as e:
            raise ProviderError(f"malformed response from {self.url}: {e}") from e
        if vectors.size == 0:
            return np.zeros((0, self.width))
        if vectors.ndim != 2 or vectors.shape[1] != self.width:
            raise ProviderError(
                f"{self.url} returned vectors of shape {vectors.shape}, expected (L, {self.width})"
            )
        return vectors


def make_provider(kind: str, width: int, seed: int = 0, url: str = ""):
    if kind == "stub":
        return StubProvider(width, seed)
    if kind == "http":
        url = os.environ.get(URL_ENV_VAR) or url
        if not url:
            raise ConfigError(f"text.provider=http needs text.http.url or ${URL_ENV_VAR}")
        return HttpProvider(url, width)
    raise ConfigError(f"unknown text provider {kind!r}")


def embed(provider, prompt: str) -> TextEmbedding:
    vectors = np.asarray(provider(prompt), dtype=np.float64)
    return TextEmbedding(vectors, vectors.shape[0])


def fit_length(e: TextEmbedding, max_len: int) -> TextEmbedding:
    """Truncate or zero-pad to exactly ``max_len`` rows."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    vl = min(e.valid_length, max_len)
    out = np.zeros((max_len, e.width))
    out[:vl] = e.vectors[:vl]
    return TextEmbedding(out, vl)


def aggregate_temporal(e1: TextEmbedding, e2: TextEmbedding) -> TextEmbedding:
    """Concatenate the valid rows of both phases and refit to the common length."""
    if e1.width != e2.width:
        raise ShapeError(f"text width mismatch: {e1.width} vs {e2.width}")
    if e1.length != e2.length:
        raise ShapeError(f"text lengths differ: {e1.length} vs {e2.length}; fit both first")
    rows = np.concatenate([e1.vectors[:e1.valid_length], e2.vectors[:e2.valid_length]])
    return fit_length(TextEmbedding(rows, rows.shape[0]), e1.length)


def conditioning(mode, prompt: Optional[str], template: str, provider) -> Optional[TextEmbedding]:
    """Pick the text for one sample; ``None`` means the decoder runs text-free."""
    mode = ConditioningMode(mode)
    if mode is ConditioningMode.NONE:
        return None
    if not template or not template.strip():
        if mode is ConditioningMode.STATIC or not prompt:
            raise ConfigError("text.template must be non-empty for this conditioning mode")
    if mode is ConditioningMode.STATIC:
        return embed(provider, template)
    text = prompt if prompt and prompt.strip() else template
    return embed(provider, text)


def pair_embedding(mode, prompt_t1, prompt_t2, template, provider, max_len):
    """Conditioned, length-fitted and temporally aggregated text for one image pair.

    A single prompt is used for both phases when ``prompt_t2`` is None.
    """
    e1 = conditioning(mode, prompt_t1, template, provider)
    if e1 is None:
        return None
    e2 = e1 if prompt_t2 is None else conditioning(mode, prompt_t2, template, provider)
    return aggregate_temporal(fit_length(e1, max_len), fit_length(e2, max_len))


class EmbeddingCache:
    """Memoizes pair embeddings by prompt; providers are deterministic so this is safe."""

    def __init__(self, mode, template, provider, max_len):
        self.mode = ConditioningMode(mode)
        self.template = template
        self.provider = provider
        self.max_len = max_len
        self._cache = {}

    def __call__(self, prompt, prompt_t2=None):
        key = (prompt, prompt_t2)
        if key not in self._cache:
            self._cache[key] = pair_embedding(
                self.mode, prompt, prompt_t2, self.template, self.provider, self.max_len
            )
        return self._cache[key]
