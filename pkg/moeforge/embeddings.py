"""Token embedding tables and the token-id <-> text vocabulary."""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path

import numpy as np

from moeforge.errors import ConfigurationError
from moeforge.models import EmbeddingVector
from moeforge.rng import hash_to_u64

logger = logging.getLogger(__name__)

DEFAULT_EMBEDDING_DIM = 64

_ID_LANE = 0
_TEXT_LANE = 1


class EmbeddingTable:
    """Unit-normalized embedding rows indexed by token id.

    An open-ended table also answers for ids past its last row and for raw token
    text, deriving each vector from a seed and the id (or the text's hash).
    """

    def __init__(self, rows: np.ndarray, *, unseen_seed: int | None = None) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] == 0 or (rows.shape[0] == 0 and unseen_seed is None):
            raise ConfigurationError(
                f"embedding table must be a non-empty 2-D array, got {rows.shape}"
            )
        if not np.all(np.isfinite(rows)):
            raise ConfigurationError("embedding table contains non-finite values")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(norms == 0.0):
            bad = int(np.flatnonzero(norms == 0.0)[0])
            raise ConfigurationError(f"embedding row {bad} has zero norm")
        self._rows = rows / norms[:, None]
        self._unseen_seed = unseen_seed
        self._cache: dict[int, EmbeddingVector] = {}
        self._text_cache: dict[str, EmbeddingVector] = {}

    @classmethod
    def seeded(
        cls,
        vocab_size: int,
        dim: int = DEFAULT_EMBEDDING_DIM,
        seed: int = 0,
        *,
        open_ended: bool = False,
    ) -> EmbeddingTable:
        rng = np.random.default_rng(seed)
        rows = rng.standard_normal((vocab_size, dim))
        return cls(rows, unseen_seed=seed if open_ended else None)

    @classmethod
    def load(cls, path: Path) -> EmbeddingTable:
        """Load a ``.npy`` matrix of shape (vocab_size, dim)."""
        try:
            rows = np.load(Path(path), allow_pickle=False)
        except (OSError, ValueError) as e:
            raise ConfigurationError(f"Cannot load embedding table {path}: {e}") from e
        logger.info("Loaded embedding table %s with shape %s", path, rows.shape)
        return cls(rows)

    def __len__(self) -> int:
        return int(self._rows.shape[0])

    @property
    def open_ended(self) -> bool:
        return self._unseen_seed is not None

    def vector(self, token: int) -> EmbeddingVector:
        cached = self._cache.get(token)
        if cached is not None:
            return cached
        if 0 <= token < len(self):
            cached = tuple(float(x) for x in self._rows[token])
        elif token >= 0 and self._unseen_seed is not None:
            cached = self._derived(_ID_LANE, token)
        else:
            raise IndexError(f"token {token} outside embedding table of size {len(self)}")
        self._cache[token] = cached
        return cached

    def text_vector(self, text: str) -> EmbeddingVector:
        """Vector for token text that has no row of its own."""
        if self._unseen_seed is None:
            raise IndexError(f"no embedding row for token text {text!r}")
        cached = self._text_cache.get(text)
        if cached is None:
            cached = self._derived(_TEXT_LANE, hash_to_u64(text))
            self._text_cache[text] = cached
        return cached

    def _derived(self, lane: int, key: int) -> EmbeddingVector:
        assert self._unseen_seed is not None
        rng = np.random.default_rng([self._unseen_seed, lane, key])
        row = rng.standard_normal(self._rows.shape[1])
        return tuple(float(x) for x in row / np.linalg.norm(row))


class Vocabulary:
    """Maps token ids to text. Unknown strings can be interned on the fly."""

    def __init__(self, texts: list[str] | None = None) -> None:
        self._texts: list[str] = list(texts or [])
        self._ids: dict[str, int] = {t: i for i, t in enumerate(self._texts)}
        self._lock = threading.Lock()

    @classmethod
    def synthetic(cls, size: int) -> Vocabulary:
        return cls([f"tok{i}" for i in range(size)])

    @classmethod
    def load(cls, path: Path) -> Vocabulary:
        """Load a JSON array of token strings, index = token id."""
        try:
            texts = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot load vocabulary {path}: {e}") from e
        if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
            raise ConfigurationError(f"Vocabulary {path} must be a JSON array of strings")
        return cls(texts)

    def __len__(self) -> int:
        return len(self._texts)

    def decode(self, token: int) -> str:
        if 0 <= token < len(self._texts):
            return self._texts[token]
        return f"<{token}>"

    def encode(self, text: str) -> int | None:
        return self._ids.get(text)

    def intern(self, text: str) -> int:
        with self._lock:
            token = self._ids.get(text)
            if token is None:
                token = len(self._texts)
                self._texts.append(text)
                self._ids[text] = token
            return token
