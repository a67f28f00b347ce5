"""Backend registry with decorator-based registration."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

from moeforge.errors import ConfigurationError
from moeforge.models import BackendConfig, BackendKind

if TYPE_CHECKING:
    from moeforge.backends.base import BaseBackend
    from moeforge.embeddings import EmbeddingTable, Vocabulary


class UnsupportedBackendError(ConfigurationError):
    pass


_registry: dict[BackendKind, type[Any]] = {}


def register(kind: BackendKind):
    """Decorator to register a backend class for a backend kind."""

    def decorator(cls: type) -> type:
        _registry[kind] = cls
        return cls

    return decorator


def get_backend(
    config: BackendConfig,
    table: EmbeddingTable,
    vocabulary: Vocabulary,
    **options: Any,
) -> BaseBackend:
    """Build a backend instance for ``config.kind``."""
    if config.kind not in _registry:
        raise UnsupportedBackendError(f"No backend registered for kind: {config.kind.value}")
    return _registry[config.kind](config, table, vocabulary, **options)
