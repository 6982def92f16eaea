"""Inference backends.

``load_backend`` understands the ``mock:<scene.json>`` and
``real:<config.json>`` spec strings used on the command line.
"""
from __future__ import annotations

from ..errors import BackendError
from .base import Backend, DetectionCandidate, FeatureMap, MultiScaleMasks
from .mock import MockBackend, SceneObject, SceneSpec

__all__ = [
    "Backend",
    "DetectionCandidate",
    "FeatureMap",
    "MultiScaleMasks",
    "MockBackend",
    "SceneObject",
    "SceneSpec",
    "load_backend",
]


def load_backend(spec: str) -> Backend:
    kind, _, target = spec.partition(":")
    if not target:
        raise BackendError(f"backend spec must look like 'mock:<scene.json>' or 'real:<config.json>', got {spec!r}")
    if kind == "mock":
        try:
            return MockBackend.from_file(target)
        except (OSError, KeyError, ValueError) as exc:
            raise BackendError(f"cannot load mock scene {target}: {exc}") from exc
    if kind == "real":
        from .real import SamGroundingBackend

        return SamGroundingBackend.from_config(target)
    raise BackendError(f"unknown backend kind {kind!r}")
