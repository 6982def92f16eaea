"""Backend interface for grounded detection and promptable segmentation."""
from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import ShapeError
from ..geodata import GeoRaster, InstanceMask


@dataclass(frozen=True)
class DetectionCandidate:
    """A detected box with its detection and phrase-association scores.

    Both scores live in ``[0, 1]``; adapters map raw model outputs onto that range.
    """

    box: tuple[float, float, float, float]
    logit: float
    phrase_score: float
    phrase: str = ""

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not (0.0 <= self.logit <= 1.0 and 0.0 <= self.phrase_score <= 1.0):
            raise ValueError("logit and phrase_score must lie in [0, 1]")

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass(frozen=True, eq=False)
class MultiScaleMasks:
    """Three mask-logit grids (coarse, middle, fine order as the backend emits
    them) plus one confidence per grid. Logits above 0 are foreground."""

    logits: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        conf = np.asarray(self.confidences, dtype=np.float64)
        if logits.ndim != 3 or logits.shape[0] != 3:
            raise ShapeError(f"expected 3 mask scales, got shape {logits.shape}")
        if conf.shape != (3,):
            raise ShapeError("expected 3 confidences")
        logits.flags.writeable = False
        conf.flags.writeable = False
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "confidences", conf)

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape[1:]

    def binary(self, k: int) -> np.ndarray:
        return self.logits[k] > 0


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Unit-norm embeddings of shape ``(rows, cols, dim)`` sampled every ``stride`` pixels."""

    vectors: np.ndarray
    stride: int = 1

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3:
            raise ShapeError("feature map must be (rows, cols, dim)")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        norms = np.linalg.norm(v, axis=-1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("feature vectors must have unit L2 norm")
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[-1]

    def cell_to_pixel(self, row: int, col: int) -> tuple[int, int]:
        """Pixel ``(x, y)`` at the centre of a feature cell."""
        s = self.stride
        return col * s + s // 2, row * s + s // 2

    def sample(self, mask: np.ndarray) -> np.ndarray:
        """Boolean cell grid: a cell is on when the mask is on at its centre pixel."""
        s = self.stride
        rows, cols = self.vectors.shape[:2]
        ys = np.minimum(np.arange(rows) * s + s // 2, mask.shape[0] - 1)
        xs = np.minimum(np.arange(cols) * s + s // 2, mask.shape[1] - 1)
        return np.asarray(mask, dtype=bool)[np.ix_(ys, xs)]


class Backend(abc.ABC):
    """Inference surface consumed by the prompting and one-shot engines.

    An instance is used by one thread at a time. Outputs must be deterministic
    for a fixed backend state.
    """

    #: whether ``segment_points`` honours background (label 0) points
    supports_negative_points: bool = False

    @abc.abstractmethod
    def detect(self, image: GeoRaster, phrase: str) -> list[DetectionCandidate]:
        ...

    @abc.abstractmethod
    def segment_box(self, image: GeoRaster, box) -> MultiScaleMasks:
        ...

    @abc.abstractmethod
    def segment_points(
        self, image: GeoRaster, points: Sequence, labels: Optional[Sequence[int]] = None
    ) -> MultiScaleMasks:
        """Segment from one or more points; ``labels`` marks 1 = object, 0 = background."""

    @abc.abstractmethod
    def segment_everything(self, image: GeoRaster) -> list[InstanceMask]:
        """Unprompted proposals; their ids are provisional and reassigned by callers."""

    @abc.abstractmethod
    def embed(self, image: GeoRaster) -> FeatureMap:
        ...
