"""Zero-shot segmentation for the general, box, point and text prompt modes."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .backends.base import Backend, DetectionCandidate, MultiScaleMasks
from .errors import PreconditionError
from .geodata import GeoRaster, InstanceMask, LabelRaster, PromptSet, mosaic

logger = logging.getLogger(__name__)

SCALE_POLICIES = ("highest_confidence", "middle")
FILL_MODES = ("mean", "zero")


@dataclass(frozen=True)
class LoopConfig:
    box_threshold: float = 0.35
    text_threshold: float = 0.25
    max_iterations: int = 100
    fill_mode: str = "mean"

    def __post_init__(self):
        for name in ("box_threshold", "text_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.fill_mode not in FILL_MODES:
            raise ValueError(f"fill_mode must be one of {FILL_MODES}")


@dataclass
class RunLog:
    """Structured run events, written as JSON lines."""

    events: list[dict] = field(default_factory=list)

    def record(self, iteration: int, event: str, detail: str = "") -> None:
        self.events.append({"iteration": iteration, "event": event, "detail": detail})

    def warn(self, iteration: int, event: str, detail: str = "") -> None:
        logger.warning("iteration %d: %s %s", iteration, event, detail)
        self.record(iteration, event, detail)

    def of(self, event: str) -> list[dict]:
        return [e for e in self.events if e["event"] == event]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


def choose_scale(masks: MultiScaleMasks, policy: str = "highest_confidence") -> int:
    if policy == "middle":
        return 1
    if policy == "highest_confidence":
        # argmax keeps the first maximum, i.e. the coarser scale on ties
        return int(np.argmax(masks.confidences))
    raise ValueError(f"unknown scale policy {policy!r}")


def _pick(masks: MultiScaleMasks, policy: str) -> tuple[np.ndarray, float]:
    k = choose_scale(masks, policy)
    return masks.binary(k), float(masks.confidences[k])


def run_general(image: GeoRaster, backend: Backend) -> LabelRaster:
    """Segment everything; ids follow descending pixel area (largest gets 1)."""
    proposals = backend.segment_everything(image)
    order = sorted(range(len(proposals)), key=lambda i: -proposals[i].area)
    instances = [replace(proposals[i], instance_id=rank + 1, provenance="general")
                 for rank, i in enumerate(order)]
    return mosaic(instances, image.transform, image.crs, shape=image.shape)


def _run_prompts(image, prompts, segment, provenance, select, log):
    # canonical order makes ids independent of how the caller listed prompts
    order = sorted(range(len(prompts)), key=lambda i: prompts[i])
    instances = []
    for rank, i in enumerate(order):
        mask, conf = _pick(segment(prompts[i]), select)
        if not mask.any():
            log.warn(rank + 1, "empty_mask", f"{provenance} prompt {prompts[i]} produced no pixels; dropped")
            continue
        instances.append(InstanceMask(mask, len(instances) + 1, score=conf,
                                      provenance=provenance, iteration=rank + 1))
    return instances, mosaic(instances, image.transform, image.crs, shape=image.shape)


def run_boxes(image: GeoRaster, prompts: PromptSet, backend: Backend,
              select: str = "highest_confidence", log: Optional[RunLog] = None):
    """One instance per box prompt, mosaicked.

    Masks are not clipped to their box, since boxes often undershoot the object.

    Returns:
        ``(instances, label_raster)``
    """
    if not prompts.boxes:
        raise PreconditionError("box mode needs at least one box")
    prompts.check_bounds(image.width, image.height)
    log = log if log is not None else RunLog()
    return _run_prompts(image, list(prompts.boxes), lambda b: backend.segment_box(image, b),
                        "box", select, log)


def run_points(image: GeoRaster, prompts: PromptSet, backend: Backend,
               select: str = "highest_confidence", log: Optional[RunLog] = None):
    """One instance per point prompt; grouped points form a single prompt."""
    if not prompts.points:
        raise PreconditionError("point mode needs at least one point")
    prompts.check_bounds(image.width, image.height)
    log = log if log is not None else RunLog()
    groups = [tuple(sorted(g)) for g in prompts.point_prompts()]
    return _run_prompts(image, groups, lambda pts: backend.segment_points(image, list(pts)),
                        "point", select, log)


def filter_candidates(cands, cfg: LoopConfig) -> list[DetectionCandidate]:
    return [c for c in cands if c.logit >= cfg.box_threshold and c.phrase_score >= cfg.text_threshold]


def best_candidate(cands) -> DetectionCandidate:
    """Highest logit; ties go to the larger box, then the smaller coordinates."""
    return min(cands, key=lambda c: (-c.logit, -c.area, tuple(c.box)))


def erase(image: GeoRaster, mask: np.ndarray, fill_mode: str = "mean",
          fill: Optional[np.ndarray] = None) -> GeoRaster:
    """Copy of ``image`` with ``mask`` pixels replaced by the band mean (or zero)."""
    data = image.data.copy()
    if fill is None:
        fill = band_fill(image, fill_mode)
    data[:, mask] = fill[:, None]
    return image.with_data(data)


def band_fill(image: GeoRaster, fill_mode: str = "mean") -> np.ndarray:
    if fill_mode == "zero":
        return np.zeros(image.bands, dtype=np.uint8)
    means = image.data.reshape(image.bands, -1).mean(axis=1)
    return np.round(means).astype(np.uint8)


def run_text_loop(image: GeoRaster, phrase: str, cfg: LoopConfig, backend: Backend,
                  select: str = "highest_confidence", log: Optional[RunLog] = None):
    """Iteratively extract the most confident detection and erase it.

    Each round re-runs detection on the erased image, keeps candidates passing
    both thresholds, segments the top one and blanks its pixels. The loop ends
    when nothing passes, after ``cfg.max_iterations`` rounds, or when a mask
    adds no pixel that an earlier round has not already claimed.

    Returns:
        ``(instances, label_raster)`` with instances in extraction order.
    """
    if not phrase or not phrase.strip():
        raise PreconditionError("phrase must be non-empty")
    log = log if log is not None else RunLog()
    work = image
    fill = band_fill(image, cfg.fill_mode)
    claimed = np.zeros(image.shape, dtype=bool)
    instances: list[InstanceMask] = []
    i = 1
    while True:
        if i > cfg.max_iterations:
            log.record(i, "max_iterations", f"stopped after {cfg.max_iterations} iterations")
            break
        cands = filter_candidates(backend.detect(work, phrase), cfg)
        if not cands:
            log.record(i, "no_candidates", "no detection passes both thresholds")
            break
        top = best_candidate(cands)
        mask, _ = _pick(backend.segment_box(work, top.box), select)
        if not (mask & ~claimed).any():
            log.warn(i, "termination_guard", f"mask for box {top.box} adds no unclaimed pixel")
            break
        instances.append(InstanceMask(mask, i, score=top.logit, provenance="text", iteration=i))
        claimed |= mask
        work = erase(work, mask, fill=fill)
        i += 1
    return instances, mosaic(instances, image.transform, image.crs, shape=image.shape)


def save_instances(instances, image: GeoRaster, directory) -> list[Path]:
    from .geodata import save_mask

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for inst in instances:
        p = directory / f"{inst.instance_id:03d}.tif"
        save_mask(inst.mask, image.transform, image.crs, p)
        paths.append(p)
    return paths
