"""Deterministic backend realised from a declarative scene.

The scene lists rectangles and discs with a class name and a detectability.
Every interface call is answered from that geometry, which makes the mock an
exact oracle for the prompting and one-shot engines:

* ``detect`` returns one candidate per object whose class tokens meet the
  phrase tokens. ``logit = detectability * (1 - erased_fraction)``, where a
  pixel counts as erased when the queried image differs from the rendered
  scene there. ``phrase_score`` is the Jaccard overlap of the token sets.
  Fully erased objects are not returned.
* ``segment_box`` / ``segment_points`` pick the object with the largest box
  overlap / containing the most points (later objects win ties, as they are
  drawn on top) and return ``[erode(object & box), object, dilate(object)]``
  with 1-pixel cross-shaped morphology. Confidences are each scale's IoU with
  the object. No match yields three all-negative grids with zero confidence.
* ``embed`` returns per-pixel one-hot class vectors (index 0 = background).
"""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from ..errors import ShapeError
from ..geodata import GeoRaster, GeoTransform, InstanceMask, LabelRaster
from .base import Backend, DetectionCandidate, FeatureMap, MultiScaleMasks

MASK_LOGIT = 5.0
BACKGROUND_RGB = (32, 32, 32)


def tokens(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9]+", text.lower()))


def class_color(name: str) -> tuple[int, int, int]:
    h = zlib.crc32(name.encode("utf-8"))
    return tuple(96 + ((h >> s) & 0xFF) % 160 for s in (0, 8, 16))


@dataclass(frozen=True)
class SceneObject:
    shape: str
    params: tuple
    class_name: str
    detectability: float = 1.0

    def __post_init__(self):
        if self.shape not in ("rect", "disc"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if not 0.0 <= self.detectability <= 1.0:
            raise ValueError("detectability must lie in [0, 1]")

    def mask(self, width: int, height: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        if self.shape == "rect":
            x, y, w, h = self.params
            out[y:y + h, x:x + w] = True
        else:
            cx, cy, r = self.params
            yy, xx = np.mgrid[0:height, 0:width]
            out[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = True
        return out

    def to_json(self) -> dict:
        keys = ("x", "y", "w", "h") if self.shape == "rect" else ("cx", "cy", "r")
        d = {"shape": self.shape, **dict(zip(keys, self.params))}
        d.update(class_name=self.class_name, detectability=self.detectability)
        return d


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    objects: tuple[SceneObject, ...] = ()
    transform: GeoTransform = field(default_factory=GeoTransform.identity)
    crs: str = ""

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("scene must be at least 1x1")
        for i, obj in enumerate(self.objects):
            if obj.shape == "rect":
                x, y, w, h = obj.params
                ok = w > 0 and h > 0 and x >= 0 and y >= 0 and x + w <= self.width and y + h <= self.height
            else:
                cx, cy, r = obj.params
                ok = r >= 0 and cx - r >= 0 and cy - r >= 0 and cx + r < self.width and cy + r < self.height
            if not ok:
                raise ValueError(f"objects[{i}] lies outside the {self.width}x{self.height} scene")

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        objs = []
        for o in doc.get("objects", []):
            if o["shape"] == "rect":
                params = (int(o["x"]), int(o["y"]), int(o["w"]), int(o["h"]))
            else:
                params = (int(o["cx"]), int(o["cy"]), int(o["r"]))
            objs.append(SceneObject(o["shape"], params, o["class_name"], float(o.get("detectability", 1.0))))
        gt = doc.get("geotransform")
        transform = GeoTransform(**gt) if gt else GeoTransform.identity()
        return cls(int(doc["width"]), int(doc["height"]), tuple(objs), transform, doc.get("crs", ""))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        doc = {"width": self.width, "height": self.height, "objects": [o.to_json() for o in self.objects]}
        if not self.transform.is_identity:
            t = self.transform
            doc["geotransform"] = dict(origin_x=t.origin_x, origin_y=t.origin_y, pixel_w=t.pixel_w,
                                       pixel_h=t.pixel_h, row_rot=t.row_rot, col_rot=t.col_rot)
        if self.crs:
            doc["crs"] = self.crs
        return doc

    def masks(self) -> list[np.ndarray]:
        return [o.mask(self.width, self.height) for o in self.objects]

    def render(self) -> GeoRaster:
        img = np.empty((3, self.height, self.width), dtype=np.uint8)
        img[:] = np.array(BACKGROUND_RGB, dtype=np.uint8)[:, None, None]
        for obj, m in zip(self.objects, self.masks()):
            img[:, m] = np.array(class_color(obj.class_name), dtype=np.uint8)[:, None]
        return GeoRaster(img, self.transform, self.crs)

    def instance_labels(self, class_name: Optional[str] = None) -> LabelRaster:
        """Ground-truth instance raster (object i -> id i + 1, later objects on top)."""
        out = np.zeros((self.height, self.width), dtype=np.int64)
        for i, (obj, m) in enumerate(zip(self.objects, self.masks())):
            if class_name is None or obj.class_name == class_name:
                out[m] = i + 1
        return LabelRaster(out, self.transform, self.crs)


_CROSS = ndimage.generate_binary_structure(2, 1)


def _scales(obj_mask: np.ndarray, inner: np.ndarray) -> MultiScaleMasks:
    fine = ndimage.binary_erosion(inner, structure=_CROSS)
    coarse = ndimage.binary_dilation(obj_mask, structure=_CROSS)
    stack = np.stack([fine, obj_mask, coarse])
    logits = np.where(stack, MASK_LOGIT, -MASK_LOGIT)
    conf = []
    for s in stack:
        union = np.logical_or(s, obj_mask).sum()
        conf.append(np.logical_and(s, obj_mask).sum() / union if union else 0.0)
    return MultiScaleMasks(logits, np.array(conf))


def _empty(shape) -> MultiScaleMasks:
    return MultiScaleMasks(np.full((3,) + tuple(shape), -MASK_LOGIT), np.zeros(3))


class MockBackend(Backend):
    supports_negative_points = False

    def __init__(self, scene: SceneSpec):
        self.scene = scene
        self._masks = scene.masks()
        self._rendered = scene.render().data
        self._classes = sorted({o.class_name for o in scene.objects})

    @classmethod
    def from_file(cls, path) -> "MockBackend":
        return cls(SceneSpec.load(path))

    def render(self) -> GeoRaster:
        return self.scene.render()

    def _check(self, image: GeoRaster):
        if image.shape != (self.scene.height, self.scene.width):
            raise ShapeError(f"image {image.shape} does not match scene {(self.scene.height, self.scene.width)}")

    def erased_fraction(self, image: GeoRaster, index: int) -> float:
        self._check(image)
        m = self._masks[index]
        changed = np.any(image.data != self._rendered, axis=0)
        return float(changed[m].sum()) / float(m.sum())

    def detect(self, image: GeoRaster, phrase: str) -> list[DetectionCandidate]:
        if not phrase or not phrase.strip():
            raise ValueError("phrase must be non-empty")
        self._check(image)
        want = tokens(phrase)
        changed = np.any(image.data != self._rendered, axis=0)
        out = []
        for obj, m in zip(self.scene.objects, self._masks):
            have = tokens(obj.class_name)
            common = want & have
            if not common:
                continue
            area = m.sum()
            if area == 0:
                continue
            erased = changed[m].sum() / area
            if erased >= 1.0:
                continue
            ys, xs = np.nonzero(m)
            box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
            out.append(
                DetectionCandidate(
                    box=box,
                    logit=float(obj.detectability * (1.0 - erased)),
                    phrase_score=len(common) / len(want | have),
                    phrase=obj.class_name,
                )
            )
        return out

    def segment_box(self, image: GeoRaster, box) -> MultiScaleMasks:
        self._check(image)
        x1, y1, x2, y2 = box
        region = np.zeros((self.scene.height, self.scene.width), dtype=bool)
        region[int(np.floor(y1)):int(np.ceil(y2)), int(np.floor(x1)):int(np.ceil(x2))] = True
        best, best_overlap = None, 0
        for i, m in enumerate(self._masks):
            overlap = int(np.logical_and(m, region).sum())
            if overlap > 0 and overlap >= best_overlap:
                best, best_overlap = i, overlap
        if best is None:
            return _empty(region.shape)
        m = self._masks[best]
        return _scales(m, m & region)

    def segment_points(self, image, points, labels=None) -> MultiScaleMasks:
        self._check(image)
        pts = [tuple(p) for p in points]
        if labels is not None:
            pts = [p for p, lab in zip(pts, labels) if lab]
        best, best_hits = None, 0
        for i, m in enumerate(self._masks):
            hits = sum(1 for x, y in pts if m[int(y), int(x)])
            if hits > 0 and hits >= best_hits:
                best, best_hits = i, hits
        shape = (self.scene.height, self.scene.width)
        if best is None:
            return _empty(shape)
        m = self._masks[best]
        return _scales(m, m)

    def segment_everything(self, image: GeoRaster) -> list[InstanceMask]:
        self._check(image)
        return [
            InstanceMask(m, i + 1, score=obj.detectability, provenance="general")
            for i, (obj, m) in enumerate(zip(self.scene.objects, self._masks))
            if m.any()
        ]

    def embed(self, image: GeoRaster) -> FeatureMap:
        self._check(image)
        h, w = self.scene.height, self.scene.width
        index = np.zeros((h, w), dtype=np.int64)
        for obj, m in zip(self.scene.objects, self._masks):
            index[m] = self._classes.index(obj.class_name) + 1
        vectors = np.eye(len(self._classes) + 1)[index]
        return FeatureMap(vectors, stride=1)

    def class_index(self, class_name: str) -> int:
        """Position of ``class_name`` in the embedding (0 is background)."""
        return self._classes.index(class_name) + 1
