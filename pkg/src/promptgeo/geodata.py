"""Georeferenced rasters, prompt sets, mask mosaicking and vectorization.

Pixel coordinates are always ``(column, row)`` with the origin at the top-left
corner and rows increasing downward. Masks are plain boolean numpy arrays of
shape ``(height, width)``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import rasterio
import rasterio.features
from affine import Affine
from rasterio.crs import CRS
from rasterio.errors import NotGeoreferencedWarning, RasterioIOError
from shapely.geometry import mapping, shape

from .errors import (
    EmptyPromptError,
    PreconditionError,
    SchemaError,
    ShapeError,
    UnsupportedFormatError,
)

PROVENANCES = ("general", "box", "point", "text", "oneshot")

# GeoTIFF tag carrying the caller's CRS text so it reloads byte-identically.
_CRS_TAG = "PROMPTGEO_CRS"


@dataclass(frozen=True)
class GeoTransform:
    """Affine map from pixel ``(col, row)`` to map ``(x, y)``.

    ``x = origin_x + col * pixel_w + row * row_rot``
    ``y = origin_y + col * col_rot + row * pixel_h``
    """

    origin_x: float
    origin_y: float
    pixel_w: float
    pixel_h: float
    row_rot: float = 0.0
    col_rot: float = 0.0

    def __post_init__(self):
        if self.pixel_w == 0 or self.pixel_h == 0:
            raise ValueError("pixel_w and pixel_h must be non-zero")
        if self._det() == 0:
            raise ValueError("geotransform is singular")

    @classmethod
    def identity(cls) -> "GeoTransform":
        return cls(0.0, 0.0, 1.0, 1.0)

    @classmethod
    def from_affine(cls, a: Affine) -> "GeoTransform":
        return cls(
            origin_x=a.c, origin_y=a.f, pixel_w=a.a, pixel_h=a.e, row_rot=a.b, col_rot=a.d
        )

    def to_affine(self) -> Affine:
        return Affine(
            self.pixel_w, self.row_rot, self.origin_x, self.col_rot, self.pixel_h, self.origin_y
        )

    @property
    def is_identity(self) -> bool:
        return self == GeoTransform.identity()

    @property
    def pixel_area(self) -> float:
        return abs(self._det())

    def _det(self) -> float:
        return self.pixel_w * self.pixel_h - self.row_rot * self.col_rot

    def to_map(self, col, row):
        x = self.origin_x + col * self.pixel_w + row * self.row_rot
        y = self.origin_y + col * self.col_rot + row * self.pixel_h
        return x, y

    def to_pixel(self, x, y):
        det = self._det()
        dx = x - self.origin_x
        dy = y - self.origin_y
        col = (self.pixel_h * dx - self.row_rot * dy) / det
        row = (self.pixel_w * dy - self.col_rot * dx) / det
        return col, row

    def almost_equal(self, other: "GeoTransform", tol: float = 1e-9) -> bool:
        a = (self.origin_x, self.origin_y, self.pixel_w, self.pixel_h, self.row_rot, self.col_rot)
        b = (other.origin_x, other.origin_y, other.pixel_w, other.pixel_h, other.row_rot, other.col_rot)
        return all(abs(p - q) <= tol for p, q in zip(a, b))


@dataclass(frozen=True, eq=False)
class GeoRaster:
    """Multi-band 8-bit image with its georeference.

    ``data`` has shape ``(bands, height, width)``.
    """

    data: np.ndarray
    transform: GeoTransform = field(default_factory=GeoTransform.identity)
    crs: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[np.newaxis]
        if data.ndim != 3:
            raise ShapeError(f"raster data must be (bands, height, width), got {data.shape}")
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise ShapeError("raster must be at least 1x1")
        if data.dtype != np.uint8:
            raise UnsupportedFormatError(f"expected 8-bit samples, got {data.dtype}")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def with_data(self, data: np.ndarray) -> "GeoRaster":
        return GeoRaster(data, self.transform, self.crs)


@dataclass(frozen=True, eq=False)
class LabelRaster:
    """Integer raster: 0 is background, k > 0 an instance or class id."""

    data: np.ndarray
    transform: GeoTransform = field(default_factory=GeoTransform.identity)
    crs: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeError(f"label raster must be 2-D, got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError("label raster must be at least 1x1")
        if not np.issubdtype(data.dtype, np.integer) and data.dtype != bool:
            raise ShapeError(f"label raster must be integer, got {data.dtype}")
        if data.size and data.min() < 0:
            raise ShapeError("label values must be non-negative")
        data = data.astype(_label_dtype(int(data.max()) if data.size else 0))
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.data) if v != 0]


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """One segmented object and where it came from."""

    mask: np.ndarray
    instance_id: int
    score: float = 1.0
    provenance: str = "box"
    iteration: int = 0

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise ShapeError("instance mask must be 2-D")
        if not mask.any():
            raise PreconditionError("instance mask has no positive pixel")
        if self.instance_id < 1:
            raise ValueError("instance_id must be positive")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


Box = tuple[float, float, float, float]
Point = tuple[int, int]


@dataclass(frozen=True)
class PromptSet:
    """Typed prompts in pixel coordinates.

    ``groups`` runs parallel to ``points``; points that share a non-None group
    id form one multi-point prompt.
    """

    boxes: tuple[Box, ...] = ()
    points: tuple[Point, ...] = ()
    groups: tuple[Optional[int], ...] = ()
    text: Optional[str] = None
    class_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(tuple(float(v) for v in b) for b in self.boxes))
        object.__setattr__(self, "points", tuple((int(x), int(y)) for x, y in self.points))
        groups = tuple(self.groups) if self.groups else (None,) * len(self.points)
        if len(groups) != len(self.points):
            raise ValueError("groups must run parallel to points")
        object.__setattr__(self, "groups", groups)
        if not self.boxes and not self.points and not self.text:
            raise EmptyPromptError("prompt set has no boxes, points or text")
        for x1, y1, x2, y2 in self.boxes:
            if not (x1 < x2 and y1 < y2):
                raise ValueError(f"degenerate box {(x1, y1, x2, y2)}")

    def check_bounds(self, width: int, height: int) -> None:
        for x1, y1, x2, y2 in self.boxes:
            if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
                raise PreconditionError(f"box {(x1, y1, x2, y2)} outside {width}x{height} raster")
        for x, y in self.points:
            if not (0 <= x < width and 0 <= y < height):
                raise PreconditionError(f"point {(x, y)} outside {width}x{height} raster")

    def point_prompts(self) -> list[list[Point]]:
        """Points regrouped into prompts: one per group id, one per ungrouped point."""
        grouped: dict[int, list[Point]] = {}
        prompts: list[list[Point]] = []
        for pt, g in zip(self.points, self.groups):
            if g is None:
                prompts.append([pt])
            else:
                grouped.setdefault(g, []).append(pt)
        prompts.extend(grouped[g] for g in sorted(grouped))
        return prompts


def _label_dtype(max_value: int):
    if max_value <= np.iinfo(np.uint8).max:
        return np.uint8
    if max_value <= np.iinfo(np.uint16).max:
        return np.uint16
    return np.uint32


def _read(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such raster: {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotGeoreferencedWarning)
            with rasterio.open(path) as src:
                data = src.read()
                tags = src.tags()
                crs = tags.get(_CRS_TAG)
                if crs is None:
                    crs = src.crs.to_string() if src.crs else ""
                transform = GeoTransform.from_affine(src.transform)
    except RasterioIOError as exc:
        raise OSError(f"cannot read raster {path}: {exc}") from exc
    return data, transform, crs


def load_raster(path) -> GeoRaster:
    """Read a GeoTIFF or plain image as an 8-bit :class:`GeoRaster`.

    Plain images come back with the identity transform and an empty CRS.
    """
    data, transform, crs = _read(path)
    if data.shape[0] > 4:
        raise UnsupportedFormatError(f"{path}: {data.shape[0]} bands, at most 4 supported")
    return GeoRaster(data, transform, crs)


def load_labels(path) -> LabelRaster:
    data, transform, crs = _read(path)
    if data.shape[0] != 1:
        raise UnsupportedFormatError(f"{path}: label raster must have one band")
    return LabelRaster(data[0], transform, crs)


def _write(path, data: np.ndarray, transform: GeoTransform, crs: str) -> None:
    path = Path(path)
    if data.shape[-2] < 1 or data.shape[-1] < 1:
        raise ShapeError("cannot write an empty raster")
    profile = dict(
        driver="GTiff",
        height=data.shape[1],
        width=data.shape[2],
        count=data.shape[0],
        dtype=data.dtype,
        transform=transform.to_affine(),
        compress="deflate",
    )
    if crs:
        try:
            profile["crs"] = CRS.from_user_input(crs)
        except Exception:  # unparsable CRS text still round-trips via the tag
            pass
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotGeoreferencedWarning)
            with rasterio.open(path, "w", **profile) as dst:
                dst.write(data)
                if crs:
                    dst.update_tags(**{_CRS_TAG: crs})
    except RasterioIOError as exc:
        raise OSError(f"cannot write raster {path}: {exc}") from exc


def save_image(raster: GeoRaster, path) -> None:
    _write(path, raster.data, raster.transform, raster.crs)


def save_raster(labels: LabelRaster, path) -> None:
    """Write a label raster losslessly, widening past 8 bits when ids require it."""
    _write(path, labels.data[np.newaxis], labels.transform, labels.crs)


def save_mask(mask: np.ndarray, transform: GeoTransform, crs: str, path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError("mask must be 2-D")
    _write(path, mask.astype(np.uint8)[np.newaxis], transform, crs)


# -- vector prompts ---------------------------------------------------------

def _read_features(path) -> list[dict]:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".geojson", ".json"):
        doc = json.loads(path.read_text())
        if doc.get("type") == "FeatureCollection":
            return [f for f in doc.get("features", []) if f.get("geometry")]
        if doc.get("type") == "Feature":
            return [doc] if doc.get("geometry") else []
        return [{"type": "Feature", "geometry": doc, "properties": {}}]
    if suffix == ".shp":
        import shapefile

        with shapefile.Reader(str(path)) as reader:
            names = [f[0] for f in reader.fields[1:]]
            feats = []
            for sr in reader.iterShapeRecords():
                if sr.shape.shapeType == shapefile.NULL:
                    continue
                feats.append(
                    {
                        "type": "Feature",
                        "geometry": sr.shape.__geo_interface__,
                        "properties": dict(zip(names, sr.record)),
                    }
                )
            return feats
    raise UnsupportedFormatError(f"unsupported vector format: {path.suffix}")


def _polygon_parts(geom):
    if geom.geom_type == "Polygon":
        return [geom]
    if geom.geom_type == "MultiPolygon":
        return list(geom.geoms)
    return None


def _point_parts(geom):
    if geom.geom_type == "Point":
        return [geom]
    if geom.geom_type == "MultiPoint":
        return list(geom.geoms)
    return None


def prompts_from_vector(
    path,
    raster: GeoRaster,
    mode: str,
    class_name: str = "",
    class_field: Optional[str] = None,
    group_points: bool = False,
) -> PromptSet:
    """Build a :class:`PromptSet` from polygons (``mode="boxes"``) or points.

    Every polygon part becomes one pixel-space bounding box, clipped to the
    raster extent; parts falling entirely outside are dropped. In points mode
    a MultiPoint feature, or any set of features sharing a ``group`` property,
    becomes one multi-point prompt. With ``group_points`` every multi-point
    feature is grouped even without a ``group`` property.

    Args:
        path: GeoJSON or ESRI Shapefile in the raster's CRS.
        raster: Raster whose geotransform maps the geometries to pixels.
        mode: ``"boxes"`` or ``"points"``.
        class_name: Stored on the prompt set; also the filter value when
            ``class_field`` is given.
        class_field: Optional feature property used to keep only one class.
    """
    if mode not in ("boxes", "points"):
        raise ValueError(f"mode must be 'boxes' or 'points', got {mode!r}")
    features = _read_features(path)
    if class_field:
        features = [f for f in features if str((f.get("properties") or {}).get(class_field)) == class_name]
    if not features:
        raise EmptyPromptError(f"{path}: no features")

    t = raster.transform
    w, h = raster.width, raster.height
    boxes: list[Box] = []
    points: list[Point] = []
    groups: list[Optional[int]] = []
    for idx, feat in enumerate(features):
        geom = shape(feat["geometry"])
        if mode == "boxes":
            parts = _polygon_parts(geom)
            if parts is None:
                raise SchemaError(f"feature {idx}: expected polygon geometry, got {geom.geom_type}")
            for part in parts:
                minx, miny, maxx, maxy = part.bounds
                cols, rows = t.to_pixel(
                    np.array([minx, maxx, minx, maxx]), np.array([miny, miny, maxy, maxy])
                )
                x1, x2 = max(0.0, cols.min()), min(float(w), cols.max())
                y1, y2 = max(0.0, rows.min()), min(float(h), rows.max())
                if x1 < x2 and y1 < y2:
                    boxes.append((_snap(x1), _snap(y1), _snap(x2), _snap(y2)))
        else:
            parts = _point_parts(geom)
            if parts is None:
                raise SchemaError(f"feature {idx}: expected point geometry, got {geom.geom_type}")
            props = feat.get("properties") or {}
            group = props.get("group")
            if group is None and (len(parts) > 1 or group_points):
                group = f"__feature_{idx}"
            for part in parts:
                col, row = t.to_pixel(part.x, part.y)
                x = min(max(int(math.floor(_snap(col))), 0), w - 1)
                y = min(max(int(math.floor(_snap(row))), 0), h - 1)
                points.append((x, y))
                groups.append(group)

    if not boxes and not points:
        raise EmptyPromptError(f"{path}: every geometry lies outside the raster")
    # group keys can be any JSON scalar; renumber to small ints in first-seen order
    ids: dict = {}
    int_groups = [None if g is None else ids.setdefault(g, len(ids)) for g in groups]
    return PromptSet(boxes=tuple(boxes), points=tuple(points), groups=tuple(int_groups),
                     class_name=class_name)


def _snap(v: float, tol: float = 1e-6) -> float:
    # absorb float noise from the inverse affine (e.g. 249.99999999 -> 250)
    r = round(v)
    return float(r) if abs(v - r) < tol else float(v)


# -- mosaic / vectorize -----------------------------------------------------

def mosaic(
    instances: Sequence[InstanceMask],
    transform: GeoTransform = GeoTransform.identity(),
    crs: str = "",
    shape: Optional[tuple[int, int]] = None,
) -> LabelRaster:
    """Merge instance masks into one label raster.

    Each pixel takes the id of the highest-scoring instance covering it, ties
    going to the lower id. ``shape`` is only needed when ``instances`` is empty.
    """
    if not instances:
        if shape is None:
            raise ShapeError("shape is required to mosaic an empty instance list")
        return LabelRaster(np.zeros(shape, dtype=np.uint8), transform, crs)
    dims = {inst.mask.shape for inst in instances}
    if len(dims) != 1 or (shape is not None and dims != {tuple(shape)}):
        raise ShapeError(f"instance masks disagree on shape: {sorted(dims)}")
    out = np.zeros(instances[0].mask.shape, dtype=np.int64)
    # paint lowest priority first so the winner is written last
    for inst in sorted(instances, key=lambda m: (m.score, -m.instance_id)):
        out[inst.mask] = inst.instance_id
    return LabelRaster(out, transform, crs)


def vectorize(labels: LabelRaster) -> dict:
    """Polygonize every 4-connected component of every nonzero label.

    Returns a GeoJSON FeatureCollection whose features carry ``label`` and
    ``area`` (map units squared).
    """
    data = labels.data.astype(np.int32)
    features = []
    if data.any():
        for geom, value in rasterio.features.shapes(
            data, mask=data > 0, connectivity=4, transform=labels.transform.to_affine()
        ):
            features.append(
                {
                    "type": "Feature",
                    "geometry": geom,
                    "properties": {"label": int(value), "area": float(shape(geom).area)},
                }
            )
    out = {"type": "FeatureCollection", "features": features}
    if labels.crs:
        out["crs"] = {"type": "name", "properties": {"name": labels.crs}}
    return out


def rasterize(collection: dict, shape: tuple[int, int], transform: GeoTransform) -> np.ndarray:
    """Burn a vectorized collection back onto a grid using its ``label`` values."""
    items = [(f["geometry"], f["properties"]["label"]) for f in collection["features"]]
    if not items:
        return np.zeros(shape, dtype=np.int64)
    return rasterio.features.rasterize(
        items, out_shape=shape, transform=transform.to_affine(), fill=0, dtype="int32"
    ).astype(np.int64)


def write_geojson(collection: dict, path) -> None:
    Path(path).write_text(json.dumps(collection, sort_keys=True))


def instance_masks_from_labels(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(v): labels == v for v in np.unique(labels) if v != 0}


def polygons_to_geojson(geoms: Iterable, properties: Iterable[dict]) -> dict:
    return {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "geometry": mapping(g), "properties": p}
            for g, p in zip(geoms, properties)
        ],
    }
