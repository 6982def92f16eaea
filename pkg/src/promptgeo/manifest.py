"""Dataset manifests: one entry per dataset, validated before any inference."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ManifestError

PLATFORMS = ("UAV", "Airborne", "Satellite")
PROMPT_MODES = ("general", "box", "point", "text", "oneshot")


@dataclass(frozen=True)
class ClassSpec:
    id: int
    name: str


@dataclass(frozen=True)
class PromptSpec:
    mode: str
    phrase: Optional[str] = None
    vector_path: Optional[Path] = None
    boxes_path: Optional[Path] = None
    points_path: Optional[Path] = None
    group_points: bool = False

    def vector_for(self, mode: str) -> Optional[Path]:
        specific = self.boxes_path if mode == "box" else self.points_path
        return specific or self.vector_path


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    platform: str
    target: str
    resolution_m: float
    raster_path: Path
    gt_path: Optional[Path]
    prompt: PromptSpec
    box_threshold: float
    text_threshold: float
    classes: tuple[ClassSpec, ...] = ()
    index: int = 0

    def field(self, name: str) -> str:
        return f"entries[{self.index}].{name}"


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    digest: str
    source: Optional[Path] = None

    def entry(self, entry_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise ManifestError("--entry", f"no entry with id {entry_id!r}")


def canonical_hash(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def load_manifest(path) -> Manifest:
    """Read a YAML or JSON manifest; relative paths resolve against its folder."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError("--manifest", f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise ManifestError("--manifest", f"cannot parse {path}: {exc}") from exc
    return parse_manifest(doc, base=path.parent, source=path)


def _req(d: dict, key: str, where: str):
    if key not in d or d[key] is None:
        raise ManifestError(f"{where}.{key}", "required field missing")
    return d[key]


def _unit(value, where: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ManifestError(where, f"must be a number, got {value!r}") from None
    if not 0.0 <= v <= 1.0:
        raise ManifestError(where, f"must lie in [0, 1], got {v}")
    return v


def _path(base: Path, value, where: str, must_exist: bool = True) -> Path:
    if not isinstance(value, str) or not value:
        raise ManifestError(where, "must be a non-empty path string")
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if must_exist and not p.exists():
        raise ManifestError(where, f"path does not exist: {p}")
    return p


def parse_manifest(doc, base: Path = Path("."), source: Optional[Path] = None) -> Manifest:
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list) or not doc["entries"]:
        raise ManifestError("entries", "manifest needs a non-empty 'entries' list")
    entries = []
    seen = set()
    for i, raw in enumerate(doc["entries"]):
        where = f"entries[{i}]"
        if not isinstance(raw, dict):
            raise ManifestError(where, "entry must be a mapping")
        entry_id = str(_req(raw, "id", where))
        if entry_id in seen:
            raise ManifestError(f"{where}.id", f"duplicate id {entry_id!r}")
        seen.add(entry_id)
        platform = _req(raw, "platform", where)
        if platform not in PLATFORMS:
            raise ManifestError(f"{where}.platform", f"must be one of {PLATFORMS}, got {platform!r}")
        target = str(_req(raw, "target", where))
        try:
            resolution = float(_req(raw, "resolution_m", where))
        except (TypeError, ValueError):
            raise ManifestError(f"{where}.resolution_m", "must be a number") from None
        if not resolution > 0:
            raise ManifestError(f"{where}.resolution_m", f"must be positive, got {resolution}")
        raster = _path(base, _req(raw, "raster_path", where), f"{where}.raster_path")
        gt = raw.get("gt_path")
        gt = _path(base, gt, f"{where}.gt_path") if gt is not None else None

        p = _req(raw, "prompt", where)
        if not isinstance(p, dict):
            raise ManifestError(f"{where}.prompt", "must be a mapping")
        mode = _req(p, "mode", f"{where}.prompt")
        if mode not in PROMPT_MODES:
            raise ManifestError(f"{where}.prompt.mode", f"must be one of {PROMPT_MODES}, got {mode!r}")
        vectors = {}
        for key in ("vector_path", "boxes_path", "points_path"):
            if p.get(key) is not None:
                vectors[key] = _path(base, p[key], f"{where}.prompt.{key}")
        group_points = p.get("group_points", False)
        if not isinstance(group_points, bool):
            raise ManifestError(f"{where}.prompt.group_points", "must be true or false")
        phrase = p.get("phrase")
        if phrase is not None and (not isinstance(phrase, str) or not phrase.strip()):
            raise ManifestError(f"{where}.prompt.phrase", "must be a non-empty string")
        prompt = PromptSpec(mode, phrase, group_points=group_points, **vectors)

        th = raw.get("thresholds", {}) or {}
        if not isinstance(th, dict):
            raise ManifestError(f"{where}.thresholds", "must be a mapping")
        box_t = _unit(th.get("box", 0.35), f"{where}.thresholds.box")
        text_t = _unit(th.get("text", 0.25), f"{where}.thresholds.text")

        classes = []
        for j, c in enumerate(raw.get("classes") or []):
            cw = f"{where}.classes[{j}]"
            if not isinstance(c, dict):
                raise ManifestError(cw, "must be a mapping with id and name")
            try:
                cid = int(_req(c, "id", cw))
            except (TypeError, ValueError):
                raise ManifestError(f"{cw}.id", "must be an integer") from None
            if cid < 1:
                raise ManifestError(f"{cw}.id", "class ids start at 1 (0 is nodata)")
            classes.append(ClassSpec(cid, str(_req(c, "name", cw))))

        entries.append(ManifestEntry(entry_id, platform, target, resolution, raster, gt, prompt,
                                     box_t, text_t, tuple(classes), i))
    return Manifest(tuple(entries), canonical_hash(doc), source)


def check_entry_for_mode(entry: ManifestEntry, mode: str, exemplar: str = "text_auto") -> None:
    """Mode-specific requirements, checked before the backend is touched."""
    if mode != "general" and entry.gt_path is None:
        raise ManifestError(entry.field("gt_path"), f"required for {mode} mode")
    if mode in ("box", "point") and entry.prompt.vector_for(mode) is None:
        key = "boxes_path" if mode == "box" else "points_path"
        raise ManifestError(entry.field(f"prompt.{key}"), f"{mode} mode needs a vector file")
    if mode in ("text", "oneshot") and not entry.classes and not entry.prompt.phrase:
        if mode == "text" or exemplar == "text_auto":
            raise ManifestError(entry.field("prompt.phrase"), f"{mode} mode needs a phrase")
