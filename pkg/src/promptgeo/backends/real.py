"""Adapters for SAM and GroundingDINO checkpoints.

Nothing here is imported at package import time; ``torch``,
``segment_anything`` and ``transformers`` are only needed when a real backend
is constructed. These adapters are not exercised by the test suite.

Configuration is a JSON document::

    {
      "sam_checkpoint": "/models/sam_vit_h_4b8939.pth",
      "sam_model_type": "vit_h",
      "dino_model": "IDEA-Research/grounding-dino-base",
      "device": "cuda",
      "feature_stride": 16
    }
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import BackendError
from ..geodata import GeoRaster, InstanceMask
from .base import Backend, DetectionCandidate, FeatureMap, MultiScaleMasks


def _rgb(image: GeoRaster) -> np.ndarray:
    data = image.data
    if data.shape[0] == 1:
        data = np.repeat(data, 3, axis=0)
    return np.ascontiguousarray(np.transpose(data[:3], (1, 2, 0)))


class SamGroundingBackend(Backend):
    """SAM for segmentation and embeddings, GroundingDINO for text detection."""

    supports_negative_points = True

    def __init__(self, sam_checkpoint: str, sam_model_type: str = "vit_h",
                 dino_model: str = "IDEA-Research/grounding-dino-base",
                 device: Optional[str] = None, feature_stride: int = 16):
        try:
            import torch
            from segment_anything import SamAutomaticMaskGenerator, SamPredictor, sam_model_registry
        except ImportError as exc:
            raise BackendError(f"segment_anything/torch not installed: {exc}") from exc
        if not Path(sam_checkpoint).exists():
            raise BackendError(f"SAM checkpoint not found: {sam_checkpoint}")
        self._torch = torch
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        sam = sam_model_registry[sam_model_type](checkpoint=sam_checkpoint)
        sam.to(device=self.device)
        self._predictor = SamPredictor(sam)
        self._generator = SamAutomaticMaskGenerator(sam)
        self._dino_name = dino_model
        self._dino = None
        self.feature_stride = int(feature_stride)
        self._image_key = None

    @classmethod
    def from_config(cls, path) -> "SamGroundingBackend":
        cfg = json.loads(Path(path).read_text())
        return cls(**cfg)

    def _set_image(self, image: GeoRaster):
        key = (id(image.data), image.data.shape)
        if key != self._image_key:
            self._predictor.set_image(_rgb(image))
            self._image_key = key

    def _load_dino(self):
        if self._dino is None:
            try:
                from transformers import AutoProcessor, GroundingDinoForObjectDetection
            except ImportError as exc:
                raise BackendError(f"transformers not installed: {exc}") from exc
            processor = AutoProcessor.from_pretrained(self._dino_name)
            model = GroundingDinoForObjectDetection.from_pretrained(self._dino_name).to(self.device)
            model.eval()
            self._dino = (processor, model)
        return self._dino

    def detect(self, image: GeoRaster, phrase: str) -> list[DetectionCandidate]:
        if not phrase.strip():
            raise ValueError("phrase must be non-empty")
        torch = self._torch
        processor, model = self._load_dino()
        text = phrase.strip().lower()
        if not text.endswith("."):
            text += "."
        inputs = processor(images=_rgb(image), text=text, return_tensors="pt").to(self.device)
        with torch.no_grad():
            outputs = model(**inputs)
        probs = outputs.logits.sigmoid()[0].cpu().numpy()  # (queries, tokens)
        boxes = outputs.pred_boxes[0].cpu().numpy()  # normalised cx, cy, w, h
        ids = inputs.input_ids[0].cpu().numpy()
        special = set(processor.tokenizer.all_special_ids) | set(processor.tokenizer.convert_tokens_to_ids(["."]))
        phrase_tokens = np.array([i not in special for i in ids[: probs.shape[1]]])
        h, w = image.shape
        out = []
        for p, (cx, cy, bw, bh) in zip(probs, boxes):
            x1, y1 = max(0.0, (cx - bw / 2) * w), max(0.0, (cy - bh / 2) * h)
            x2, y2 = min(float(w), (cx + bw / 2) * w), min(float(h), (cy + bh / 2) * h)
            if not (x1 < x2 and y1 < y2):
                continue
            logit = float(np.clip(p.max(), 0.0, 1.0))
            phrase_score = float(np.clip(p[phrase_tokens].mean(), 0.0, 1.0)) if phrase_tokens.any() else 0.0
            out.append(DetectionCandidate((x1, y1, x2, y2), logit, phrase_score, phrase))
        return out

    def _predict(self, image, **kwargs) -> MultiScaleMasks:
        self._set_image(image)
        logits, scores, _ = self._predictor.predict(multimask_output=True, return_logits=True, **kwargs)
        return MultiScaleMasks(np.asarray(logits, dtype=np.float64), np.asarray(scores, dtype=np.float64))

    def segment_box(self, image: GeoRaster, box) -> MultiScaleMasks:
        return self._predict(image, box=np.asarray(box, dtype=np.float32))

    def segment_points(self, image, points: Sequence, labels: Optional[Sequence[int]] = None) -> MultiScaleMasks:
        pts = np.asarray(points, dtype=np.float32)
        labs = np.ones(len(pts), dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
        return self._predict(image, point_coords=pts, point_labels=labs)

    def segment_everything(self, image: GeoRaster) -> list[InstanceMask]:
        results = self._generator.generate(_rgb(image))
        return [
            InstanceMask(r["segmentation"], i + 1, score=float(r.get("predicted_iou", 1.0)), provenance="general")
            for i, r in enumerate(results)
            if r["segmentation"].any()
        ]

    def embed(self, image: GeoRaster) -> FeatureMap:
        torch = self._torch
        self._set_image(image)
        feat = self._predictor.get_image_embedding()[0]  # (C, 64, 64) over the padded 1024 input
        in_h, in_w = self._predictor.input_size
        cells = feat.shape[-1] / 1024.0
        feat = feat[:, : int(np.ceil(in_h * cells)), : int(np.ceil(in_w * cells))]
        h, w = image.shape
        s = self.feature_stride
        grid = (int(np.ceil(h / s)), int(np.ceil(w / s)))
        feat = torch.nn.functional.interpolate(feat[None], size=grid, mode="bilinear", align_corners=False)[0]
        feat = torch.nn.functional.normalize(feat, dim=0)
        return FeatureMap(feat.permute(1, 2, 0).cpu().numpy().astype(np.float64), stride=s)
