"""Promptable segmentation of georeferenced imagery.

Zero-shot general, box, point and text prompting, a text-derived one-shot
mode with two-parameter scale fine-tuning, and pixelwise evaluation.
"""
from .geodata import (
    GeoRaster,
    GeoTransform,
    InstanceMask,
    LabelRaster,
    PromptSet,
    load_labels,
    load_raster,
    mosaic,
    prompts_from_vector,
    save_mask,
    save_raster,
    vectorize,
)
from .metrics import ConfusionCounts, MetricRow, aggregate, confusion, one_against_all
from .oneshot import ScaleWeights, TrainConfig, finetune, run_oneshot
from .promptseg import LoopConfig, run_boxes, run_general, run_points, run_text_loop

__version__ = "0.1.0"
