"""Text-derived one-shot segmentation with two-parameter scale fine-tuning.

Pipeline: pick an exemplar (the top text detection, or a human-labelled
instance), fit the weights that blend the backend's three mask scales on that
exemplar, then repeatedly place a location prior on the most exemplar-like
unsegmented cell and segment there until the prior returns to a position that
was already used.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .backends.base import Backend, FeatureMap, MultiScaleMasks
from .errors import (
    DivergedError,
    ExemplarNotFoundError,
    ExhaustedError,
    NumericError,
    PreconditionError,
    ResolutionError,
    ShapeError,
)
from .geodata import GeoRaster, InstanceMask, LabelRaster, load_labels, mosaic
from .metrics import MetricRow, aggregate, confusion
from .promptseg import LoopConfig, RunLog, _pick, best_candidate, filter_candidates


@dataclass(frozen=True, eq=False)
class Exemplar:
    image: GeoRaster
    mask: np.ndarray
    source: str = "text_auto"
    logit: float = 1.0

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != self.image.shape:
            raise ShapeError(f"exemplar mask {mask.shape} does not match image {self.image.shape}")
        if not mask.any():
            raise PreconditionError("exemplar mask is empty")
        if self.source not in ("text_auto", "human_label"):
            raise ValueError(f"unknown exemplar source {self.source!r}")
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True)
class ScaleWeights:
    """Two free parameters mapped onto a 3-way simplex, third logit pinned at 0."""

    theta: tuple[float, float] = (0.0, 0.0)

    @property
    def weights(self) -> np.ndarray:
        return simplex_weights(np.asarray(self.theta, dtype=np.float64))

    def to_json(self, config_hash: str = "") -> dict:
        return {"theta": [float(t) for t in self.theta],
                "derived": [float(w) for w in self.weights],
                "config_hash": config_hash}


def simplex_weights(theta: np.ndarray) -> np.ndarray:
    z = np.array([theta[0], theta[1], 0.0])
    z = np.exp(z - z.max())
    return z / z.sum()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    lr0: float = 1e-3
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be positive")

    def lr(self, t: float) -> float:
        """Cosine annealing from ``lr0`` at t=0 down to 0 at t=epochs."""
        if self.epochs == 0:
            return 0.0
        return self.lr0 * (1.0 + math.cos(math.pi * t / self.epochs)) / 2.0

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class PriorPoint:
    positive: tuple[int, int]
    negative: Optional[tuple[int, int]]
    similarity: float


# -- exemplar selection -------------------------------------------------------

def select_exemplar_text(image: GeoRaster, phrase: str, cfg: LoopConfig, backend: Backend,
                         select: str = "highest_confidence") -> Exemplar:
    """The first round of the text loop, kept as the exemplar."""
    if not phrase or not phrase.strip():
        raise PreconditionError("phrase must be non-empty")
    cands = filter_candidates(backend.detect(image, phrase), cfg)
    if not cands:
        raise ExemplarNotFoundError(f"no detection of {phrase!r} passes the thresholds")
    top = best_candidate(cands)
    mask, _ = _pick(backend.segment_box(image, top.box), select)
    if not mask.any():
        raise ExemplarNotFoundError(f"top detection of {phrase!r} segments to an empty mask")
    return Exemplar(image, mask, "text_auto", top.logit)


def select_exemplar_human(image: GeoRaster, mask_source, instance_id: Optional[int] = None) -> Exemplar:
    """Exemplar from a labelled raster (path, LabelRaster or array).

    With ``instance_id`` the mask is ``labels == instance_id``, otherwise every
    nonzero pixel.
    """
    if isinstance(mask_source, (str, bytes)) or hasattr(mask_source, "__fspath__"):
        mask_source = load_labels(mask_source)
    labels = np.asarray(getattr(mask_source, "data", mask_source))
    if labels.shape != image.shape:
        raise ShapeError(f"label raster {labels.shape} does not match image {image.shape}")
    mask = labels == instance_id if instance_id is not None else labels != 0
    return Exemplar(image, mask, "human_label", 1.0)


# -- location prior -------------------------------------------------------------

def target_embedding(exemplar: Exemplar, backend: Backend,
                     features: Optional[FeatureMap] = None) -> np.ndarray:
    fm = features if features is not None else backend.embed(exemplar.image)
    cells = fm.sample(exemplar.mask)
    if not cells.any():
        raise ResolutionError("exemplar mask covers no feature cell")
    v = fm.vectors[cells].mean(axis=0)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ResolutionError("exemplar features cancel out")
    return v / norm


def location_prior(image: GeoRaster, target: np.ndarray, backend: Backend,
                   exclusion: Optional[np.ndarray] = None,
                   features: Optional[FeatureMap] = None) -> PriorPoint:
    """Most and least exemplar-like cells by cosine similarity.

    The positive point is the best cell outside ``exclusion``; the negative
    point is the worst cell overall (other than the positive). Ties resolve to
    the first cell in row-major order.
    """
    fm = features if features is not None else backend.embed(image)
    if exclusion is None:
        exclusion = np.zeros(image.shape, dtype=bool)
    exclusion = np.asarray(exclusion, dtype=bool)
    if exclusion.shape != image.shape:
        raise ShapeError("exclusion mask does not match image")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (fm.dim,):
        raise ShapeError(f"target has dimension {target.shape}, features have {fm.dim}")
    sim = np.clip(fm.vectors @ target, -1.0, 1.0)
    blocked = fm.sample(exclusion)
    if blocked.all():
        raise ExhaustedError("every feature cell is excluded")
    flat = np.where(blocked, -np.inf, sim).ravel()
    pos = int(np.argmax(flat))
    rest = sim.ravel().copy()
    rest[pos] = np.inf
    neg = int(np.argmin(rest)) if rest.size > 1 else None
    cols = sim.shape[1]
    positive = fm.cell_to_pixel(pos // cols, pos % cols)
    negative = fm.cell_to_pixel(neg // cols, neg % cols) if neg is not None else None
    return PriorPoint(positive, negative, float(sim.ravel()[pos]))


# -- scale blending and losses ---------------------------------------------------

def _logits(masks) -> np.ndarray:
    arr = np.asarray(getattr(masks, "logits", masks), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError("expected three mask scales")
    return arr


def combine_scales(masks, weights) -> np.ndarray:
    """Weighted sum of the three scale logits."""
    w = weights.weights if isinstance(weights, ScaleWeights) else np.asarray(weights, dtype=np.float64)
    return np.tensordot(w, _logits(masks), axes=1)


def binarize(S: np.ndarray) -> np.ndarray:
    # sigmoid(S) >= 0.5 exactly when S >= 0
    return np.asarray(S) >= 0


def _check_finite(S):
    if not np.all(np.isfinite(S)):
        raise NumericError("mask logits contain non-finite values")


def losses(S, gt, cfg: TrainConfig = TrainConfig()) -> tuple[float, float, float]:
    """Dice loss, mean sigmoid focal loss and their sum."""
    dice_l, focal_l, _ = _loss_terms(S, gt, cfg)
    return dice_l, focal_l, dice_l + focal_l


def _loss_terms(S, gt, cfg: TrainConfig):
    S = np.asarray(S, dtype=np.float64)
    g = np.asarray(gt, dtype=bool)
    if S.shape != g.shape:
        raise ShapeError(f"logits {S.shape} and ground truth {g.shape} differ")
    _check_finite(S)
    gf = g.astype(np.float64)
    p = expit(S)
    inter = float((p * gf).sum())
    den = float(p.sum() + gf.sum() + cfg.dice_eps)
    num = 2.0 * inter + cfg.dice_eps
    dice_l = 1.0 - num / den

    # z is the logit of the true class, so p_t = sigmoid(z)
    z = np.where(g, S, -S)
    p_t = expit(z)
    log_p_t = -np.logaddexp(0.0, -z)
    alpha_t = np.where(g, cfg.focal_alpha, 1.0 - cfg.focal_alpha)
    one_minus = expit(-z)
    mod = one_minus ** cfg.focal_gamma
    focal_l = float((-alpha_t * mod * log_p_t).mean())

    # d/dS of each term, for the gradient path
    d_dice_dp = -(2.0 * gf * den - num) / (den * den)
    d_dice = d_dice_dp * p * (1.0 - p)
    d_focal_dz = alpha_t * mod * (cfg.focal_gamma * p_t * log_p_t - one_minus)
    d_focal = np.where(g, d_focal_dz, -d_focal_dz) / S.size
    return dice_l, focal_l, d_dice + d_focal


def loss_and_grad(masks, gt, theta, cfg: TrainConfig = TrainConfig()):
    """Total loss and its gradient with respect to the two free parameters.

    Returns:
        ``(dice_loss, focal_loss, total, grad)`` with ``grad`` of shape (2,).
    """
    M = _logits(masks)
    theta = np.asarray(theta, dtype=np.float64)
    w = simplex_weights(theta)
    S = np.tensordot(w, M, axes=1)
    dice_l, focal_l, dS = _loss_terms(S, gt, cfg)
    dw = np.tensordot(M, dS, axes=([1, 2], [0, 1]))  # dL/dw_k
    # softmax Jacobian restricted to the two free coordinates
    grad = w[:2] * (dw[:2] - float(w @ dw))
    return dice_l, focal_l, dice_l + focal_l, grad


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    lr: float
    dice_loss: float
    focal_loss: float
    total: float


def fit_scale_weights(masks, gt, cfg: TrainConfig = TrainConfig()) -> tuple[ScaleWeights, list[TraceRow]]:
    """Adam on the two scale parameters under cosine annealing.

    The trace has one row per epoch plus a final row at ``epoch == cfg.epochs``
    holding the loss of the returned weights.
    """
    M = _logits(masks)
    gt = np.asarray(gt, dtype=bool)
    if M.shape[1:] != gt.shape:
        raise ShapeError("mask scales and ground truth differ in shape")
    theta = np.zeros(2)
    m = np.zeros(2)
    v = np.zeros(2)
    trace: list[TraceRow] = []
    for epoch in range(cfg.epochs + 1):
        d, f, total, grad = loss_and_grad(M, gt, theta, cfg)
        lr = cfg.lr(epoch)
        if not (math.isfinite(total) and np.all(np.isfinite(grad))):
            raise DivergedError(epoch)
        trace.append(TraceRow(epoch, lr, d, f, total))
        if epoch == cfg.epochs:
            break
        t = epoch + 1
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return ScaleWeights((float(theta[0]), float(theta[1]))), trace


def exemplar_masks(exemplar: Exemplar, backend: Backend) -> MultiScaleMasks:
    """Backend scales for the exemplar's own prior point on its own image."""
    fm = backend.embed(exemplar.image)
    target = target_embedding(exemplar, backend, features=fm)
    prior = location_prior(exemplar.image, target, backend, exclusion=~exemplar.mask, features=fm)
    return _segment_at(exemplar.image, prior, backend)


def _segment_at(image, prior: PriorPoint, backend: Backend) -> MultiScaleMasks:
    if backend.supports_negative_points and prior.negative is not None:
        return backend.segment_points(image, [prior.positive, prior.negative], labels=[1, 0])
    return backend.segment_points(image, [prior.positive])


def finetune(exemplar: Exemplar, backend: Backend, cfg: TrainConfig = TrainConfig()):
    """Fit scale weights on the exemplar.

    Returns:
        ``(ScaleWeights, trace)``
    """
    return fit_scale_weights(exemplar_masks(exemplar, backend), exemplar.mask, cfg)


def trace_to_csv(trace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "lr", "dice_loss", "focal_loss", "total"])
    for r in trace:
        writer.writerow([r.epoch, repr(r.lr), repr(r.dice_loss), repr(r.focal_loss), repr(r.total)])
    return buf.getvalue()


# -- iterative one-shot segmentation ---------------------------------------------

def _chebyshev(a, b) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def run_oneshot(image: GeoRaster, exemplar: Exemplar, weights: ScaleWeights, backend: Backend,
                stop_eps: int = 2, max_iterations: int = 100, min_similarity: float = 0.0,
                log: Optional[RunLog] = None):
    """Segment every object resembling the exemplar.

    Each round places the location prior on the most similar cell not yet
    covered by an earlier instance and segments there with the fine-tuned
    scale blend. When no uncovered cell is more similar than
    ``min_similarity``, the prior is taken over the whole map instead, which
    lands back on an already segmented object. The loop stops at that
    breakpoint, i.e. when the prior falls within ``stop_eps`` pixels
    (Chebyshev) of a used position or inside a segmented instance. It also
    stops on an empty mask, when ``max_iterations`` instances exist, or when
    every cell is covered.

    Returns:
        ``(instances, label_raster)``; the stop reason is recorded in ``log``.
    """
    if not all(math.isfinite(t) for t in weights.theta):
        raise PreconditionError("scale weights must be finite")
    log = log if log is not None else RunLog()
    fm = backend.embed(image)
    if exemplar.image is image:
        target = target_embedding(exemplar, backend, features=fm)
    else:
        target = target_embedding(exemplar, backend)
    exclusion = np.zeros(image.shape, dtype=bool)
    used: list[tuple[int, int]] = []
    instances: list[InstanceMask] = []
    it = 1
    while True:
        try:
            prior = location_prior(image, target, backend, exclusion, features=fm)
        except ExhaustedError:
            log.record(it, "exhausted", "every cell is covered by an instance")
            break
        if prior.similarity <= min_similarity:
            prior = location_prior(image, target, backend, None, features=fm)
        x, y = prior.positive
        if any(_chebyshev(prior.positive, u) <= stop_eps for u in used) or exclusion[y, x]:
            log.record(it, "breakpoint", f"prior returned to a previous position {prior.positive}")
            break
        used.append(prior.positive)
        S = combine_scales(_segment_at(image, prior, backend), weights)
        inst = binarize(S)
        if not inst.any():
            log.warn(it, "empty_mask", f"prior {prior.positive} produced no pixels")
            break
        if len(instances) >= max_iterations:
            log.warn(it, "max_iterations", f"stopped at {max_iterations} instances")
            break
        instances.append(InstanceMask(inst, it, score=prior.similarity, provenance="oneshot", iteration=it))
        exclusion |= inst
        it += 1
    return instances, mosaic(instances, image.transform, image.crs, shape=image.shape)


# -- protocol comparison -----------------------------------------------------------

@dataclass
class OneShotRun:
    exemplar: Exemplar
    exemplar_id: Optional[int]
    weights: ScaleWeights
    trace: list
    instances: list
    labels: LabelRaster
    log: RunLog
    metrics: MetricRow


@dataclass
class ProtocolComparison:
    human_runs: list = field(default_factory=list)
    human_row: Optional[MetricRow] = None
    text_run: Optional[OneShotRun] = None
    text_row: Optional[MetricRow] = None


def draw_exemplar_ids(gt_instances, k: int, seed: int) -> list[int]:
    """Seeded uniform draw of instance ids; with replacement only when k exceeds the count."""
    ids = sorted(int(v) for v in np.unique(np.asarray(gt_instances)) if v != 0)
    if not ids:
        raise PreconditionError("ground truth has no instances to sample")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    return [int(v) for v in rng.choice(ids, size=k, replace=k > len(ids))]


def oneshot_pipeline(image, exemplar, backend, train_cfg, gt, valid=None, exemplar_id=None,
                     stop_eps=2, max_iterations=100) -> OneShotRun:
    weights, trace = finetune(exemplar, backend, train_cfg)
    log = RunLog()
    instances, labels = run_oneshot(image, exemplar, weights, backend, stop_eps, max_iterations, log=log)
    row = MetricRow.from_counts(confusion(labels.data > 0, gt, valid))
    return OneShotRun(exemplar, exemplar_id, weights, trace, instances, labels, log, row)


def compare_protocols(image: GeoRaster, phrase: str, gt_instances, backend: Backend,
                      k_samples: int = 5, seed: int = 0, loop_cfg: LoopConfig = LoopConfig(),
                      train_cfg: TrainConfig = TrainConfig(), select: str = "highest_confidence",
                      valid=None, stop_eps: int = 2, max_iterations: int = 100,
                      run_human: bool = True, run_text: bool = True) -> ProtocolComparison:
    """Human-labelled exemplars (k seeded draws, mean ± std) against the text exemplar (one run).

    ``gt_instances`` is an instance raster: 0 background, each object its own id.
    """
    gt_instances = np.asarray(getattr(gt_instances, "data", gt_instances))
    gt = gt_instances != 0
    out = ProtocolComparison()
    if run_human:
        for inst_id in draw_exemplar_ids(gt_instances, k_samples, seed):
            ex = select_exemplar_human(image, gt_instances, inst_id)
            out.human_runs.append(oneshot_pipeline(image, ex, backend, train_cfg, gt, valid, inst_id,
                                                   stop_eps, max_iterations))
        out.human_row = aggregate([r.metrics for r in out.human_runs])
    if run_text:
        ex = select_exemplar_text(image, phrase, loop_cfg, backend, select)
        out.text_run = oneshot_pipeline(image, ex, backend, train_cfg, gt, valid, None,
                                        stop_eps, max_iterations)
        out.text_row = out.text_run.metrics
    return out
