"""Evaluation protocol: present/future/discounted IoU and 3D video panoptic
quality (VPQ), with count-level accumulation over a dataset."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from occ4d.association import predict_instances
from occ4d.baselines import Forecast
from occ4d.dataset import Sample, TaskMode
from occ4d.errors import ConfigurationError, SpecMismatchError
from occ4d.grid import OccupancyGrid, OccupancySequence, SemanticLabel
from occ4d.schemas import ClassMetrics, EvalReport, VpqTally

logger = logging.getLogger("occ4d.metrics")

# pred id * OFFSET + gt id packs an instance pair into one integer
OFFSET = 1 << 16


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def _ratio(intersection: int, prediction: int, ground_truth: int) -> Optional[float]:
    union = prediction + ground_truth - intersection
    return intersection / union if union else None


def _counts(pred: OccupancyGrid, gt: OccupancyGrid, label: SemanticLabel) -> tuple[int, int, int]:
    p = pred.labels == label
    g = gt.labels == label
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p)), int(np.count_nonzero(g))


def iou_single(pred: OccupancyGrid, gt: OccupancyGrid, label: SemanticLabel = SemanticLabel.GMO) -> Optional[float]:
    """Voxel IoU of one class; None when both sets are empty."""
    gt.spec.require_match(pred.spec, what="prediction", horizons=False)
    return _ratio(*_counts(pred, gt, label))


def _sequence(x) -> OccupancySequence:
    return x if isinstance(x, OccupancySequence) else x.occupancy


def iou_future(pred, gt, label: SemanticLabel = SemanticLabel.GMO) -> tuple[list[Optional[float]], Optional[float]]:
    """Per-step IoU for t = 1..Nf and their mean over the defined steps."""
    pred, gt = _sequence(pred), _sequence(gt)
    if len(pred) != len(gt):
        raise SpecMismatchError(f"prediction has {len(pred)} frames, ground truth {len(gt)}")
    per_step = [iou_single(pred[t], gt[t], label) for t in range(1, len(gt))]
    defined = [v for v in per_step if v is not None]
    return per_step, (sum(defined) / len(defined) if defined else None)


def iou_discounted(per_step: Sequence[float]) -> float:
    """Mean over t of the running mean of the first t step IoUs.

    Step k carries weight (1/Nf) * sum_{t >= k} 1/t, so near-term steps
    count more.
    """
    values = np.asarray(per_step, dtype=np.float64)
    if values.size == 0:
        raise ValueError("discounted IoU needs at least one future step")
    running = np.cumsum(values) / np.arange(1, values.size + 1)
    return float(running.mean())


# ---------------------------------------------------------------------------
# VPQ
# ---------------------------------------------------------------------------

@dataclass
class VpqCounts:
    iou_sum: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, n_frames: int) -> "VpqCounts":
        return cls(np.zeros(n_frames), *(np.zeros(n_frames, dtype=np.int64) for _ in range(3)))

    def __iadd__(self, other: "VpqCounts") -> "VpqCounts":
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def per_frame(self) -> list[Optional[float]]:
        """Frame score, or None for frames without any predicted or true instance."""
        out = []
        for s, tp, fp, fn in zip(self.iou_sum, self.tp, self.fp, self.fn):
            denominator = tp + 0.5 * fp + 0.5 * fn
            out.append(float(s / denominator) if denominator else None)
        return out

    def value(self) -> Optional[float]:
        """Mean over frames holding an instance; equals the Nf + 1 average when none is empty."""
        scored = [v for v in self.per_frame() if v is not None]
        return sum(scored) / len(scored) if scored else None


def _instance_areas(ids: np.ndarray) -> dict[int, int]:
    values, counts = np.unique(ids[ids > 0], return_counts=True)
    return dict(zip(values.tolist(), counts.tolist()))


def vpq_counts(pred: OccupancySequence, gt: OccupancySequence, threshold: float = 0.2) -> VpqCounts:
    """Per-frame TP/FP/FN tallies with temporally consistent matching.

    A prediction/truth pair is a true positive when its voxel IoU exceeds
    ``threshold`` and the predicted id has either never been matched or was
    first matched to this same true instance.
    """
    if not (pred.has_instances and gt.has_instances):
        raise ConfigurationError("VPQ needs instance ID volumes for prediction and ground truth")
    if len(pred) != len(gt):
        raise SpecMismatchError(f"prediction has {len(pred)} frames, ground truth {len(gt)}")

    counts = VpqCounts.zeros(len(gt))
    first_match: dict[int, int] = {}
    for t, (p_grid, g_grid) in enumerate(zip(pred, gt)):
        g_grid.spec.require_match(p_grid.spec, what=f"prediction frame {t}", horizons=False)
        p = p_grid.instance_ids.astype(np.int64)
        g = g_grid.instance_ids.astype(np.int64)
        pred_area = _instance_areas(p)
        gt_area = _instance_areas(g)

        both = (p > 0) & (g > 0)
        combo, inter = np.unique(p[both] * OFFSET + g[both], return_counts=True)
        pred_ids = sorted(pred_area)
        gt_ids = sorted(gt_area)
        row = {pid: i for i, pid in enumerate(pred_ids)}
        col = {gid: j for j, gid in enumerate(gt_ids)}
        iou = np.zeros((len(pred_ids), len(gt_ids)))
        for key, n in zip(combo.tolist(), inter.tolist()):
            pid, gid = divmod(key, OFFSET)
            value = n / (pred_area[pid] + gt_area[gid] - n)
            if value > threshold and first_match.get(pid, gid) == gid:
                iou[row[pid], col[gid]] = value

        tp, iou_sum = 0, 0.0
        if iou.size:
            rows, cols = linear_sum_assignment(iou, maximize=True)
            for r, c in zip(rows, cols):
                if iou[r, c] <= 0:
                    continue
                first_match.setdefault(pred_ids[r], gt_ids[c])
                tp += 1
                iou_sum += iou[r, c]
        counts.iou_sum[t] = iou_sum
        counts.tp[t] = tp
        counts.fp[t] = len(pred_ids) - tp
        counts.fn[t] = len(gt_ids) - tp
    return counts


def vpq(pred: OccupancySequence, gt: OccupancySequence, threshold: float = 0.2) -> Optional[float]:
    return vpq_counts(pred, gt, threshold).value()


# ---------------------------------------------------------------------------
# Dataset accumulation
# ---------------------------------------------------------------------------

@dataclass
class EvalAccumulator:
    """Count-level totals; merging is field-wise addition."""

    n_future: int
    classes: tuple[SemanticLabel, ...] = (SemanticLabel.GMO,)
    intersection: np.ndarray = field(default=None)
    prediction: np.ndarray = field(default=None)
    ground_truth: np.ndarray = field(default=None)
    vpq: VpqCounts = field(default=None)
    samples: int = 0
    vpq_samples: int = 0

    def __post_init__(self):
        self.classes = tuple(SemanticLabel(c) for c in self.classes)
        shape = (len(self.classes), self.n_future + 1)
        for name in ("intersection", "prediction", "ground_truth"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape, dtype=np.int64))
        if self.vpq is None:
            self.vpq = VpqCounts.zeros(self.n_future + 1)

    def _check_compatible(self, other: "EvalAccumulator") -> None:
        if (self.n_future, self.classes) != (other.n_future, other.classes):
            raise SpecMismatchError(
                f"cannot merge accumulators for nf={other.n_future} {other.classes} into nf={self.n_future} {self.classes}"
            )

    def __iadd__(self, other: "EvalAccumulator") -> "EvalAccumulator":
        self._check_compatible(other)
        self.intersection += other.intersection
        self.prediction += other.prediction
        self.ground_truth += other.ground_truth
        self.vpq += other.vpq
        self.samples += other.samples
        self.vpq_samples += other.vpq_samples
        return self

    def __add__(self, other: "EvalAccumulator") -> "EvalAccumulator":
        out = EvalAccumulator(self.n_future, self.classes)
        out += self
        out += other
        return out

    def add_pair(
        self,
        forecast: Forecast,
        sample: Sample,
        vpq_threshold: float = 0.2,
        nms_radius: float = 2.0,
        min_prob: float = 0.5,
        assoc_radius: float = 2.0,
    ) -> "EvalAccumulator":
        sample.spec.require_match(forecast.spec, what=f"forecast for {sample.name}", horizons=False)
        if len(forecast.occupancy) != self.n_future + 1 or len(sample.occupancy) != self.n_future + 1:
            raise SpecMismatchError(
                f"{sample.name}: expected {self.n_future + 1} frames, forecast has "
                f"{len(forecast.occupancy)} and ground truth {len(sample.occupancy)}"
            )
        for c, label in enumerate(self.classes):
            for t, (p, g) in enumerate(zip(forecast.occupancy, sample.occupancy)):
                inter, n_pred, n_gt = _counts(p, g, label)
                self.intersection[c, t] += inter
                self.prediction[c, t] += n_pred
                self.ground_truth[c, t] += n_gt
        self.samples += 1

        if SemanticLabel.GMO in self.classes and sample.occupancy.has_instances:
            predicted = forecast
            if not forecast.has_instances and forecast.flows is not None:
                predicted = predict_instances(forecast, nms_radius, min_prob, assoc_radius)
            if predicted.has_instances:
                self.vpq += vpq_counts(predicted.occupancy, sample.occupancy, vpq_threshold)
                self.vpq_samples += 1
        return self

    def iou(self, label: SemanticLabel, t: int) -> Optional[float]:
        c = self.classes.index(label)
        return _ratio(int(self.intersection[c, t]), int(self.prediction[c, t]), int(self.ground_truth[c, t]))

    def report(self, method: str, mode: TaskMode, vpq_threshold: float = 0.2) -> EvalReport:
        classes = []
        for c, label in enumerate(self.classes):
            per_step = [self.iou(label, t) for t in range(1, self.n_future + 1)]
            defined = [v for v in per_step if v is not None]
            discounted = None
            if per_step and len(defined) == len(per_step):
                discounted = iou_discounted(per_step)
            classes.append(ClassMetrics(
                label=label.name.lower(),
                iou_current=self.iou(label, 0),
                iou_per_step=per_step,
                iou_future=sum(defined) / len(defined) if defined else None,
                iou_discounted=discounted,
                intersection=self.intersection[c].tolist(),
                prediction=self.prediction[c].tolist(),
                ground_truth=self.ground_truth[c].tolist(),
            ))
        with_vpq = self.vpq_samples > 0
        return EvalReport(
            method=method,
            mode=mode.value,
            n_future=self.n_future,
            samples=self.samples,
            vpq_threshold=vpq_threshold,
            classes=classes,
            vpq=self.vpq.value() if with_vpq else None,
            vpq_per_frame=self.vpq.per_frame() if with_vpq else [],
            vpq_tally=VpqTally(
                iou_sum=self.vpq.iou_sum.tolist(),
                tp=self.vpq.tp.tolist(),
                fp=self.vpq.fp.tolist(),
                fn=self.vpq.fn.tolist(),
            ) if with_vpq else None,
            vpq_samples=self.vpq_samples,
        )


def evaluate_dataset(
    pairs: Iterable[tuple[Forecast, Sample]],
    classes: Optional[Sequence[SemanticLabel]] = None,
    method: str = "forecast",
    vpq_threshold: float = 0.2,
    nms_radius: float = 2.0,
    min_prob: float = 0.5,
    assoc_radius: float = 2.0,
) -> EvalReport:
    accumulator = None
    mode = None
    for forecast, sample in pairs:
        if accumulator is None:
            mode = sample.mode
            accumulator = EvalAccumulator(sample.spec.n_future, tuple(classes or mode.classes))
        accumulator.add_pair(forecast, sample, vpq_threshold, nms_radius, min_prob, assoc_radius)
    if accumulator is None:
        raise ConfigurationError("no sample/forecast pairs to evaluate")
    logger.info("Evaluated %d samples (%d with instance tracking)", accumulator.samples, accumulator.vpq_samples)
    return accumulator.report(method, mode, vpq_threshold)
