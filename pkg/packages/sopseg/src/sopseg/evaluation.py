import logging
import math
from collections import defaultdict
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.ndimage import binary_erosion
from torch.utils.data import DataLoader

from sopseg.api import DataError, Predictor, ShapeError
from sopseg.config import EvalConfig
from sopseg.data import PatchDataset, collate_patches

logger = logging.getLogger(__name__)

_STRUCTURE = np.ones((3, 3), dtype=bool)


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"Mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _ratio(intersection: int, union: int) -> float:
    return 1.0 if union == 0 else intersection / union


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|, 1.0 when both masks are empty."""
    a, b = _check_pair(a, b)
    return _ratio(int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b)))


def band_width(shape: Tuple[int, int], dilation_ratio: float) -> int:
    return max(1, int(round(dilation_ratio * math.hypot(shape[0], shape[1]))))


def mask_to_band(mask: np.ndarray, d: int) -> np.ndarray:
    """Pixels of the mask within d pixels of its contour; the image border counts as contour."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    eroded = binary_erosion(mask, structure=_STRUCTURE, iterations=d, border_value=0)
    return mask & ~eroded


def boundary_iou(a: np.ndarray, b: np.ndarray, dilation_ratio: float = 0.005) -> float:
    """IoU of the inner boundary bands of both masks, band width max(1, round(ratio * diagonal))."""
    a, b = _check_pair(a, b)
    d = band_width(a.shape, dilation_ratio)
    band_a, band_b = mask_to_band(a, d), mask_to_band(b, d)
    return _ratio(int(np.count_nonzero(band_a & band_b)), int(np.count_nonzero(band_a | band_b)))


class GroupMetrics(BaseModel):
    model_config = ConfigDict(extra='forbid')
    iou: float
    biou: float
    count: int


class InstanceMetrics(BaseModel):
    model_config = ConfigDict(extra='forbid')
    instance_id: str
    class_label: str
    object_size: float
    iou: float
    biou: float
    score: float


class EvalReport(BaseModel):
    model_config = ConfigDict(extra='forbid')
    per_class: Dict[str, GroupMetrics]
    miou: float
    mbiou: float
    per_size: Dict[str, GroupMetrics]
    n_instances: int
    instances: List[InstanceMetrics] = []


def size_bucket(object_size: float, buckets: Tuple[float, float]) -> str:
    small, large = buckets
    if object_size < small:
        return 'small'
    if object_size < large:
        return 'medium'
    return 'large'


def _group(instances: List[InstanceMetrics], key) -> Dict[str, GroupMetrics]:
    groups: Dict[str, List[InstanceMetrics]] = defaultdict(list)
    for instance in instances:
        groups[key(instance)].append(instance)
    return {
        name: GroupMetrics(
            iou=float(np.mean([m.iou for m in members])),
            biou=float(np.mean([m.biou for m in members])),
            count=len(members),
        )
        for name, members in sorted(groups.items())
    }


def build_report(instances: List[InstanceMetrics], cfg: EvalConfig) -> EvalReport:
    """Per-class means, their macro averages and size buckets."""
    if not instances:
        raise DataError("Cannot build a report without instances")
    per_class = _group(instances, lambda m: m.class_label)
    per_size = _group(instances, lambda m: size_bucket(m.object_size, cfg.size_buckets))
    return EvalReport(
        per_class=per_class,
        miou=float(np.mean([g.iou for g in per_class.values()])),
        mbiou=float(np.mean([g.biou for g in per_class.values()])),
        per_size=per_size,
        n_instances=len(instances),
        instances=instances,
    )


def evaluate(predictor: Predictor, dataset: PatchDataset, cfg: Optional[EvalConfig] = None,
             num_workers: int = 0) -> EvalReport:
    """Predicts every instance (crop space, full patch resolution) and aggregates IoU and boundary IoU."""
    cfg = cfg or EvalConfig()
    if len(dataset) == 0:
        raise DataError("Cannot evaluate on an empty dataset")
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=False, num_workers=num_workers,
                        collate_fn=collate_patches)
    instances: List[InstanceMetrics] = []
    for batch in loader:
        if batch.masks is None:
            raise DataError("Evaluation needs ground-truth masks for every instance")
        prediction = predictor.predict(batch)
        gt = batch.masks.numpy() > 0.5
        for i, sample in enumerate(batch.samples):
            instances.append(InstanceMetrics(
                instance_id=sample.instance_id,
                class_label=sample.class_label,
                object_size=sample.object_size,
                iou=mask_iou(prediction.masks[i], gt[i]),
                biou=boundary_iou(prediction.masks[i], gt[i], cfg.dilation_ratio),
                score=float(prediction.scores[i]),
            ))
    report = build_report(instances, cfg)
    logger.info("Evaluated %s instances: mIoU %.4f, mBIoU %.4f", report.n_instances, report.miou, report.mbiou)
    return report


def format_report_table(report: EvalReport) -> str:
    """Aligned text table: one row per class, then the macro means and the size buckets."""
    rows = [("class", "IoU", "BIoU", "count")]
    for name, metrics in report.per_class.items():
        rows.append((name, f"{metrics.iou:.4f}", f"{metrics.biou:.4f}", str(metrics.count)))
    rows.append(("mean", f"{report.miou:.4f}", f"{report.mbiou:.4f}", str(report.n_instances)))
    for name, metrics in report.per_size.items():
        rows.append((f"size:{name}", f"{metrics.iou:.4f}", f"{metrics.biou:.4f}", str(metrics.count)))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = []
    for index, row in enumerate(rows):
        lines.append("  ".join([row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]))
        if index == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
