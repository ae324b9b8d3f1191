"""Mask overlays for inspection: alpha-blended fills, contours and labels."""
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from PIL import Image

from sopseg.api import DataError
from sopseg.data import load_image, load_manifest
from sopseg.geometry import OrientedBox

logger = logging.getLogger(__name__)

Color = Tuple[int, int, int]

_GOLDEN = 0.618033988749895


def instance_colors(n: int) -> List[Color]:
    """n visually distinct RGB colors, hues spread by the golden ratio."""
    hues = [((i * _GOLDEN) % 1.0) * 180 for i in range(n)]
    hsv = np.array([[[int(h), 220, 255] for h in hues]], dtype=np.uint8)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0] if n else np.zeros((0, 3), dtype=np.uint8)
    return [tuple(int(c) for c in color) for color in rgb]


def _draw_label(canvas: np.ndarray, text: str, anchor: Tuple[int, int], color: Color) -> None:
    (label_w, label_h), _ = cv2.getTextSize(text, cv2.FONT_HERSHEY_SIMPLEX, 0.4, 1)
    x = min(max(anchor[0], 0), max(canvas.shape[1] - label_w, 0))
    y = max(anchor[1], label_h + 2)
    cv2.rectangle(canvas, (x, y - label_h - 2), (x + label_w, y), color, -1)
    cv2.putText(canvas, text, (x, y - 1), cv2.FONT_HERSHEY_SIMPLEX, 0.4, (255, 255, 255), 1, cv2.LINE_AA)


def overlay_masks(image: np.ndarray, masks: Sequence[np.ndarray], alpha: float = 0.5,
                  labels: Optional[Sequence[str]] = None, boxes: Optional[Sequence[OrientedBox]] = None,
                  colors: Optional[Sequence[Color]] = None) -> np.ndarray:
    """Blends each mask onto an (H, W, 3) uint8 image in its own color and outlines it.

    Args:
        image: RGB image, not modified
        masks: (H, W) bool masks in image coordinates
        alpha: fill opacity in [0, 1]
        labels: optional text drawn near each instance
        boxes: optional oriented boxes drawn as polygons
        colors: per-instance colors, generated when omitted
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"Expected an (H, W, 3) image, got {image.shape}")
    colors = list(colors) if colors is not None else instance_colors(len(masks))
    canvas = image.astype(np.float32)
    for mask, color in zip(masks, colors):
        if mask.shape != image.shape[:2]:
            raise DataError(f"Mask shape {mask.shape} does not match image {image.shape[:2]}")
        canvas[mask] = (1.0 - alpha) * canvas[mask] + alpha * np.asarray(color, dtype=np.float32)
    canvas = np.clip(np.round(canvas), 0, 255).astype(np.uint8)

    for index, (mask, color) in enumerate(zip(masks, colors)):
        contours, _ = cv2.findContours(mask.astype(np.uint8), cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
        cv2.drawContours(canvas, contours, -1, color, 1)
        if boxes is not None:
            corners = np.round(boxes[index].corners() - 0.5).astype(np.int32)
            cv2.polylines(canvas, [corners], True, color, 1, cv2.LINE_AA)
        if labels is not None and mask.any():
            rows, cols = np.nonzero(mask)
            _draw_label(canvas, labels[index], (int(cols.min()), int(rows.min()) - 2), color)
    return canvas


def save_overlay(canvas: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(canvas).save(path)
    except OSError as e:
        raise DataError(f"Cannot write overlay {path}: {e}", e)
    return path


def render_manifest(manifest_path: Union[str, Path], out_dir: Union[str, Path], alpha: float = 0.5) -> List[Path]:
    """Writes one overlay PNG per image referenced by an export manifest."""
    manifest_path = Path(manifest_path)
    by_image: Dict[str, list] = defaultdict(list)
    for entry, mask in load_manifest(manifest_path):
        by_image[entry.image_id].append((entry, mask))

    written = []
    for image_id, items in sorted(by_image.items()):
        image_path = items[0][0].image_path
        if image_path is None:
            raise DataError(f"Manifest {manifest_path} has no image path for image {image_id}")
        image = load_image(image_path)
        labels = [f"{entry.class_label} {entry.iou_pred:.2f}" for entry, _ in items]
        canvas = overlay_masks(image, [mask for _, mask in items], alpha=alpha, labels=labels)
        written.append(save_overlay(canvas, Path(out_dir) / f"{image_id}.png"))
    logger.info("Rendered %s overlays into %s", len(written), out_dir)
    return written
