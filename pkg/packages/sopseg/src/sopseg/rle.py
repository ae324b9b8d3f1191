"""Uncompressed COCO-style run-length encoding of binary masks."""
from typing import Any, Dict

import numpy as np
import pycocotools.mask as mask_util

from sopseg.api import DataError


def encode(mask: np.ndarray) -> Dict[str, Any]:
    """Column-major runs starting with a (possibly empty) run of zeros."""
    if mask.ndim != 2:
        raise DataError(f"RLE needs a 2-D mask, got shape {mask.shape}")
    h, w = mask.shape
    flat = np.asarray(mask, dtype=bool).flatten(order='F')
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {'size': [int(h), int(w)], 'counts': [int(c) for c in counts]}


def decode(rle: Dict[str, Any]) -> np.ndarray:
    try:
        h, w = (int(v) for v in rle['size'])
        counts = rle['counts']
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"Malformed RLE object: {e}", e)
    if isinstance(counts, list):
        if sum(counts) != h * w:
            raise DataError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
        if h * w == 0:
            return np.zeros((h, w), dtype=bool)
        rle = mask_util.frPyObjects({'size': [h, w], 'counts': counts}, h, w)
    return mask_util.decode(rle).astype(bool)
