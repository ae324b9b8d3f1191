"""Datasets: synthetic scenes, annotation files, patch extraction and mask export."""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
import yaml
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from torch.utils.data import Dataset

from sopseg import rle
from sopseg.api import DataError, DomainError
from sopseg.config import DataConfig, RamParams, SynthConfig
from sopseg.geometry import (CropWindow, HBox, OrientedBox, PromptBundle, PromptPoints, clamp_window, crop_window,
                             horizontal_envelope, oriented_prompts, region_size, to_crop_coords)
from sopseg.utils import calculate_hash

logger = logging.getLogger(__name__)

Mode = Literal['train', 'eval']


####################################################
# Records
####################################################

@dataclass
class SampleRecord:
    """One annotated instance. `image_ref` is a file path or an in-memory (H, W, 3) uint8 image."""
    instance_id: str
    image_id: str
    image_ref: Union[str, np.ndarray]
    obox: OrientedBox
    class_label: str
    image_size: Tuple[int, int]                    # (w, h)
    gt_mask: Optional[np.ndarray] = None           # (h, w) bool, None when only boxes are known

    def __post_init__(self):
        if self.gt_mask is not None:
            w, h = self.image_size
            if self.gt_mask.shape != (h, w):
                raise DataError(f"Instance {self.instance_id}: mask shape {self.gt_mask.shape} "
                                f"does not match image size {h}x{w}")


def load_image(image_ref: Union[str, np.ndarray]) -> np.ndarray:
    """Reads an image as (H, W, 3) uint8."""
    if isinstance(image_ref, np.ndarray):
        return image_ref
    try:
        with Image.open(image_ref) as img:
            return np.asarray(img.convert('RGB'), dtype=np.uint8)
    except FileNotFoundError as e:
        raise DataError(f"Image {image_ref} not found", e)
    except OSError as e:
        raise DataError(f"Cannot read image {image_ref}: {e}", e)


def obox_from_mask(mask: np.ndarray) -> OrientedBox:
    """Minimum-area rotated rectangle around the pixel squares of a binary mask."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise DomainError("Cannot fit a box to an empty mask")
    corners = np.concatenate([
        np.stack([cols, rows], axis=1),
        np.stack([cols + 1, rows], axis=1),
        np.stack([cols, rows + 1], axis=1),
        np.stack([cols + 1, rows + 1], axis=1),
    ]).astype(np.float32)
    corners = np.unique(corners, axis=0)
    rect = cv2.minAreaRect(corners)
    return OrientedBox.from_corners(cv2.boxPoints(rect).astype(np.float64))


####################################################
# Synthetic scenes
####################################################

@dataclass
class SyntheticDataset:
    images: Dict[str, np.ndarray]
    records: List[SampleRecord]

    def checksum(self) -> str:
        return calculate_hash({
            'images': self.images,
            'records': [(r.instance_id, r.image_id, r.class_label, r.gt_mask,
                         [r.obox.cx, r.obox.cy, r.obox.len_long, r.obox.len_short, r.obox.theta])
                        for r in self.records],
        })


def _to_cv2(points: np.ndarray) -> np.ndarray:
    """Pixel-edge coordinates to cv2 fixed-point coordinates (pixel centers at integers, 4 fractional bits)."""
    return np.round((points - 0.5) * 16).astype(np.int32)


def _shape_polygon(kind: str, obox: OrientedBox) -> Optional[np.ndarray]:
    """Outline in image coordinates for polygonal kinds."""
    hl, hs = obox.len_long / 2, obox.len_short / 2
    if kind == 'rectangle':
        local = np.array([[-hl, -hs], [hl, -hs], [hl, hs], [-hl, hs]])
    elif kind == 'lshape':
        bar = 0.45 * obox.len_short
        leg = 0.35 * obox.len_long
        local = np.array([[-hl, -hs], [hl, -hs], [hl, -hs + bar], [-hl + leg, -hs + bar], [-hl + leg, hs], [-hl, hs]])
    else:
        return None
    ux, uy = obox.axis
    rotation = np.array([[ux, -uy], [uy, ux]])
    return local @ rotation.T + np.array([obox.cx, obox.cy])


def render_shape(kind: str, obox: OrientedBox, height: int, width: int) -> np.ndarray:
    """Rasterizes a shape inscribed in `obox` to a bool mask."""
    canvas = np.zeros((height, width), dtype=np.uint8)
    polygon = _shape_polygon(kind, obox)
    if polygon is not None:
        cv2.fillPoly(canvas, [_to_cv2(polygon)], 1, lineType=cv2.LINE_8, shift=4)
    else:
        center = tuple(int(v) for v in _to_cv2(np.array([obox.cx, obox.cy])))
        axes = (int(round(obox.len_long / 2 * 16)), int(round(obox.len_short / 2 * 16)))
        cv2.ellipse(canvas, center, axes, math.degrees(obox.theta), 0, 360, 1, thickness=-1,
                    lineType=cv2.LINE_8, shift=4)
    return canvas.astype(bool)


def _random_color(rng: np.random.Generator, background: np.ndarray, min_contrast: float) -> np.ndarray:
    shift = rng.uniform(min_contrast, 0.5, size=3) * rng.choice([-1.0, 1.0], size=3)
    color = background + shift
    # reflect channels that left [0, 1] back to the other side of the background
    out_of_range = (color < 0) | (color > 1)
    color[out_of_range] = background[out_of_range] - shift[out_of_range]
    return np.clip(color, 0.0, 1.0)


def _synthesize_image(cfg: SynthConfig, rng: np.random.Generator, image_id: str
                      ) -> Tuple[np.ndarray, List[SampleRecord]]:
    side = cfg.image_side
    background = rng.uniform(0.2, 0.8, size=3)
    image = np.broadcast_to(background, (side, side, 3)).copy()
    occupied = np.zeros((side, side), dtype=bool)
    records: List[SampleRecord] = []
    n_objects = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    kernel = np.ones((5, 5), dtype=np.uint8)
    for n in range(n_objects):
        for _ in range(cfg.max_placement_attempts):
            kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
            long_side = rng.uniform(*cfg.size_range)
            short_side = max(long_side / rng.uniform(*cfg.aspect_range), 2.0)
            theta = rng.uniform(0.0, math.pi)
            margin = math.hypot(long_side, short_side) / 2 + 2
            cx, cy = rng.uniform(margin, side - margin, size=2)
            shape = OrientedBox.from_params(cx, cy, long_side, short_side, theta)
            mask = render_shape(kind, shape, side, side)
            if not mask.any() or (mask & occupied).any():
                continue
            occupied |= cv2.dilate(mask.astype(np.uint8), kernel).astype(bool)
            image[mask] = _random_color(rng, background, cfg.min_contrast)
            records.append(SampleRecord(
                instance_id=f"{image_id}_{n}",
                image_id=image_id,
                image_ref=image,          # replaced by the finished uint8 image below
                obox=obox_from_mask(mask),
                class_label=kind,
                image_size=(side, side),
                gt_mask=mask,
            ))
            break
        else:
            logger.debug("Could not place object %s in %s", n, image_id)

    image = image + rng.normal(0.0, cfg.noise_level, size=image.shape)
    image_u8 = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    for record in records:
        record.image_ref = image_u8
    return image_u8, records


def generate_synthetic(cfg: SynthConfig, seed: int, n_images: Optional[int] = None,
                       prefix: str = 'img') -> SyntheticDataset:
    """Renders non-overlapping rectangles, ellipses and L-shapes on noisy backgrounds.

    Deterministic for a given seed; each shape's class label is its kind and its oriented box is
    the minimum-area rectangle of the rendered pixels.
    """
    n_images = cfg.train_images if n_images is None else n_images
    images: Dict[str, np.ndarray] = {}
    records: List[SampleRecord] = []
    for index, child in enumerate(np.random.SeedSequence(seed).spawn(n_images)):
        image_id = f"{prefix}_{index:05d}"
        image, image_records = _synthesize_image(cfg, np.random.default_rng(child), image_id)
        images[image_id] = image
        records.extend(image_records)
    logger.info("Generated %s images with %s instances (seed %s)", len(images), len(records), seed)
    return SyntheticDataset(images=images, records=records)


####################################################
# Annotation files
####################################################

class RleObject(BaseModel):
    model_config = ConfigDict(extra='forbid')
    size: Tuple[int, int]
    counts: Union[List[int], str]


class ImageEntry(BaseModel):
    model_config = ConfigDict(extra='forbid')
    id: Union[str, int]
    path: str
    w: int = Field(gt=0)
    h: int = Field(gt=0)


class InstanceEntry(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True)
    id: Union[str, int]
    image_id: Union[str, int]
    class_label: str = Field(alias='class')
    obb: List[float]
    mask: Optional[Union[RleObject, str]] = None

    @field_validator('obb')
    @classmethod
    def _eight_values(cls, value: List[float]) -> List[float]:
        if len(value) != 8:
            raise ValueError(f"obb must have 8 values (4 corners), got {len(value)}")
        return value


class AnnotationFile(BaseModel):
    model_config = ConfigDict(extra='forbid')
    images: List[ImageEntry]
    instances: List[InstanceEntry]


@dataclass
class RejectedEntry:
    instance_id: str
    line: Optional[int]
    reason: str

    def __str__(self):
        where = f"line {self.line}" if self.line is not None else "unknown line"
        return f"{where}: instance {self.instance_id}: {self.reason}"


class _LineIndex:
    """Maps positions in a JSON document to 1-based line numbers (JSON parsed as YAML nodes)."""

    def __init__(self, text: str):
        self.text = text
        self._root = None
        self._parsed = False

    @property
    def root(self):
        if not self._parsed:
            self._parsed = True
            try:
                self._root = yaml.compose(self.text)
            except yaml.YAMLError:
                self._root = None
        return self._root

    def _child(self, node, key):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if k.value == key:
                    return v
        if isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            return node.value[key]
        return None

    def line(self, *path) -> Optional[int]:
        node = self.root
        for key in path:
            if node is None:
                return None
            node = self._child(node, key)
        return node.start_mark.line + 1 if node is not None else None


def _decode_mask(entry: InstanceEntry, base: Path, image: ImageEntry) -> Optional[np.ndarray]:
    if entry.mask is None:
        return None
    if isinstance(entry.mask, RleObject):
        mask = rle.decode(entry.mask.model_dump())
    else:
        path = base / entry.mask
        try:
            with Image.open(path) as img:
                mask = np.asarray(img.convert('L')) > 127
        except FileNotFoundError as e:
            raise DataError(f"mask file {path} not found", e)
    if mask.shape != (image.h, image.w):
        raise DataError(f"mask shape {mask.shape} does not match image {image.id} size {image.h}x{image.w}")
    return mask


# pixels; boxes fitted to masks touching the image border overshoot it slightly
OBB_BORDER_TOLERANCE = 1.0


def _check_inside(obox: OrientedBox, image: ImageEntry) -> None:
    corners = obox.corners()
    tol = OBB_BORDER_TOLERANCE
    if (corners[:, 0].min() < -tol or corners[:, 1].min() < -tol
            or corners[:, 0].max() > image.w + tol or corners[:, 1].max() > image.h + tol):
        raise DataError(f"oriented box extends outside the {image.w}x{image.h} image")


def load_annotations(path: Union[str, Path], strict: bool = True, require_masks: bool = False
                     ) -> Union[List[SampleRecord], Tuple[List[SampleRecord], List[RejectedEntry]]]:
    """Reads and validates an annotation file.

    Args:
        path: JSON file with `images` and `instances` (corner-form `obb`, optional RLE or PNG `mask`)
        strict: raise DataError listing every invalid entry; otherwise return `(records, rejects)`
        require_masks: treat instances without masks as invalid
    """
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as e:
        raise DataError(f"Annotation file {path} not found", e)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: line {e.lineno}: invalid JSON: {e.msg}", e)
    if not isinstance(raw, dict) or not isinstance(raw.get('images'), list) or not isinstance(raw.get('instances'), list):
        raise DataError(f"{path}: expected an object with 'images' and 'instances' lists")

    lines = _LineIndex(text)
    base = path.parent
    rejects: List[RejectedEntry] = []

    images: Dict[str, ImageEntry] = {}
    for index, item in enumerate(raw['images']):
        try:
            entry = ImageEntry.model_validate(item)
            images[str(entry.id)] = entry
        except ValidationError as e:
            rejects.append(RejectedEntry(f"image[{index}]", lines.line('images', index), _first_error(e)))

    records: List[SampleRecord] = []
    seen_ids = set()
    for index, item in enumerate(raw['instances']):
        instance_id = str(item.get('id', f"#{index}")) if isinstance(item, dict) else f"#{index}"
        line = lines.line('instances', index)
        try:
            entry = InstanceEntry.model_validate(item)
            image = images.get(str(entry.image_id))
            if image is None:
                raise DataError(f"unknown image_id {entry.image_id}")
            if str(entry.id) in seen_ids:
                raise DataError(f"duplicate instance id {entry.id}")
            obox = OrientedBox.from_corners(entry.obb)
            _check_inside(obox, image)
            mask = _decode_mask(entry, base, image)
            if require_masks and mask is None:
                raise DataError("instance has no mask")
            seen_ids.add(str(entry.id))
            records.append(SampleRecord(
                instance_id=str(entry.id),
                image_id=str(image.id),
                image_ref=str(base / image.path),
                obox=obox,
                class_label=entry.class_label,
                image_size=(image.w, image.h),
                gt_mask=mask,
            ))
        except ValidationError as e:
            rejects.append(RejectedEntry(instance_id, line, _first_error(e)))
        except (DataError, DomainError) as e:
            rejects.append(RejectedEntry(instance_id, line, str(e)))

    for reject in rejects:
        logger.warning("%s: rejected %s", path, reject)
    if strict:
        if rejects:
            details = "\n".join(f"  {r}" for r in rejects)
            raise DataError(f"{path}: {len(rejects)} invalid entries:\n{details}")
        if not records:
            raise DataError(f"{path}: no instances")
        return records
    return records, rejects


def _first_error(e: ValidationError) -> str:
    errors = e.errors()
    if not errors:
        return str(e)
    first = errors[0]
    location = ".".join(str(p) for p in first.get('loc', ()))
    return f"{location}: {first.get('msg')}" if location else first.get('msg')


def save_dataset(dataset: SyntheticDataset, root: Union[str, Path], split: str) -> Path:
    """Writes images as PNG under `root/images` and the split's annotations as `root/<split>.json`."""
    root = Path(root)
    image_dir = root / 'images'
    image_dir.mkdir(parents=True, exist_ok=True)
    image_entries = []
    for image_id, image in dataset.images.items():
        relative = f"images/{image_id}.png"
        Image.fromarray(image).save(root / relative)
        image_entries.append({'id': image_id, 'path': relative, 'w': int(image.shape[1]), 'h': int(image.shape[0])})
    instances = [{
        'id': r.instance_id,
        'image_id': r.image_id,
        'class': r.class_label,
        'obb': [round(float(v), 6) for v in r.obox.corners().reshape(-1)],
        'mask': rle.encode(r.gt_mask) if r.gt_mask is not None else None,
    } for r in dataset.records]
    path = root / f"{split}.json"
    with open(path, 'w') as f:
        json.dump({'images': image_entries, 'instances': instances}, f, indent=1)
    logger.info("Saved %s images and %s instances to %s", len(image_entries), len(instances), path)
    return path


####################################################
# Patch extraction
####################################################

@dataclass
class PatchSample:
    patch: np.ndarray                      # (3, s_in, s_in) float32, normalized
    prompt: PromptBundle                   # crop coordinates
    gt_mask_patch: Optional[np.ndarray]    # (s_in, s_in) bool
    window: CropWindow                     # clamped, integral window in image coordinates
    instance_id: str
    image_id: str
    class_label: str
    image_size: Tuple[int, int]            # (w, h)
    object_size: float                     # envelope's longer side in image pixels
    flipped: bool = False

    def prompt_array(self) -> np.ndarray:
        return self.prompt.to_array().astype(np.float32)


def _normalize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return (image.astype(np.float32) / 255.0 - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)


def _crop_padded(array: np.ndarray, win: CropWindow) -> np.ndarray:
    """Cuts the window out of an (H, W[, C]) array, zero-filling the right/bottom pads."""
    side = int(win.S)
    x_s, y_s = int(win.x_s), int(win.y_s)
    content_w, content_h = int(win.content_w), int(win.content_h)
    out = np.zeros((side, side) + array.shape[2:], dtype=array.dtype)
    out[:content_h, :content_w] = array[y_s:y_s + content_h, x_s:x_s + content_w]
    return out


def sample_anchor(mode: Mode, rng: Optional[np.random.Generator], jitter: Tuple[float, float]) -> Tuple[float, float]:
    if mode == 'eval':
        return 0.5, 0.5
    if rng is None:
        raise DomainError("Training-mode patches need a random generator")
    a_x, a_y = rng.uniform(jitter[0], jitter[1], size=2)
    return float(a_x), float(a_y)


def build_patch_sample(rec: SampleRecord, params: RamParams, mode: Mode = 'eval',
                       rng: Optional[np.random.Generator] = None, data_cfg: Optional[DataConfig] = None,
                       jitter: Tuple[float, float] = (0.3, 0.7), hflip: bool = False,
                       image: Optional[np.ndarray] = None) -> Optional[PatchSample]:
    """Crops, pads and resizes one instance to an s_in x s_in patch with prompts in crop coordinates.

    Returns None (with a warning) for degenerate objects whose envelope is under one pixel.
    """
    data_cfg = data_cfg or DataConfig()
    envelope = horizontal_envelope(rec.obox)
    d = envelope.max_side
    if d < 1:
        logger.warning("Skipping instance %s: object size %.3f px is below 1 px", rec.instance_id, d)
        return None
    if data_cfg.magnification == 'adaptive':
        S = region_size(d, params)
    else:
        S = max(data_cfg.fixed_region_size, d)
    a_x, a_y = sample_anchor(mode, rng, jitter)
    win = crop_window(envelope, S, a_x, a_y)
    img_w, img_h = rec.image_size
    # one rounding to whole pixels, here
    win = clamp_window(CropWindow(x_s=float(round(win.x_s)), y_s=float(round(win.y_s)), S=float(max(1, round(win.S)))),
                       img_w, img_h)

    s_in = params.s_in
    image = load_image(rec.image_ref) if image is None else image
    if image.shape[:2] != (img_h, img_w):
        raise DataError(f"Instance {rec.instance_id}: image shape {image.shape[:2]} does not match "
                        f"annotated size {img_h}x{img_w}")
    crop = _crop_padded(_normalize(image, data_cfg.pixel_mean, data_cfg.pixel_std), win)
    # area averaging when shrinking, bilinear when enlarging
    interpolation = cv2.INTER_AREA if win.S > s_in else cv2.INTER_LINEAR
    patch = cv2.resize(crop, (s_in, s_in), interpolation=interpolation)

    gt_patch = None
    if rec.gt_mask is not None:
        mask_crop = _crop_padded(rec.gt_mask.astype(np.float32), win)
        gt_patch = cv2.resize(mask_crop, (s_in, s_in), interpolation=interpolation) > 0.5

    prompt = to_crop_coords(PromptBundle(envelope, oriented_prompts(rec.obox)), win, s_in)
    coords = np.clip(prompt.to_array(), 0.0, float(s_in))

    flipped = False
    if mode == 'train' and hflip and rng is not None and rng.random() < 0.5:
        patch = patch[:, ::-1]
        if gt_patch is not None:
            gt_patch = gt_patch[:, ::-1]
        coords[:, 0] = s_in - coords[:, 0]
        coords[[0, 1], 0] = coords[[1, 0], 0]
        flipped = True

    x0, y0, x1, y1 = (float(v) for v in coords[:2].reshape(-1))
    box = HBox(x0, y0, max(x1 - x0, 1e-6), max(y1 - y0, 1e-6))
    return PatchSample(
        patch=np.ascontiguousarray(patch.transpose(2, 0, 1), dtype=np.float32),
        prompt=PromptBundle(box, PromptPoints.from_array(coords[2:])),
        gt_mask_patch=None if gt_patch is None else np.ascontiguousarray(gt_patch),
        window=win,
        instance_id=rec.instance_id,
        image_id=rec.image_id,
        class_label=rec.class_label,
        image_size=rec.image_size,
        object_size=d,
        flipped=flipped,
    )


@dataclass
class PatchBatch:
    patches: torch.Tensor                  # (B, 3, s_in, s_in)
    prompts: torch.Tensor                  # (B, 5, 2)
    masks: Optional[torch.Tensor]          # (B, s_in, s_in) float, None when unknown
    samples: List[PatchSample] = field(default_factory=list)

    def __len__(self):
        return self.patches.shape[0]

    def to(self, device: torch.device) -> 'PatchBatch':
        return PatchBatch(self.patches.to(device), self.prompts.to(device),
                          None if self.masks is None else self.masks.to(device), self.samples)


@dataclass
class Prediction:
    masks: np.ndarray                      # (B, s_in, s_in) bool
    scores: np.ndarray                     # (B,) predicted IoU in [0, 1]


def collate_patches(samples: List[PatchSample]) -> PatchBatch:
    patches = torch.from_numpy(np.stack([s.patch for s in samples]))
    prompts = torch.from_numpy(np.stack([s.prompt_array() for s in samples]))
    masks = None
    if all(s.gt_mask_patch is not None for s in samples):
        masks = torch.from_numpy(np.stack([s.gt_mask_patch for s in samples]).astype(np.float32))
    return PatchBatch(patches=patches, prompts=prompts, masks=masks, samples=list(samples))


class PatchDataset(Dataset):
    """Instances turned into patches on the fly.

    Training randomness (anchor jitter, flips) is drawn from a generator seeded by
    (seed, epoch, index), so results do not depend on worker count or scheduling.
    """

    def __init__(self, records: Sequence[SampleRecord], params: RamParams, mode: Mode = 'eval',
                 data_cfg: Optional[DataConfig] = None, jitter: Tuple[float, float] = (0.3, 0.7),
                 hflip: bool = False, seed: int = 0):
        self.params = params
        self.mode = mode
        self.data_cfg = data_cfg or DataConfig()
        self.jitter = jitter
        self.hflip = hflip
        self.seed = seed
        self.epoch = 0
        self.records: List[SampleRecord] = []
        for rec in records:
            if horizontal_envelope(rec.obox).max_side < 1:
                logger.warning("Skipping instance %s: degenerate object", rec.instance_id)
                continue
            self.records.append(rec)
        self._image_cache: Dict[str, np.ndarray] = {}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def _image(self, rec: SampleRecord) -> np.ndarray:
        if isinstance(rec.image_ref, np.ndarray):
            return rec.image_ref
        image = self._image_cache.get(rec.image_ref)
        if image is None:
            image = load_image(rec.image_ref)
            self._image_cache = {rec.image_ref: image}   # records are grouped by image
        return image

    def __getitem__(self, index: int) -> PatchSample:
        rec = self.records[index]
        rng = np.random.default_rng([self.seed, self.epoch, index]) if self.mode == 'train' else None
        return build_patch_sample(rec, self.params, self.mode, rng, self.data_cfg, self.jitter, self.hflip,
                                  image=self._image(rec))


####################################################
# Export
####################################################

@dataclass
class InstanceResult:
    sample: PatchSample
    mask_patch: np.ndarray                 # (s_in, s_in) bool
    score: float
    image_path: Optional[str] = None


def back_project(mask_patch: np.ndarray, win: CropWindow, image_size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling of a crop-space mask onto the full image (pixel centers)."""
    img_w, img_h = image_size
    s_in = mask_patch.shape[0]
    scale = s_in / win.S
    full = np.zeros((img_h, img_w), dtype=bool)
    x0, y0 = int(win.x_s), int(win.y_s)
    cols = np.arange(x0, x0 + int(win.content_w))
    rows = np.arange(y0, y0 + int(win.content_h))
    u = np.clip(np.floor((cols + 0.5 - win.x_s) * scale).astype(int), 0, s_in - 1)
    v = np.clip(np.floor((rows + 0.5 - win.y_s) * scale).astype(int), 0, s_in - 1)
    full[np.ix_(rows, cols)] = mask_patch[np.ix_(v, u)]
    return full


def save_mask(mask: np.ndarray, path: Union[str, Path]) -> Path:
    """Writes a bool mask as an 8-bit PNG (0 / 255)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(mask.astype(np.uint8) * 255).save(path)
    except OSError as e:
        raise DataError(f"Cannot write mask {path}: {e}", e)
    return path


class ManifestInstance(BaseModel):
    model_config = ConfigDict(extra='forbid')
    id: str
    image_id: str
    class_label: str = Field(alias='class')
    iou_pred: float
    size: Tuple[int, int]                  # (h, w)
    image_path: Optional[str] = None
    file: Optional[str] = None
    rle: Optional[Dict[str, Any]] = None


class Manifest(BaseModel):
    model_config = ConfigDict(extra='forbid')
    format: Literal['png', 'rle']
    instances: List[ManifestInstance]


def export_masks(results: Sequence[InstanceResult], out_dir: Union[str, Path],
                 fmt: Literal['png', 'rle'] = 'png') -> Path:
    """Back-projects every mask to its image and writes PNG files or inline RLE plus `manifest.json`."""
    out_dir = Path(out_dir)
    mask_dir = out_dir / 'masks'
    mask_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for result in results:
        sample = result.sample
        full = back_project(result.mask_patch, sample.window, sample.image_size)
        entry = {
            'id': sample.instance_id,
            'image_id': sample.image_id,
            'class': sample.class_label,
            'iou_pred': float(result.score),
            'size': [int(full.shape[0]), int(full.shape[1])],
            'image_path': result.image_path,
        }
        if fmt == 'png':
            relative = f"masks/{sample.instance_id}.png"
            save_mask(full, out_dir / relative)
            entry['file'] = relative
        else:
            entry['rle'] = rle.encode(full)
        entries.append(entry)
    path = out_dir / 'manifest.json'
    with open(path, 'w') as f:
        json.dump({'format': fmt, 'instances': entries}, f, indent=1)
    logger.info("Exported %s masks to %s", len(entries), path)
    return path


def load_manifest(path: Union[str, Path]) -> List[Tuple[ManifestInstance, np.ndarray]]:
    """Reads an export manifest back into (entry, full-image mask) pairs."""
    path = Path(path)
    try:
        manifest = Manifest.model_validate_json(path.read_text())
    except FileNotFoundError as e:
        raise DataError(f"Manifest {path} not found", e)
    except ValidationError as e:
        raise DataError(f"Manifest {path} is invalid: {_first_error(e)}", e)
    result = []
    for entry in manifest.instances:
        if entry.file is not None:
            with Image.open(path.parent / entry.file) as img:
                mask = np.asarray(img.convert('L')) > 127
        elif entry.rle is not None:
            mask = rle.decode(entry.rle)
        else:
            raise DataError(f"Manifest entry {entry.id} has neither file nor rle")
        result.append((entry, mask))
    return result
