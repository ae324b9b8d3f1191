"""Closed-form spatial math: region sizing, crop placement, oriented-box algebra and prompt points.

Coordinates are continuous pixel-edge coordinates: pixel (row i, col j) covers [j, j+1] x [i, i+1],
x grows to the right and y grows downwards. Angles are measured from the +x axis towards +y.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Tuple, TypeVar, Union

import numpy as np

from sopseg.api import DomainError
from sopseg.config import RamParams

logger = logging.getLogger(__name__)

Point = Tuple[float, float]


@dataclass(frozen=True)
class HBox:
    """Axis-aligned box, (x, y) is the top-left corner."""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DomainError(f"HBox sides must be positive, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def center(self) -> Point:
        return self.x + self.w / 2, self.y + self.h / 2

    @property
    def max_side(self) -> float:
        return max(self.w, self.h)

    def to_array(self) -> np.ndarray:
        """Top-left and bottom-right corners as a (2, 2) array."""
        return np.array([[self.x, self.y], [self.x2, self.y2]], dtype=np.float64)


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle. `theta` is the direction of the long axis, normalized to [0, pi)."""
    cx: float
    cy: float
    len_long: float
    len_short: float
    theta: float

    def __post_init__(self):
        values = (self.cx, self.cy, self.len_long, self.len_short, self.theta)
        if not all(math.isfinite(v) for v in values):
            raise DomainError(f"OrientedBox values must be finite, got {values}")
        if not self.len_short > 0:
            raise DomainError(f"OrientedBox len_short must be positive, got {self.len_short}")
        if self.len_long < self.len_short:
            raise DomainError(f"OrientedBox len_long ({self.len_long}) must be >= len_short ({self.len_short})")
        theta = math.fmod(self.theta, math.pi)
        if theta < 0:
            theta += math.pi
        if theta >= math.pi:
            theta -= math.pi
        object.__setattr__(self, 'theta', theta)

    @classmethod
    def from_params(cls, cx: float, cy: float, w: float, h: float, theta: float) -> 'OrientedBox':
        """Builds a box from side `w` along `theta` and side `h` across it, swapping sides when h > w."""
        if w >= h:
            return cls(cx, cy, w, h, theta)
        return cls(cx, cy, h, w, theta + math.pi / 2)

    @classmethod
    def from_corners(cls, points) -> 'OrientedBox':
        """Converts 4 corners in polygon order (8 floats or a (4, 2) array).

        Opposite sides are averaged so slightly non-rectangular annotations still convert.
        For squares the first edge (corner 0 to corner 1) is taken as the long axis.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if pts.shape != (4, 2):
            raise DomainError(f"Oriented box needs 4 corners, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise DomainError("Oriented box corners must be finite")
        center = pts.mean(axis=0)
        first = ((pts[1] - pts[0]) + (pts[2] - pts[3])) / 2
        second = ((pts[2] - pts[1]) + (pts[3] - pts[0])) / 2
        l_first = float(np.hypot(*first))
        l_second = float(np.hypot(*second))
        if l_first <= 0 or l_second <= 0:
            raise DomainError(f"Degenerate oriented box corners: {pts.tolist()}")
        if l_first >= l_second:
            return cls(float(center[0]), float(center[1]), l_first, l_second, math.atan2(first[1], first[0]))
        return cls(float(center[0]), float(center[1]), l_second, l_first, math.atan2(second[1], second[0]))

    @property
    def center(self) -> Point:
        return self.cx, self.cy

    @property
    def axis(self) -> Point:
        """Unit vector of the long axis."""
        return math.cos(self.theta), math.sin(self.theta)

    def corners(self) -> np.ndarray:
        """(4, 2) corners in polygon order; the first edge runs along the long axis."""
        ux, uy = self.axis
        hl, hs = self.len_long / 2, self.len_short / 2
        u = np.array([ux, uy]) * hl
        v = np.array([-uy, ux]) * hs
        c = np.array([self.cx, self.cy])
        return np.stack([c - u - v, c + u - v, c + u + v, c - u + v])

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        """True when the point lies inside the rectangle by more than `margin` from every edge."""
        ux, uy = self.axis
        dx, dy = x - self.cx, y - self.cy
        along = dx * ux + dy * uy
        across = -dx * uy + dy * ux
        return (abs(along) < self.len_long / 2 - margin) and (abs(across) < self.len_short / 2 - margin)

    def rotated(self, phi: float, pivot: Point = (0.0, 0.0)) -> 'OrientedBox':
        px, py = pivot
        cos_phi, sin_phi = math.cos(phi), math.sin(phi)
        dx, dy = self.cx - px, self.cy - py
        return OrientedBox(px + cos_phi * dx - sin_phi * dy, py + sin_phi * dx + cos_phi * dy,
                           self.len_long, self.len_short, self.theta + phi)

    def translated(self, dx: float, dy: float) -> 'OrientedBox':
        return replace(self, cx=self.cx + dx, cy=self.cy + dy)

    def scaled(self, s: float, origin: Point = (0.0, 0.0)) -> 'OrientedBox':
        if not s > 0:
            raise DomainError(f"Scale factor must be positive, got {s}")
        ox, oy = origin
        return OrientedBox(ox + s * (self.cx - ox), oy + s * (self.cy - oy),
                           self.len_long * s, self.len_short * s, self.theta)


@dataclass(frozen=True)
class CropWindow:
    """Square crop. After clamping, padding is only ever added on the right and bottom."""
    x_s: float
    y_s: float
    S: float
    pad_left: float = 0.0
    pad_top: float = 0.0
    pad_right: float = 0.0
    pad_bottom: float = 0.0

    def __post_init__(self):
        if not self.S > 0:
            raise DomainError(f"CropWindow side must be positive, got {self.S}")
        if min(self.pad_left, self.pad_top, self.pad_right, self.pad_bottom) < 0:
            raise DomainError("CropWindow pads must be non-negative")

    @property
    def content_w(self) -> float:
        """Width of the part of the window backed by real image pixels."""
        return self.S - self.pad_left - self.pad_right

    @property
    def content_h(self) -> float:
        return self.S - self.pad_top - self.pad_bottom


@dataclass(frozen=True)
class PromptPoints:
    p1: Point
    c: Point
    p2: Point

    def to_array(self) -> np.ndarray:
        return np.array([self.p1, self.c, self.p2], dtype=np.float64)

    @classmethod
    def from_array(cls, array) -> 'PromptPoints':
        a = np.asarray(array, dtype=np.float64).reshape(3, 2)
        return cls(tuple(a[0].tolist()), tuple(a[1].tolist()), tuple(a[2].tolist()))


@dataclass(frozen=True)
class PromptBundle:
    """Envelope box plus oriented points, in crop coordinates once transformed."""
    box: HBox
    points: PromptPoints

    def to_array(self) -> np.ndarray:
        """(5, 2) array ordered [box-tl, box-br, P1, C, P2]."""
        return np.concatenate([self.box.to_array(), self.points.to_array()], axis=0)


####################################################
# Region-adaptive magnification
####################################################

def region_size(d: float, params: RamParams) -> float:
    """Side of the square crop taken around an object whose envelope's longer side is `d`.

    Small objects (d < m) get a crop k0 times their size; above m the size grows linearly
    so that a d = s_max object is cropped at exactly s_max. Larger objects are clamped to s_max.
    """
    if not (math.isfinite(d) and d > 0):
        raise DomainError(f"Object size must be positive, got {d}")
    if d < params.m:
        return params.k0 * d
    if d > params.s_max:
        logger.debug("Object size %s exceeds s_max=%s, clamping the region", d, params.s_max)
        return float(params.s_max)
    k = params.k
    return k * d + (params.k0 - k) * params.m


def magnification(d: float, params: RamParams) -> float:
    return params.s_in / region_size(d, params)


def crop_window(box: HBox, S: float, a_x: float, a_y: float) -> CropWindow:
    """Places a window of side S so that the box sits at relative position (a_x, a_y) of the free space."""
    for name, a in (('a_x', a_x), ('a_y', a_y)):
        if not 0.0 <= a <= 1.0:
            raise DomainError(f"{name} must be in [0, 1], got {a}")
    return CropWindow(x_s=box.x - a_x * (S - box.w), y_s=box.y - a_y * (S - box.h), S=S)


def _clamp_axis(start: float, side: float, extent: float) -> Tuple[float, float]:
    if side > extent:
        return 0.0, side - extent
    return min(max(start, 0.0), extent - side), 0.0


def clamp_window(win: CropWindow, img_w: float, img_h: float) -> CropWindow:
    """Shifts the window inside the image; when it cannot fit it is pinned at 0 and padded right/bottom."""
    if not (img_w > 0 and img_h > 0):
        raise DomainError(f"Image size must be positive, got {img_w}x{img_h}")
    x_s, pad_right = _clamp_axis(win.x_s, win.S, img_w)
    y_s, pad_bottom = _clamp_axis(win.y_s, win.S, img_h)
    return CropWindow(x_s=x_s, y_s=y_s, S=win.S, pad_right=pad_right, pad_bottom=pad_bottom)


####################################################
# Oriented boxes and prompts
####################################################

def oriented_prompts(obox: OrientedBox) -> PromptPoints:
    """Three points on the principal axis: quarter points P1, P2 around the center C."""
    ux, uy = obox.axis
    quarter = obox.len_long / 4
    return PromptPoints(
        p1=(obox.cx - quarter * ux, obox.cy - quarter * uy),
        c=(obox.cx, obox.cy),
        p2=(obox.cx + quarter * ux, obox.cy + quarter * uy),
    )


def horizontal_envelope(obox: OrientedBox) -> HBox:
    cos_t, sin_t = abs(math.cos(obox.theta)), abs(math.sin(obox.theta))
    half_w = (obox.len_long * cos_t + obox.len_short * sin_t) / 2
    half_h = (obox.len_long * sin_t + obox.len_short * cos_t) / 2
    return HBox(obox.cx - half_w, obox.cy - half_h, 2 * half_w, 2 * half_h)


####################################################
# Crop-space transforms
####################################################

Entity = TypeVar('Entity', HBox, PromptPoints, PromptBundle, np.ndarray)


def _affine(entity: Union[HBox, PromptPoints, PromptBundle, np.ndarray], ox: float, oy: float, scale: float,
            forward: bool):
    def point(p):
        if forward:
            return (p[0] - ox) * scale, (p[1] - oy) * scale
        return p[0] / scale + ox, p[1] / scale + oy

    if isinstance(entity, HBox):
        x, y = point((entity.x, entity.y))
        factor = scale if forward else 1 / scale
        return HBox(x, y, entity.w * factor, entity.h * factor)
    if isinstance(entity, PromptPoints):
        return PromptPoints(point(entity.p1), point(entity.c), point(entity.p2))
    if isinstance(entity, PromptBundle):
        return PromptBundle(_affine(entity.box, ox, oy, scale, forward), _affine(entity.points, ox, oy, scale, forward))
    if isinstance(entity, np.ndarray):
        if entity.shape[-1] != 2:
            raise DomainError(f"Point arrays must have a trailing dimension of 2, got {entity.shape}")
        origin = np.array([ox, oy], dtype=np.float64)
        if forward:
            return (entity.astype(np.float64) - origin) * scale
        return entity.astype(np.float64) / scale + origin
    raise TypeError(f"Cannot transform {type(entity).__name__}")


def to_crop_coords(entity: Entity, win: CropWindow, s_in: float) -> Entity:
    """Translate by (-x_s, -y_s) then scale by s_in / S."""
    return _affine(entity, win.x_s, win.y_s, s_in / win.S, forward=True)


def from_crop_coords(entity: Entity, win: CropWindow, s_in: float) -> Entity:
    return _affine(entity, win.x_s, win.y_s, s_in / win.S, forward=False)
