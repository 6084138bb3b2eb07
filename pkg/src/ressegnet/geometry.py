"""Polygon annotations and their conversion to binary masks.

Annotations are lists of closed vertex rings in pixel coordinates.  A pixel
(row r, col c) belongs to the mask iff its center (c + 0.5, r + 0.5) lies
inside or on the boundary of any ring, using the even-odd rule.  Overlapping
rings union.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class InvalidAnnotationError(ValueError):
    """Raised for rings with fewer than 3 vertices or non-finite coordinates."""


@dataclass(frozen=True)
class PolygonAnnotation:
    """A set of closed polygon rings, each an ordered list of (x, y) vertices."""

    polygons: list[list[tuple[float, float]]] = field(default_factory=list)

    def validate(self) -> None:
        for i, ring in enumerate(self.polygons):
            _check_ring(ring, i)

    @classmethod
    def from_json(cls, text: str) -> "PolygonAnnotation":
        """Parse the annotation JSON: {"polygons": [[[x, y], ...], ...]}.

        Unknown top-level keys are ignored.
        """
        doc = json.loads(text)
        if not isinstance(doc, dict) or "polygons" not in doc:
            raise InvalidAnnotationError("annotation JSON must contain a 'polygons' key")
        try:
            polygons = [[(float(x), float(y)) for x, y in ring] for ring in doc["polygons"]]
        except (TypeError, ValueError) as exc:
            raise InvalidAnnotationError(f"malformed 'polygons' value: {exc}") from exc
        ann = cls(polygons)
        ann.validate()
        return ann

    @classmethod
    def load(cls, path) -> "PolygonAnnotation":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def to_json(self) -> str:
        return json.dumps({"polygons": [[[x, y] for x, y in ring] for ring in self.polygons]})

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def _check_ring(ring, index: int) -> None:
    if len(ring) < 3:
        raise InvalidAnnotationError(f"ring {index}: needs at least 3 vertices, got {len(ring)}")
    for x, y in ring:
        if not (math.isfinite(x) and math.isfinite(y)):
            raise InvalidAnnotationError(f"ring {index}: non-finite vertex ({x}, {y})")


def point_in_polygon(point, ring) -> bool:
    """Even-odd inclusion test; points on the boundary count as inside."""
    _check_ring(ring, 0)
    px, py = float(point[0]), float(point[1])
    inside = False
    n = len(ring)
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        if _on_segment(px, py, x1, y1, x2, y2):
            return True
        if (y1 <= py) != (y2 <= py):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < xint:
                inside = not inside
    return inside


def _on_segment(px, py, x1, y1, x2, y2) -> bool:
    cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    if cross != 0.0:
        return False
    return min(x1, x2) <= px <= max(x1, x2) and min(y1, y2) <= py <= max(y1, y2)


def rasterize_polygons(annotation: PolygonAnnotation, width: int, height: int) -> np.ndarray:
    """Rasterize rings into an (height, width) uint8 mask of {0, 1}.

    Pixel (r, c) is set iff its center (c + 0.5, r + 0.5) is inside any ring;
    overlapping rings union.
    """
    if width < 1 or height < 1:
        raise ValueError(f"mask dimensions must be >= 1, got {width}x{height}")
    mask = np.zeros((height, width), dtype=np.uint8)
    for i, ring in enumerate(annotation.polygons):
        _check_ring(ring, i)
        rasterize_ring_into(mask, ring)
    return mask


def rasterize_ring_into(mask: np.ndarray, ring) -> None:
    """OR a single ring into an existing {0,1} mask, in place."""
    height, width = mask.shape
    vx = np.asarray([v[0] for v in ring], dtype=np.float64)
    vy = np.asarray([v[1] for v in ring], dtype=np.float64)

    # Points outside the ring's bounding box cannot be inside or on it, so the
    # per-pixel test only needs the clipped box.
    c0 = max(int(np.floor(vx.min() - 0.5)), 0)
    c1 = min(int(np.ceil(vx.max() - 0.5)) + 1, width)
    r0 = max(int(np.floor(vy.min() - 0.5)), 0)
    r1 = min(int(np.ceil(vy.max() - 0.5)) + 1, height)
    if c0 >= c1 or r0 >= r1:
        return

    px = np.arange(c0, c1, dtype=np.float64) + 0.5
    py = np.arange(r0, r1, dtype=np.float64) + 0.5
    px = px[None, :]  # broadcast over rows
    py = py[:, None]

    inside = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    on_edge = np.zeros_like(inside)
    x2s = np.roll(vx, -1)
    y2s = np.roll(vy, -1)
    for x1, y1, x2, y2 in zip(vx, vy, x2s, y2s):
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        on_edge |= (
            (cross == 0.0)
            & (px >= min(x1, x2)) & (px <= max(x1, x2))
            & (py >= min(y1, y2)) & (py <= max(y1, y2))
        )
        crossing = (y1 <= py) != (y2 <= py)
        if np.any(crossing):  # implies y1 != y2
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crossing & (px < xint)

    mask[r0:r1, c0:c1] |= (inside | on_edge).astype(np.uint8)
