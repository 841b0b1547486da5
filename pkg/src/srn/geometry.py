"""Face-shape data model, landmark grouping, patch extraction, occlusions.

Conventions used throughout the package:

* a landmark is an (x, y) pair in pixels, x = column, y = row;
* images are float arrays of shape (H, W, C) with values in [0, 1];
* landmark indices follow the 68-point iBUG semantic order: jaw 0-16,
  brows 17-26, nose 27-35, eyes 36-47, mouth 48-67 (0-based).

All functions here are pure; none mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInput

# Semantic index ranges (0-based iBUG order).
JAW = tuple(range(0, 17))
BROWS = tuple(range(17, 27))
NOSE = tuple(range(27, 36))
EYES = tuple(range(36, 48))
MOUTH = tuple(range(48, 68))
LEFT_EYE = tuple(range(36, 42))
RIGHT_EYE = tuple(range(42, 48))
OUTER_EYE_CORNERS = (36, 45)

GROUP_ORDER = ("eyes", "brows", "nose", "mouth", "left_cheek", "right_cheek")
NEIGHBORHOOD_ORDER = ("ocular", "snout", "cheek")


@dataclass(frozen=True)
class FaceShape:
    """Ordered landmark coordinates, shape (N, 2) float64."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise InvalidInput(f"face shape must be (N>=2, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("face shape contains non-finite coordinates")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def shifted(self, dx: float, dy: float) -> "FaceShape":
        return FaceShape(self.points + np.array([dx, dy]))


@dataclass(frozen=True)
class GroupSchema:
    """Two-level landmark partition: three neighborhoods over six groups."""

    neighborhoods: dict[str, np.ndarray]
    groups: dict[str, np.ndarray]
    parent: dict[str, str]

    def __post_init__(self):
        object.__setattr__(
            self, "neighborhoods",
            {k: np.sort(np.asarray(v, dtype=np.intp)) for k, v in self.neighborhoods.items()},
        )
        object.__setattr__(
            self, "groups",
            {k: np.sort(np.asarray(v, dtype=np.intp)) for k, v in self.groups.items()},
        )
        self.validate()

    def validate(self) -> None:
        if set(self.groups) != set(GROUP_ORDER):
            raise InvalidInput(f"groups must be exactly {GROUP_ORDER}")
        if set(self.neighborhoods) != set(NEIGHBORHOOD_ORDER):
            raise InvalidInput(f"neighborhoods must be exactly {NEIGHBORHOOD_ORDER}")
        joined = np.concatenate([self.groups[g] for g in GROUP_ORDER])
        if len(np.unique(joined)) != len(joined):
            raise InvalidInput("group index sets overlap")
        if not np.array_equal(np.sort(joined), np.arange(self.num_landmarks)):
            raise InvalidInput("groups do not cover 0..N-1")
        for nb in NEIGHBORHOOD_ORDER:
            children = [g for g in GROUP_ORDER if self.parent[g] == nb]
            if len(children) != 2:
                raise InvalidInput(f"neighborhood {nb} must have exactly two child groups")
            union = np.sort(np.concatenate([self.groups[c] for c in children]))
            if not np.array_equal(union, self.neighborhoods[nb]):
                raise InvalidInput(f"neighborhood {nb} is not the union of its children")

    @property
    def num_landmarks(self) -> int:
        return sum(len(v) for v in self.groups.values())

    def sibling(self, group: str) -> str:
        nb = self.parent[group]
        for other in GROUP_ORDER:
            if other != group and self.parent[other] == nb:
                return other
        raise InvalidInput(f"group {group} has no sibling")


@dataclass(frozen=True)
class PatchSet:
    """Shape-indexed crops: (N, P, P, C) array plus the indexing shape."""

    patches: np.ndarray
    source_shape: FaceShape

    def __post_init__(self):
        if self.patches.ndim != 4 or self.patches.shape[0] != self.source_shape.n:
            raise InvalidInput(f"patch array shape {self.patches.shape} does not match shape")

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]


@dataclass(frozen=True)
class OcclusionSpec:
    """A noise box centered on one landmark."""

    center_landmark: int
    half_extent: float
    noise_seed: int


def validate_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise InvalidInput(f"image must be (H, W, C) with C in {{1, 3}}, got {image.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise InvalidInput("image values must be finite and in [0, 1]")
    return img


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(values) + 0.5).astype(np.intp)


def mean_shape(shapes: Sequence[FaceShape]) -> FaceShape:
    """Coordinate-wise arithmetic mean of same-length shapes."""
    shapes = list(shapes)
    if not shapes:
        raise InvalidInput("mean_shape of an empty list")
    n = shapes[0].n
    if any(s.n != n for s in shapes):
        raise InvalidInput("mean_shape requires equal landmark counts")
    stacked = np.stack([s.points for s in shapes])
    return FaceShape(stacked.mean(axis=0))


def inter_ocular_distance(shape: FaceShape) -> float:
    """Distance between the outer eye corners (indices 36 and 45)."""
    a, b = OUTER_EYE_CORNERS
    if shape.n <= max(a, b):
        raise InvalidInput(f"inter-ocular distance needs at least {max(a, b) + 1} landmarks")
    return float(np.linalg.norm(shape.points[a] - shape.points[b]))


def extract_patches(image: np.ndarray, shape: FaceShape, patch_size: int) -> PatchSet:
    """Crop one patch_size x patch_size window centered at each rounded
    landmark; regions outside the image are zero-filled."""
    if patch_size < 1:
        raise InvalidInput("patch_size must be >= 1")
    img = validate_image(image)
    h, w, _ = img.shape
    half = patch_size // 2
    cx = _round_half_up(shape.points[:, 0])
    cy = _round_half_up(shape.points[:, 1])
    offs = np.arange(patch_size, dtype=np.intp) - half
    rows = cy[:, None] + offs[None, :]  # (N, P)
    cols = cx[:, None] + offs[None, :]
    row_ok = (rows >= 0) & (rows < h)
    col_ok = (cols >= 0) & (cols < w)
    rc = np.clip(rows, 0, h - 1)
    cc = np.clip(cols, 0, w - 1)
    patches = img[rc[:, :, None], cc[:, None, :], :]
    valid = (row_ok[:, :, None] & col_ok[:, None, :])[..., None]
    patches = np.where(valid, patches, 0.0)
    return PatchSet(patches, shape)


def partition(n: int) -> GroupSchema:
    """The default 68-landmark schema; other sizes need an explicit schema."""
    if n != 68:
        raise InvalidInput(f"no default group schema for N={n}; supply one explicitly")
    groups = {
        "eyes": np.array(EYES),
        "brows": np.array(BROWS),
        "nose": np.array(NOSE),
        "mouth": np.array(MOUTH),
        # chin point 8 goes to the left cheek to realize the 9/8 split
        "left_cheek": np.arange(0, 9),
        "right_cheek": np.arange(9, 17),
    }
    parent = {
        "eyes": "ocular",
        "brows": "ocular",
        "nose": "snout",
        "mouth": "snout",
        "left_cheek": "cheek",
        "right_cheek": "cheek",
    }
    neighborhoods = {
        "ocular": np.concatenate([groups["eyes"], groups["brows"]]),
        "snout": np.concatenate([groups["nose"], groups["mouth"]]),
        "cheek": np.concatenate([groups["left_cheek"], groups["right_cheek"]]),
    }
    return GroupSchema(neighborhoods=neighborhoods, groups=groups, parent=parent)


def default_occlusion_half_extent(shape: FaceShape, scale: float = 0.15) -> float:
    return scale * inter_ocular_distance(shape)


def insert_occlusion(image: np.ndarray, spec: OcclusionSpec, shape: FaceShape) -> np.ndarray:
    """Replace the box around one landmark with i.i.d. uniform [0, 1) noise.

    The box spans [c - r, c + r] per axis (r = rounded half_extent), clamped
    to the image; every pixel outside the box is bit-identical to the input.
    """
    img = validate_image(image)
    if not 0 <= spec.center_landmark < shape.n:
        raise InvalidInput(f"center_landmark {spec.center_landmark} out of range")
    if spec.half_extent < 0:
        raise InvalidInput("half_extent must be >= 0")
    h, w, c = img.shape
    cx, cy = _round_half_up(shape.points[spec.center_landmark])
    r = int(np.floor(spec.half_extent + 0.5))
    y0, y1 = max(0, cy - r), min(h - 1, cy + r)
    x0, x1 = max(0, cx - r), min(w - 1, cx + r)
    out = img.copy()
    if y0 > y1 or x0 > x1:
        return out  # box entirely outside the image
    rng = np.random.default_rng(spec.noise_seed)
    out[y0:y1 + 1, x0:x1 + 1, :] = rng.uniform(0.0, 1.0, size=(y1 - y0 + 1, x1 - x0 + 1, c))
    return out


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices in CCW order."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def points_in_convex_hull(xs: np.ndarray, ys: np.ndarray, hull: np.ndarray,
                          tol: float = 1e-9) -> np.ndarray:
    """Inclusive point-in-convex-polygon test for a CCW hull."""
    inside = np.ones(xs.shape, dtype=bool)
    m = len(hull)
    for i in range(m):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % m]
        cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
        inside &= cross >= -tol
    return inside


def fill_convex(image: np.ndarray, points: np.ndarray, value: float) -> np.ndarray:
    """Set pixels whose centers lie inside the convex hull of ``points``."""
    img = image.copy()
    h, w, _ = img.shape
    hull = _convex_hull(points)
    if len(hull) < 3:
        return img
    x0 = max(0, int(np.floor(hull[:, 0].min())))
    x1 = min(w - 1, int(np.ceil(hull[:, 0].max())))
    y0 = max(0, int(np.floor(hull[:, 1].min())))
    y1 = min(h - 1, int(np.ceil(hull[:, 1].max())))
    if x0 > x1 or y0 > y1:
        return img
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    mask = points_in_convex_hull(xs.astype(np.float64), ys.astype(np.float64), hull)
    region = img[y0:y1 + 1, x0:x1 + 1, :]
    region[mask] = value
    return img


def synthesize_mask(image: np.ndarray, shape: FaceShape, color: float = 0.95) -> np.ndarray:
    """Paint a surgical-mask style cover: the convex hull of jaw landmarks
    1..15 plus the nose-bridge landmark 27, filled with ``color``.

    Landmark annotations are deliberately left untouched.
    """
    if shape.n != 68:
        raise InvalidInput("mask synthesis requires the 68-landmark layout")
    if not 0.0 <= color <= 1.0:
        raise InvalidInput("mask color must be in [0, 1]")
    img = validate_image(image)
    anchors = np.vstack([shape.points[1:16], shape.points[27][None, :]])
    return fill_convex(img, anchors, color)
