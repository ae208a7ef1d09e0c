"""Gaze-map construction and masking.

Gaze maps are plain (H, W) float arrays. Ground-truth targets are isotropic
Gaussians centered on recorded gaze points, with the standard deviation
expressed as one visual degree converted to pixels from the recording
geometry. Predicted maps are thinned to their strongest cells with
``percentile_mask`` before reaching the action network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_KEEP_FRACTION = 0.10


@dataclass(frozen=True)
class ScreenGeometry:
    """Physical recording setup used to convert visual degrees to pixels."""

    screen_width_cm: float
    screen_height_cm: float
    screen_width_px: int
    screen_height_px: int
    viewing_distance_cm: float

    def __post_init__(self):
        for name in (
            "screen_width_cm",
            "screen_height_cm",
            "screen_width_px",
            "screen_height_px",
            "viewing_distance_cm",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "screen_width_cm": self.screen_width_cm,
            "screen_height_cm": self.screen_height_cm,
            "screen_width_px": self.screen_width_px,
            "screen_height_px": self.screen_height_px,
            "viewing_distance_cm": self.viewing_distance_cm,
        }

    @staticmethod
    def from_dict(d: dict) -> "ScreenGeometry":
        return ScreenGeometry(
            screen_width_cm=float(d["screen_width_cm"]),
            screen_height_cm=float(d["screen_height_cm"]),
            screen_width_px=int(d["screen_width_px"]),
            screen_height_px=int(d["screen_height_px"]),
            viewing_distance_cm=float(d["viewing_distance_cm"]),
        )


# The Atari-HEAD recording setup: 64.6 x 40.0 cm screen at 1280 x 840,
# viewed from 78.7 cm.
ATARI_HEAD_GEOMETRY = ScreenGeometry(
    screen_width_cm=64.6,
    screen_height_cm=40.0,
    screen_width_px=1280,
    screen_height_px=840,
    viewing_distance_cm=78.7,
)


def visual_degree_to_pixels(geom: ScreenGeometry, target_width_px: float) -> float:
    """Pixels subtended by one visual degree at the target horizontal resolution."""
    cm_per_degree = math.tan(math.radians(1.0)) * geom.viewing_distance_cm
    return cm_per_degree * target_width_px / geom.screen_width_cm


def gaussian_gaze_target(
    points: list[tuple[float, float]],
    sigma_px: float,
    shape: tuple[int, int] = (84, 84),
) -> np.ndarray:
    """Normalized mixture of isotropic Gaussians centered at (x, y) pixel points.

    An empty point list yields the uniform map (max-entropy fallback for
    frames with no recorded gaze).
    """
    if sigma_px <= 0:
        raise ValueError("sigma_px must be positive")
    h, w = shape
    if h <= 0 or w <= 0:
        raise ValueError("shape extents must be positive")
    if not points:
        return np.full((h, w), 1.0 / (h * w))
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    acc = np.zeros((h, w), dtype=np.float64)
    inv = 1.0 / (2.0 * sigma_px * sigma_px)
    for px, py in points:
        acc += np.exp(-((xs - float(px)) ** 2 + (ys - float(py)) ** 2) * inv)
    total = acc.sum()
    if total <= 0:
        return np.full((h, w), 1.0 / (h * w))
    return acc / total


def percentile_mask(gaze_map: np.ndarray, keep_fraction: float = DEFAULT_KEEP_FRACTION) -> np.ndarray:
    """Keep the ceil(keep_fraction * N) largest cells, zero the rest, rescale max to 1.

    Ties are broken by row-major index (earlier cells win), which makes the
    survivor count exact and the operation idempotent. An all-zero map is
    returned unchanged.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    flat = np.asarray(gaze_map, dtype=gaze_map.dtype).reshape(-1)
    n = flat.size
    m = int(math.ceil(keep_fraction * n))
    # Stable sort on negated values: descending by value, ascending by index on ties.
    order = np.argsort(-flat, kind="stable")
    out = np.zeros_like(flat)
    keep = order[:m]
    out[keep] = flat[keep]
    peak = out.max()
    if peak > 0:
        out = out / peak
    return out.reshape(gaze_map.shape)


def percentile_mask_batch(maps: np.ndarray, keep_fraction: float = DEFAULT_KEEP_FRACTION) -> np.ndarray:
    """Vectorized percentile_mask over (N, H, W)."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n_maps = maps.shape[0]
    flat = maps.reshape(n_maps, -1)
    n = flat.shape[1]
    m = int(math.ceil(keep_fraction * n))
    order = np.argsort(-flat, axis=1, kind="stable")
    out = np.zeros_like(flat)
    rows = np.arange(n_maps)[:, None]
    keep = order[:, :m]
    out[rows, keep] = flat[rows, keep]
    peaks = out.max(axis=1)
    scale = np.where(peaks > 0, peaks, 1.0)
    out = out / scale[:, None]
    return out.reshape(maps.shape)
