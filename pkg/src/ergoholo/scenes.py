"""Synthetic scenes used by tests, demos, and the regression runs."""

from __future__ import annotations

import numpy as np

from .incoherent_render import LayeredDepthImage, evenly_spaced_planes

DESK_SHAPE = (256, 256)
DESK_OFFSET = 1.5e-3
DESK_VOLUME = 4e-3
DESK_PLANES = 6


def random_points(n: int = 10, shape=(64, 64), depth_range=(1e-3, 3e-3), channels: int = 1,
                  seed: int = 0, pitch: float = 8e-6, margin: int = 0,
                  min_separation: float = 0.0) -> LayeredDepthImage:
    """``n`` isolated points on a single layer at distinct pixels.

    Points stay ``margin`` pixels away from the frame and at least
    ``min_separation`` pixels apart (rejection sampling), which keeps every
    ray clear of the other points when the separation exceeds the kernel
    diameter.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    picked = []
    for _ in range(10000 * n):
        if len(picked) == n:
            break
        y, x = rng.integers(margin, h - margin), rng.integers(margin, w - margin)
        if all(np.hypot(y - py, x - px) >= max(min_separation, 1) for py, px in picked):
            picked.append((y, x))
    if len(picked) < n:
        raise ValueError("cannot place the requested points with this separation")
    ys, xs = np.array(picked).T
    color = np.zeros((h, w, channels))
    depth = np.full((h, w), np.inf)
    color[ys, xs] = rng.uniform(0.2, 1.0, size=(n, channels))
    depth[ys, xs] = rng.uniform(*depth_range, size=n)
    return LayeredDepthImage.from_rgbd(color, depth, pitch, depth_range[1] - depth_range[0])


def shadow_scene(shape=(40, 40), occluder_half=(4, 4), z_front=1.0e-3, z_back=3.0e-3,
                 pitch: float = 8e-6, channels: int = 1, volume_depth=None) -> LayeredDepthImage:
    """Opaque square in front of a uniform background plane.

    Layer 0 holds the square (centered, half-sizes ``occluder_half`` in
    pixels) and the visible background; layer 1 holds the background hidden
    behind the square.
    """
    h, w = shape
    cy, cx = h // 2, w // 2
    hy, hx = occluder_half
    yy, xx = np.mgrid[0:h, 0:w]
    square = (abs(yy - cy) <= hy) & (abs(xx - cx) <= hx)
    depth0 = np.where(square, z_front, z_back)
    depth1 = np.where(square, z_back, np.inf)
    color = np.ones((2, h, w, channels))
    valid = np.stack([np.ones((h, w), bool), square])
    volume = volume_depth if volume_depth is not None else z_back - z_front
    return LayeredDepthImage(color, np.stack([depth0, depth1]), valid, pitch, volume)


def _texture(shape, rng) -> np.ndarray:
    """Smooth band-limited texture in ``[0.15, 1]`` with some sharp edges."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    t = np.zeros(shape)
    for _ in range(6):
        fx, fy = rng.uniform(2, 14, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        t += np.cos(2 * np.pi * (fx * xx + fy * yy) + ph)
    t = (t - t.min()) / (np.ptp(t) + 1e-12)
    stripes = ((xx * 8).astype(int) + (yy * 8).astype(int)) % 2
    return 0.15 + 0.85 * (0.7 * t + 0.3 * stripes)


def desk_scene(shape=DESK_SHAPE, channels: int = 3, seed: int = 0,
               pitch: float = 8e-6) -> LayeredDepthImage:
    """Two-layer desk scene: tilted textured background plus a foreground disk.

    The background spans 4 to 5 mm along x; a bright disk at 2 mm covers
    the middle of the frame and hides part of the background, which is
    kept as a second layer.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    bg_depth = 4.0e-3 + 1.0e-3 * xx / max(w - 1, 1)
    tint = np.array([1.0, 0.85, 0.7])[:channels] if channels <= 3 else np.ones(channels)
    bg = _texture(shape, rng)[..., None] * tint
    disk = (yy - 0.45 * h) ** 2 + (xx - 0.4 * w) ** 2 <= (0.22 * min(h, w)) ** 2
    rings = 0.6 + 0.4 * np.cos(np.hypot(yy - 0.45 * h, xx - 0.4 * w) / 3.0) ** 2
    fg = rings[..., None] * np.array([0.6, 0.9, 1.0])[:channels] if channels <= 3 else rings[..., None]
    color0 = np.where(disk[..., None], fg, bg)
    depth0 = np.where(disk, 2.0e-3, bg_depth)
    color1 = np.where(disk[..., None], bg, 0.0)
    depth1 = np.where(disk, bg_depth, np.inf)
    valid = np.stack([np.ones(shape, bool), disk])
    return LayeredDepthImage(np.stack([color0, color1]), np.stack([depth0, depth1]), valid,
                             pitch, DESK_VOLUME)


def desk_planes(count: int = DESK_PLANES) -> np.ndarray:
    """Recording planes spanning the desk scene volume."""
    return evenly_spaced_planes(DESK_VOLUME, count, DESK_OFFSET)
