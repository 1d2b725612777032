"""Incoherent focal-stack rendering from layered depth images.

Every valid LDI sample is treated as an incoherent point emitter. Its
contribution to a recording plane is the intensity point-spread function of
band-limited angular-spectrum defocus (``|F^-1{H}|^2``), clipped by a binary
spatial mask and normalized to unit sum, and gated per target sample by a
ray-traced visibility test against the LDI surfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .wave_optics import FrequencyGrid, KernelCache, coherent_kernel, ifft2

DEFAULT_PLANE_COUNT = 32


@dataclass
class LayeredDepthImage:
    """Multi-layer RGB-D scene, layers ordered front (small depth) to back.

    Attributes:
        color: ``(L, H, W, C)`` linear, non-negative intensities.
        depth: ``(L, H, W)`` depth in meters measured from the hologram plane.
        valid: ``(L, H, W)`` boolean validity of each layer sample.
        pitch: lateral sample spacing in meters.
        volume_depth: scene thickness used for the occlusion tolerance.
    """

    color: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    pitch: float = 8e-6
    volume_depth: Optional[float] = None

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=float)
        self.depth = np.asarray(self.depth, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.color.ndim == 3:
            # (L, H, W) single-channel
            self.color = self.color[..., None]
        if self.color.ndim != 4 or self.color.shape[:3] != self.depth.shape:
            raise ValueError(f"color {self.color.shape} and depth {self.depth.shape} disagree")
        if self.valid.shape != self.depth.shape:
            raise ValueError("valid mask must match depth shape")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        if not self.valid.any():
            raise ValueError("LDI has no valid samples")

    @classmethod
    def from_rgbd(cls, color, depth, pitch=8e-6, volume_depth=None) -> "LayeredDepthImage":
        """Single-layer LDI from an RGB-D image."""
        color = np.asarray(color, dtype=float)
        depth = np.asarray(depth, dtype=float)
        return cls(color[None], depth[None], np.isfinite(depth)[None], pitch, volume_depth)

    @property
    def num_layers(self) -> int:
        return self.depth.shape[0]

    @property
    def shape(self) -> tuple:
        return self.depth.shape[1:]

    @property
    def channels(self) -> int:
        return self.color.shape[-1]

    def validate(self) -> None:
        """Check the numeric invariants (finite data, front-to-back ordering)."""
        v = self.valid
        if np.isnan(self.depth[v]).any() or not np.isfinite(self.depth[v]).all():
            raise ValueError("LDI contains non-finite depths on valid samples")
        if np.isnan(self.color[v]).any() or not np.isfinite(self.color[v]).all():
            raise ValueError("LDI contains non-finite colors on valid samples")
        if (self.color[v] < 0).any():
            raise ValueError("LDI colors must be non-negative")
        # strictly increasing depth among valid layers of each pixel
        d = np.where(v, self.depth, np.nan)
        for a in range(self.num_layers):
            for b in range(a + 1, self.num_layers):
                both = v[a] & v[b]
                if (d[b][both] <= d[a][both]).any():
                    raise ValueError(f"layer {b} is not strictly behind layer {a}")

    def points(self):
        """Valid samples as ``(layer, y, x, depth, color)`` arrays."""
        layer, y, x = np.nonzero(self.valid)
        return layer, y, x, self.depth[layer, y, x], self.color[layer, y, x]


@dataclass
class FocalStack:
    """Images at ``plane_depths``; ``planes`` has shape ``(D, H, W, C)``."""

    plane_depths: np.ndarray
    planes: np.ndarray
    wavelengths: tuple = (632e-9, 520e-9, 450e-9)
    pitch: float = 8e-6
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.plane_depths = np.atleast_1d(np.asarray(self.plane_depths, dtype=float))
        self.planes = np.asarray(self.planes)
        if self.planes.ndim == 3:
            self.planes = self.planes[..., None]
        self.wavelengths = tuple(float(w) for w in np.atleast_1d(self.wavelengths))
        if len(self.plane_depths) < 1:
            raise ValueError("focal stack needs at least one plane")
        if self.planes.shape[0] != len(self.plane_depths):
            raise ValueError("number of planes and plane depths differ")
        if self.planes.shape[-1] != len(self.wavelengths):
            raise ValueError("channel count and wavelength count differ")
        if len(self.plane_depths) > 1 and not np.all(np.diff(self.plane_depths) > 0):
            raise ValueError("plane depths must be strictly increasing")
        if not np.all(np.isfinite(self.planes)) or (self.planes < 0).any():
            raise ValueError("focal stack values must be finite and non-negative")

    @property
    def num_planes(self) -> int:
        return len(self.plane_depths)

    def subset(self, indices: Sequence[int]) -> "FocalStack":
        idx = list(indices)
        return FocalStack(self.plane_depths[idx], self.planes[idx], self.wavelengths,
                          self.pitch, dict(self.metadata))

    def channel(self, c: int) -> "FocalStack":
        return FocalStack(self.plane_depths, self.planes[..., c:c + 1], (self.wavelengths[c],),
                          self.pitch, dict(self.metadata))


@dataclass(frozen=True)
class MaskSpec:
    """Spatial mask applied to the incoherent kernel.

    ``kind="circular"`` clips the kernel to a disk of radius
    ``|dz| * tan(max_angle)``; ``max_angle=None`` selects the
    diffraction-limited angle ``asin(lambda / (2 p))``. ``kind="none"``
    keeps the unmasked PSF on a grid ``margin`` samples wider than that disk.
    """

    kind: str = "circular"
    max_angle: Optional[float] = None
    margin: int = 2

    def __post_init__(self):
        if self.kind not in ("circular", "none"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.max_angle is not None and not 0 < self.max_angle < np.pi / 2:
            raise ValueError("max_angle must lie in (0, pi/2)")

    def angle(self, wavelength: float, pitch: float) -> float:
        if self.max_angle is not None:
            return self.max_angle
        return diffraction_angle(wavelength, pitch)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "max_angle": self.max_angle, "margin": self.margin}


@dataclass(frozen=True)
class IncoherentKernel:
    delta_depth: float
    wavelength: float
    values: np.ndarray
    support_radius: float

    @property
    def half_width(self) -> int:
        return self.values.shape[0] // 2


def diffraction_angle(wavelength: float, pitch: float) -> float:
    """Largest angle representable at sampling pitch ``pitch``: ``asin(lambda/(2p))``."""
    return math.asin(min(1.0, wavelength / (2 * pitch)))


def blur_radius(delta_depth: float, max_angle: float) -> float:
    """Geometric defocus blur radius in meters."""
    return abs(delta_depth) * math.tan(max_angle)


def kernel_half_width(delta_depth: float, wavelength: float, pitch: float, mask: MaskSpec) -> int:
    r = blur_radius(delta_depth, mask.angle(wavelength, pitch)) / pitch
    h = int(math.floor(r + 1e-9))
    return h if mask.kind == "circular" else h + mask.margin


def circular_mask(delta_depth: float, max_angle: float, pitch: float, half_width: int) -> np.ndarray:
    """Rasterized disk of radius ``|dz| tan(max_angle)`` on a ``(2h+1)^2`` grid.

    A sample is inside when its center lies within the radius, so ``dz = 0``
    yields a single-sample delta. Returns all ones when the disk covers the grid.
    """
    if not 0 < max_angle < np.pi / 2:
        raise ValueError("max_angle must lie in (0, pi/2)")
    r = blur_radius(delta_depth, max_angle) / pitch
    ax = np.arange(-half_width, half_width + 1)
    return (ax[None, :] ** 2 + ax[:, None] ** 2) <= r ** 2 + 1e-9


def coherent_psf_intensity(delta_depth: float, wavelength: float, pitch: float, n: int) -> np.ndarray:
    """Centered ``|F^-1{H}|^2`` of a point defocused by ``delta_depth`` on an odd ``n`` grid."""
    if n % 2 == 0:
        raise ValueError("PSF grid size must be odd")
    h = coherent_kernel(FrequencyGrid((n, n), pitch), wavelength, delta_depth).values
    psf = np.abs(ifft2(h)) ** 2
    return np.fft.fftshift(psf)


def incoherent_kernel(point_depth: float, plane_depth: float, wavelength: float, pitch: float,
                      mask: MaskSpec = MaskSpec(), half_width: Optional[int] = None,
                      pad_factor: int = 2) -> IncoherentKernel:
    """Unit-sum incoherent kernel for a point at ``point_depth`` seen at ``plane_depth``.

    The PSF is evaluated on a grid ``pad_factor`` times wider than the kernel
    support (to keep circular wrap-around out of the support) and cropped.

    Raises:
        ValueError: if ``half_width`` is too small for the mask support.
    """
    dz = float(point_depth) - float(plane_depth)
    needed = kernel_half_width(dz, wavelength, pitch, mask)
    if half_width is None:
        half_width = needed
    elif half_width < needed:
        raise ValueError(f"kernel grid half-width {half_width} smaller than mask support {needed}")
    n = 2 * half_width + 1
    n_fft = max(pad_factor * n, n) | 1
    psf = coherent_psf_intensity(dz, wavelength, pitch, n_fft)
    c = n_fft // 2
    values = psf[c - half_width:c + half_width + 1, c - half_width:c + half_width + 1]
    if mask.kind == "circular":
        values = values * circular_mask(dz, mask.angle(wavelength, pitch), pitch, half_width)
    total = values.sum()
    if not total > 0:
        raise ValueError("kernel has no energy inside the mask")
    values = values / total
    radius = blur_radius(dz, mask.angle(wavelength, pitch)) / pitch
    return IncoherentKernel(dz, float(wavelength), values, radius)


def evenly_spaced_planes(volume_depth: float, count: int = DEFAULT_PLANE_COUNT,
                         offset: float = 0.0) -> np.ndarray:
    """``count`` recording planes spread evenly over ``[offset, offset + volume_depth]``."""
    if count == 1:
        return np.array([offset + volume_depth / 2])
    return offset + np.linspace(0.0, volume_depth, count)


def occlusion_tolerance(volume_depth: float, num_planes: int) -> float:
    """Quarter of the inter-plane spacing."""
    return volume_depth / (4.0 * max(num_planes, 1))


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


def trace_visibility(ldi: LayeredDepthImage, source_pixel, source_layer: int, target_sample,
                     plane_depth: float, eps: float) -> int:
    """1 if the ray from an LDI point to a plane sample is unobstructed, else 0.

    The ray runs from the source pixel at its stored depth to the target pixel
    at ``plane_depth``. It is sampled once per pixel column crossed (steps of
    one pixel along the dominant lateral axis); each step covers a depth
    interval, and a valid LDI facet in that pixel whose depth falls in the
    interval (widened by ``eps``) blocks the ray. Facets within ``eps`` of the
    source depth never block, which prevents self-occlusion.
    """
    sy, sx = source_pixel
    ty, tx = target_sample
    if not ldi.valid[source_layer, sy, sx]:
        raise ValueError("source point is not valid")
    zs = float(ldi.depth[source_layer, sy, sx])
    zk = float(plane_depth)
    h, w = ldi.shape
    dy, dx = ty - sy, tx - sx
    steps = max(abs(dy), abs(dx))
    samples = [0] if steps == 0 else range(steps + 1)
    for i in samples:
        if steps == 0:
            a_lo, a_hi = 0.0, 1.0
            py, px = sy, sx
        else:
            a = i / steps
            a_lo, a_hi = max(0.0, (i - 0.5) / steps), min(1.0, (i + 0.5) / steps)
            py, px = _round(sy + a * dy), _round(sx + a * dx)
        if not (0 <= py < h and 0 <= px < w):
            continue
        z1, z2 = zs + a_lo * (zk - zs), zs + a_hi * (zk - zs)
        lo, hi = min(z1, z2) - eps, max(z1, z2) + eps
        for layer in range(ldi.num_layers):
            if not ldi.valid[layer, py, px]:
                continue
            d = float(ldi.depth[layer, py, px])
            if abs(d - zs) > eps and lo <= d <= hi:
                return 0
    return 1


def _ray_table(half_width: int):
    """Per-offset ray samples: arrays (offset_index, dy, dx, a_lo, a_hi)."""
    rows = []
    ax = range(-half_width, half_width + 1)
    n = 2 * half_width + 1
    for oy in ax:
        for ox in ax:
            idx = (oy + half_width) * n + (ox + half_width)
            steps = max(abs(oy), abs(ox))
            if steps == 0:
                rows.append((idx, 0, 0, 0.0, 1.0))
                continue
            for i in range(steps + 1):
                a = i / steps
                rows.append((idx, int(np.floor(a * oy + 0.5)), int(np.floor(a * ox + 0.5)),
                             max(0.0, (i - 0.5) / steps), min(1.0, (i + 0.5) / steps)))
    t = np.array(rows, dtype=float)
    return t[:, 0].astype(int), t[:, 1].astype(int), t[:, 2].astype(int), t[:, 3], t[:, 4]


def _padded_depths(ldi: LayeredDepthImage, pad: int) -> np.ndarray:
    """Layer depths with invalid samples (and a ``pad`` border) set to NaN."""
    d = np.where(ldi.valid, ldi.depth, np.nan)
    return np.pad(d, ((0, 0), (pad, pad), (pad, pad)), constant_values=np.nan)


def _visibility(depths_padded, pad, ys, xs, zs, zk, eps, half_width, ray_table):
    """Visibility ``(n, (2h+1)^2)`` for points at ``(ys, xs, zs)`` towards plane ``zk``."""
    n_off = (2 * half_width + 1) ** 2
    vis = np.ones((len(ys), n_off), dtype=bool)
    if len(ys) == 0:
        return vis
    zlo = np.minimum(zs, zk) - eps
    zhi = np.maximum(zs, zk) + eps
    # cheap pre-pass: points with no candidate occluder anywhere in the window are fully visible
    candidate = np.zeros(len(ys), dtype=bool)
    rng = range(-half_width, half_width + 1)
    for oy in rng:
        for ox in rng:
            d = depths_padded[:, ys + oy + pad, xs + ox + pad]
            hit = (np.abs(d - zs) > eps) & (d >= zlo) & (d <= zhi)
            candidate |= hit.any(axis=0)
    sel = np.nonzero(candidate)[0]
    if len(sel) == 0:
        return vis
    cy, cx, cz = ys[sel], xs[sel], zs[sel]
    span = zk - cz
    blocked = np.zeros((len(sel), n_off), dtype=bool)
    off_idx, qy, qx, a_lo, a_hi = ray_table
    for j in range(len(off_idx)):
        d = depths_padded[:, cy + qy[j] + pad, cx + qx[j] + pad]
        z1 = cz + a_lo[j] * span
        z2 = cz + a_hi[j] * span
        lo = np.minimum(z1, z2) - eps
        hi = np.maximum(z1, z2) + eps
        hit = (np.abs(d - cz) > eps) & (d >= lo) & (d <= hi)
        blocked[:, off_idx[j]] |= hit.any(axis=0)
    vis[sel] = ~blocked
    return vis


def render_focal_stack(ldi: LayeredDepthImage, plane_depths, wavelengths=(632e-9, 520e-9, 450e-9),
                       mask: MaskSpec = MaskSpec(), eps: Optional[float] = None,
                       occlusion: bool = True, cache: Optional[KernelCache] = None,
                       chunk: int = 4096) -> FocalStack:
    """Render the incoherent focal stack of ``ldi`` at ``plane_depths``.

    Each plane is the sum over valid LDI points of ``color * kernel *
    visibility``. Depths are used per point without binning. Light leaving
    the image frame is discarded.

    Args:
        ldi: scene; its channel count must match ``wavelengths``.
        plane_depths: recording plane depths in meters.
        wavelengths: one wavelength per color channel.
        mask: spatial kernel mask.
        eps: occlusion depth tolerance; defaults to a quarter of the
            inter-plane spacing of ``ldi.volume_depth`` over the plane count.
        occlusion: disable to skip ray tracing (every ray visible).
        cache: optional kernel cache shared across calls.
    """
    ldi.validate()
    wavelengths = tuple(float(w) for w in np.atleast_1d(wavelengths))
    if ldi.channels != len(wavelengths):
        raise ValueError(f"LDI has {ldi.channels} channels but {len(wavelengths)} wavelengths given")
    plane_depths = np.atleast_1d(np.asarray(plane_depths, dtype=float))
    if np.isnan(plane_depths).any():
        raise ValueError("plane depths contain NaN")
    cache = KernelCache() if cache is None else cache
    _, ys, xs, zs, colors = ldi.points()
    if eps is None:
        volume = ldi.volume_depth
        if volume is None:
            volume = max(float(np.ptp(zs)), float(np.ptp(plane_depths)), ldi.pitch)
        eps = occlusion_tolerance(volume, len(plane_depths))
    h, w = ldi.shape
    pitch = ldi.pitch
    out = np.zeros((len(plane_depths), h, w, len(wavelengths)))

    for k, zk in enumerate(plane_depths):
        dzs = zs - zk
        hw = np.zeros((len(wavelengths), len(zs)), dtype=int)
        for c, lam in enumerate(wavelengths):
            ang = mask.angle(lam, pitch)
            r = np.abs(dzs) * math.tan(ang) / pitch
            hw[c] = np.floor(r + 1e-9).astype(int) + (0 if mask.kind == "circular" else mask.margin)
        hmax = hw.max(axis=0)
        for hb in np.unique(hmax):
            bucket = np.nonzero(hmax == hb)[0]
            n_side = 2 * hb + 1
            table = _ray_table(hb) if occlusion else None
            depths_padded = _padded_depths(ldi, hb) if occlusion else None
            ax = np.arange(-hb, hb + 1)
            oy = np.repeat(ax, n_side)
            ox = np.tile(ax, n_side)
            for start in range(0, len(bucket), chunk):
                idx = bucket[start:start + chunk]
                if occlusion:
                    vis = _visibility(depths_padded, hb, ys[idx], xs[idx], zs[idx], zk, eps, hb, table)
                else:
                    vis = np.ones((len(idx), n_side * n_side), dtype=bool)
                ty = ys[idx, None] + oy[None, :]
                tx = xs[idx, None] + ox[None, :]
                inside = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
                flat = np.where(inside, ty * w + tx, 0)
                for c, lam in enumerate(wavelengths):
                    uz, first, inv = np.unique(zs[idx], return_index=True, return_inverse=True)
                    hw_c = hw[c, idx]
                    table_k = np.stack([
                        _embedded_kernel(cache, z, zk, lam, pitch, mask, int(hw_c[f]), hb)
                        for z, f in zip(uz, first)])
                    kern = table_k[inv]
                    weights = kern * vis * inside * colors[idx, c][:, None]
                    out[k, :, :, c] += np.bincount(flat.ravel(), weights=weights.ravel(),
                                                   minlength=h * w).reshape(h, w)
    meta = {"mask": mask.to_dict(), "eps": eps, "occlusion": occlusion}
    return FocalStack(plane_depths, out, wavelengths, pitch, meta)


def _embedded_kernel(cache, z, zk, lam, pitch, mask, half_width, embed_half_width):
    """Flattened kernel of ``half_width`` zero-embedded in a ``(2*embed+1)^2`` grid."""
    def compute():
        kern = incoherent_kernel(z, zk, lam, pitch, mask, half_width=half_width).values
        pad = embed_half_width - half_width
        return np.pad(kern, pad).ravel()
    key = ("inc", float(z) - float(zk), lam, pitch, mask.kind, mask.max_angle or 0.0,
           mask.margin, half_width, embed_half_width)
    return cache.get_or_compute(key, compute)
