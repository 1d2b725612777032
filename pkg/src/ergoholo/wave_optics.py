"""Scalar wave optics on uniform grids.

Band-limited angular-spectrum propagation, the pixel-aperture sinc envelope,
Fourier-plane pupil masks and the high-order image formation model of a
pixelated phase-only SLM. Arrays are indexed ``[row, column] = [y, x]`` and
spectra are kept in unshifted FFT order throughout.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft as sfft

CACHE_FORMAT_VERSION = 1


def fft_workers() -> int:
    """Thread count for FFTs, taken from ``ERGOHOLO_THREADS`` (default: all cores)."""
    value = os.environ.get("ERGOHOLO_THREADS")
    if not value:
        return -1
    return max(1, int(value))


def fft2(x: np.ndarray) -> np.ndarray:
    return sfft.fft2(x, axes=(-2, -1), workers=fft_workers())


def ifft2(x: np.ndarray) -> np.ndarray:
    return sfft.ifft2(x, axes=(-2, -1), workers=fft_workers())


@dataclass(frozen=True)
class ComplexField:
    """Sampled complex wavefront with its physical sampling metadata."""

    data: np.ndarray
    pitch: float
    wavelength: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"field data must be 2-D, got shape {data.shape}")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        object.__setattr__(self, "data", data.astype(np.result_type(data, np.complex64), copy=False))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.data) ** 2

    def energy(self) -> float:
        return float(np.sum(self.intensity))


@dataclass(frozen=True)
class FrequencyGrid:
    """Spatial-frequency sampling of a ``shape`` grid with pitch ``pitch``.

    ``supersample`` > 1 describes the extended grid used for high-order
    modeling: the same frequency spacing ``1/(N*pitch)`` but ``supersample``
    times the linear extent, i.e. a spatial grid of ``N*supersample`` samples
    at ``pitch/supersample``.
    """

    shape: tuple
    pitch: float
    supersample: int = 1

    def __post_init__(self):
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        if int(self.supersample) < 1:
            raise ValueError("supersample must be >= 1")
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))

    @property
    def full_shape(self) -> tuple:
        return tuple(n * self.supersample for n in self.shape)

    @property
    def sample_pitch(self) -> float:
        """Spatial pitch of the (possibly supersampled) grid."""
        return self.pitch / self.supersample

    @property
    def fy(self) -> np.ndarray:
        return np.fft.fftfreq(self.full_shape[0], d=self.sample_pitch)

    @property
    def fx(self) -> np.ndarray:
        return np.fft.fftfreq(self.full_shape[1], d=self.sample_pitch)

    @property
    def spacing(self) -> tuple:
        return tuple(1.0 / (n * self.pitch) for n in self.shape)

    def mesh(self) -> tuple:
        """Return ``(FX, FY)`` broadcastable to :attr:`full_shape`."""
        return self.fx[None, :], self.fy[:, None]


@dataclass(frozen=True)
class PropagationKernel:
    distance: float
    wavelength: float
    values: np.ndarray
    band_limited: bool = True


@dataclass(frozen=True)
class PupilSpec:
    """Circular pupil in physical Fourier-plane (eye-box) coordinates, meters."""

    center_x: float
    center_y: float
    radius: float
    kind: str = "fixed"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("pupil radius must be positive")
        if self.kind not in ("fixed", "random"):
            raise ValueError(f"unknown pupil kind {self.kind!r}")

    def inside(self, eyebox, tol: float = 1e-12) -> bool:
        """True if the whole disk lies within ``eyebox = (x_min, y_min, x_max, y_max)``."""
        x_min, y_min, x_max, y_max = eyebox
        r = self.radius
        return (x_min + r - tol <= self.center_x <= x_max - r + tol
                and y_min + r - tol <= self.center_y <= y_max - r + tol)

    def to_dict(self) -> dict:
        return {"center_x": self.center_x, "center_y": self.center_y,
                "radius": self.radius, "kind": self.kind}


def coherent_kernel(grid: FrequencyGrid, wavelength: float, distance: float) -> PropagationKernel:
    """Band-limited angular-spectrum transfer function on ``grid``.

    ``exp(i 2pi/lambda sqrt(1 - (lambda fx)^2 - (lambda fy)^2) d)`` for
    ``fx^2 + fy^2 < 1/lambda^2`` and zero for evanescent frequencies.
    """
    if not wavelength > 0:
        raise ValueError("wavelength must be positive")
    fx, fy = grid.mesh()
    arg = 1.0 - (wavelength * fx) ** 2 - (wavelength * fy) ** 2
    in_band = (fx ** 2 + fy ** 2) < 1.0 / wavelength ** 2
    kz = 2 * np.pi / wavelength * np.sqrt(np.where(in_band, arg, 0.0))
    values = np.where(in_band, np.exp(1j * kz * distance), 0.0)
    return PropagationKernel(distance=float(distance), wavelength=float(wavelength),
                             values=values, band_limited=True)


def band_limit(field: ComplexField) -> ComplexField:
    """Project ``field`` onto its propagating (non-evanescent) band."""
    grid = FrequencyGrid(field.data.shape, field.pitch)
    mask = np.abs(coherent_kernel(grid, field.wavelength, 0.0).values)
    return ComplexField(ifft2(fft2(field.data) * mask), field.pitch, field.wavelength)


def propagate(field: ComplexField, distance: float, pad: bool = False) -> ComplexField:
    """Angular-spectrum propagation of ``field`` by ``distance`` (meters, signed).

    With ``pad=False`` the propagation is circular on the field's own grid
    (exactly unitary on the propagating band). ``pad=True`` zero-pads to twice
    the size before transforming and crops back, suppressing wrap-around.
    """
    data = field.data
    if not np.all(np.isfinite(data)):
        raise ValueError("field contains non-finite samples")
    h, w = data.shape
    if pad:
        work = np.zeros((2 * h, 2 * w), dtype=data.dtype)
        work[h // 2:h // 2 + h, w // 2:w // 2 + w] = data
    else:
        work = data
    kernel = coherent_kernel(FrequencyGrid(work.shape, field.pitch), field.wavelength, distance)
    out = ifft2(fft2(work) * kernel.values)
    if pad:
        out = out[h // 2:h // 2 + h, w // 2:w // 2 + w]
    return ComplexField(out, field.pitch, field.wavelength)


def slm_field(phase: np.ndarray, amplitude=None) -> np.ndarray:
    """Complex field ``amplitude * exp(i*phase)`` leaving a phase-only SLM."""
    u = np.exp(1j * np.asarray(phase))
    if amplitude is not None:
        u = u * amplitude
    return u


def high_order_spectrum(phase: np.ndarray, orders: int = 3, amplitude=None) -> np.ndarray:
    """Spectrum of the SLM field including ``orders x orders`` diffraction orders.

    The shifted-copy sum over orders ``j, k in {-(orders//2), ..., orders//2}``
    is realized by tiling the periodic DFT spectrum of the ``N x M`` SLM field
    onto the ``orders*N x orders*M`` grid. Works on stacks (leading axes).
    """
    orders = int(orders)
    if orders < 1 or orders % 2 == 0:
        raise ValueError(f"orders must be a positive odd integer, got {orders}")
    spectrum = fft2(slm_field(phase, amplitude))
    if orders == 1:
        return spectrum
    reps = (1,) * (spectrum.ndim - 2) + (orders, orders)
    return np.tile(spectrum, reps)


def fold_orders(spectrum: np.ndarray, orders: int) -> np.ndarray:
    """Adjoint of the tiling in :func:`high_order_spectrum`: sum the order blocks."""
    if orders == 1:
        return spectrum
    *lead, hh, ww = spectrum.shape
    h, w = hh // orders, ww // orders
    return spectrum.reshape(*lead, orders, h, orders, w).sum(axis=(-4, -2))


def sinc_envelope(grid: FrequencyGrid, pitch: float) -> np.ndarray:
    """Pixel-aperture envelope ``sinc(pi fx p) sinc(pi fy p)`` (fill factor 1)."""
    if not pitch > 0:
        raise ValueError("pitch must be positive")
    fx, fy = grid.mesh()
    # np.sinc(x) = sin(pi x)/(pi x)
    return np.sinc(fy * pitch) * np.sinc(fx * pitch)


def pupil_mask(pupil: Optional[PupilSpec], wavelength: float, eyepiece_focal_length: float,
               grid: FrequencyGrid) -> np.ndarray:
    """Binary Fourier-plane pupil on ``grid``.

    A physical position ``x`` in the eyepiece's back focal plane maps to
    spatial frequency ``x / (lambda f)``. ``pupil=None`` means no iris.
    """
    if not eyepiece_focal_length > 0:
        raise ValueError("eyepiece focal length must be positive")
    shape = grid.full_shape
    if pupil is None:
        return np.ones(shape, dtype=bool)
    scale = wavelength * eyepiece_focal_length
    cx, cy, r = pupil.center_x / scale, pupil.center_y / scale, pupil.radius / scale
    fx, fy = grid.mesh()
    if (abs(cx) + r > np.max(np.abs(grid.fx)) or abs(cy) + r > np.max(np.abs(grid.fy))):
        warnings.warn("pupil disk extends beyond the frequency grid", RuntimeWarning, stacklevel=2)
    mask = (fx - cx) ** 2 + (fy - cy) ** 2 < r ** 2
    if not mask.any():
        # degenerate radius: keep the single nearest sample
        idx = np.unravel_index(np.argmin((fx - cx) ** 2 + (fy - cy) ** 2), shape)
        mask[idx] = True
    return mask


@dataclass(frozen=True)
class OpticsSettings:
    """Display optics for one color channel."""

    pitch: float = 8e-6
    wavelength: float = 520e-9
    orders: int = 3
    eyepiece_focal_length: float = 0.08
    use_sinc: bool = True

    def grid(self, shape) -> FrequencyGrid:
        return FrequencyGrid(tuple(shape), self.pitch, self.orders)

    @property
    def eyebox_width(self) -> float:
        """Eye-box period ``lambda f / p``: one diffraction order spans this width."""
        return self.wavelength * self.eyepiece_focal_length / self.pitch


def transfer_function(shape, distance: float, settings: OpticsSettings,
                      pupil: Optional[PupilSpec] = None) -> np.ndarray:
    """Combined kernel, envelope and pupil on the supersampled grid of an SLM of ``shape``."""
    grid = settings.grid(shape)
    tf = coherent_kernel(grid, settings.wavelength, distance).values
    if settings.use_sinc:
        tf = tf * sinc_envelope(grid, settings.pitch)
    if pupil is not None:
        tf = tf * pupil_mask(pupil, settings.wavelength, settings.eyepiece_focal_length, grid)
    return tf


def reconstruct_plane(phase: np.ndarray, pupil: Optional[PupilSpec], distance: float,
                      settings: OpticsSettings, amplitude=None) -> ComplexField:
    """Field seen through ``pupil`` at ``distance`` from the SLM, high orders included.

    The output lives on the supersampled grid (``orders`` times the SLM
    resolution, pitch ``pitch/orders``).
    """
    phase = np.asarray(phase, dtype=float)
    spectrum = high_order_spectrum(phase, settings.orders, amplitude)
    tf = transfer_function(phase.shape, distance, settings, pupil)
    out = ifft2(spectrum * tf)
    return ComplexField(out, settings.pitch / settings.orders, settings.wavelength)


@dataclass
class KernelCache:
    """Keyed store of precomputed kernels, persistable as a versioned sidecar.

    Instances are only mutated by :meth:`get_or_compute`; stored arrays are
    marked read-only so they can be shared between threads.
    """

    entries: dict = field(default_factory=dict)

    @staticmethod
    def _key(key) -> str:
        return repr(tuple(float(k) if isinstance(k, (int, float, np.floating)) else k for k in key))

    def get_or_compute(self, key, compute):
        k = self._key(key)
        if k not in self.entries:
            value = np.asarray(compute())
            value.setflags(write=False)
            self.entries[k] = value
        return self.entries[k]

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path) -> None:
        keys = sorted(self.entries)
        arrays = {f"k{i}": self.entries[k] for i, k in enumerate(keys)}
        with open(path, "wb") as fh:
            np.savez(fh, __version__=np.array(CACHE_FORMAT_VERSION),
                     __keys__=np.array(keys, dtype=str), **arrays)

    @classmethod
    def load(cls, path) -> "KernelCache":
        with np.load(path) as data:
            version = int(data["__version__"])
            if version != CACHE_FORMAT_VERSION:
                raise ValueError(f"unsupported kernel cache version {version}")
            keys = list(data["__keys__"])
            cache = cls()
            for i, k in enumerate(keys):
                arr = np.array(data[f"k{i}"])
                arr.setflags(write=False)
                cache.entries[str(k)] = arr
        return cache
