"""Gradient-descent optimization of time-multiplexed phase-only holograms.

The forward model reconstructs each SLM frame through every pupil at every
supervised plane (high diffraction orders, pixel sinc envelope and
Fourier-plane pupil included), averages intensities over frames, and compares
the resulting amplitude, normalized by pupil size, to the target amplitude.
Gradients are computed analytically by running the linear stages in adjoint
order.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.fft as sfft

from ._kernels import pixel_pass
from .incoherent_render import FocalStack
from .wave_optics import (OpticsSettings, PupilSpec, fft2, fft_workers, fold_orders, ifft2,
                          pupil_mask, transfer_function)

log = logging.getLogger(__name__)

PHASE_LEVELS = 256


class NonFiniteLossError(FloatingPointError):
    """Raised when the loss becomes NaN/inf; carries the last good batch."""

    def __init__(self, message, batch=None, history=None):
        super().__init__(message)
        self.batch = batch
        self.history = history


@dataclass
class PhasePattern:
    """A single SLM phase pattern (radians)."""

    phase: np.ndarray
    pitch: float = 8e-6

    def __post_init__(self):
        self.phase = np.asarray(self.phase, dtype=float)
        if not np.all(np.isfinite(self.phase)):
            raise ValueError("phase pattern contains non-finite values")

    @property
    def shape(self) -> tuple:
        return self.phase.shape

    def wrapped(self) -> np.ndarray:
        return np.mod(self.phase, 2 * np.pi)

    def quantize(self, levels: int = PHASE_LEVELS) -> np.ndarray:
        """Integer phase levels, ``v -> 2 pi v / levels``."""
        v = np.floor(self.wrapped() / (2 * np.pi) * levels + 0.5).astype(np.int64) % levels
        return v.astype(np.uint8 if levels <= 256 else np.uint16)

    @classmethod
    def from_levels(cls, levels_img: np.ndarray, pitch: float = 8e-6,
                    levels: int = PHASE_LEVELS) -> "PhasePattern":
        return cls(2 * np.pi * np.asarray(levels_img, dtype=float) / levels, pitch)


@dataclass
class HologramBatch:
    """``T`` frames per color channel plus one global scale per channel.

    ``phases`` has shape ``(C, T, H, W)``.
    """

    phases: np.ndarray
    global_scale: np.ndarray
    wavelengths: tuple
    pitch: float = 8e-6

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=float)
        if self.phases.ndim == 3:
            self.phases = self.phases[None]
        self.global_scale = np.atleast_1d(np.asarray(self.global_scale, dtype=float))
        self.wavelengths = tuple(float(w) for w in np.atleast_1d(self.wavelengths))
        if self.phases.ndim != 4 or self.phases.shape[1] < 1:
            raise ValueError("phases must have shape (C, T, H, W) with T >= 1")
        if len(self.wavelengths) != self.phases.shape[0] or len(self.global_scale) != self.phases.shape[0]:
            raise ValueError("one wavelength and one global scale per channel required")
        if not np.all(self.global_scale > 0):
            raise ValueError("global scale must be positive")

    @property
    def frames(self) -> int:
        return self.phases.shape[1]

    @property
    def channels(self) -> int:
        return self.phases.shape[0]

    @property
    def shape(self) -> tuple:
        return self.phases.shape[2:]

    def channel(self, c: int) -> "HologramBatch":
        return HologramBatch(self.phases[c:c + 1], self.global_scale[c:c + 1],
                             (self.wavelengths[c],), self.pitch)

    def quantized(self, levels: int = PHASE_LEVELS) -> "HologramBatch":
        """Batch after an 8-bit export/import round trip."""
        q = np.floor(np.mod(self.phases, 2 * np.pi) / (2 * np.pi) * levels + 0.5) % levels
        return HologramBatch(2 * np.pi * q / levels, self.global_scale.copy(), self.wavelengths, self.pitch)


@dataclass
class ScaleSet:
    """Non-optimizable scales: per-pixel laser profile and per-pupil normalization."""

    laser_profile: Optional[np.ndarray] = None
    pupil_scales: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.laser_profile is not None:
            self.laser_profile = np.asarray(self.laser_profile, dtype=float)
            if not np.all(self.laser_profile > 0):
                raise ValueError("laser profile entries must be positive")
        if self.pupil_scales is not None and not all(s > 0 for s in self.pupil_scales):
            raise ValueError("pupil scales must be positive")


@dataclass
class OptimizerConfig:
    """Optimization settings. Lengths in meters.

    Defaults follow the pupil-mimicking setup: 3 frames, 3x3 orders, 25
    pupils (3x3 fixed grid plus 16 random) of base radius 2 mm in an
    8 x 8 mm eye box.
    """

    frames: int = 3
    orders: int = 3
    planes: Optional[tuple] = None
    num_planes: int = 6
    n_fixed: int = 9
    n_random: int = 16
    base_radius: float = 2e-3
    eyebox: tuple = (-4e-3, -4e-3, 4e-3, 4e-3)
    iterations: int = 500
    step_size: float = 0.02
    loss_norm: str = "l2"
    seed: int = 0
    pitch: float = 8e-6
    eyepiece_focal_length: float = 0.08
    use_sinc: bool = True
    scale_mode: str = "amplitude"
    pupil_normalization: bool = True
    random_radius: str = "uniform"
    intensity_floor: float = 1e-12
    precision: str = "double"
    disable_pupils: bool = False
    disable_time_multiplexing: bool = False
    disable_high_orders: bool = False
    center_pupil_only: bool = False

    def __post_init__(self):
        if self.planes is not None:
            self.planes = tuple(int(i) for i in self.planes)
        self.eyebox = tuple(float(v) for v in self.eyebox)
        self.validate()

    @property
    def n_pupils(self) -> int:
        return self.n_fixed + self.n_random

    def validate(self) -> None:
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.orders < 1 or self.orders % 2 == 0:
            raise ValueError("orders must be a positive odd integer")
        if self.n_fixed < 0 or self.n_random < 0 or self.n_pupils < 1:
            raise ValueError("need at least one pupil")
        if math.isqrt(self.n_fixed) ** 2 != self.n_fixed:
            raise ValueError("n_fixed must be a perfect square")
        x0, y0, x1, y1 = self.eyebox
        if not (x1 > x0 and y1 > y0):
            raise ValueError("eye box is degenerate")
        if self.base_radius <= 0 or 2 * self.base_radius > min(x1 - x0, y1 - y0) + 1e-15:
            raise ValueError("eye box cannot contain a pupil of the base radius")
        if self.loss_norm not in ("l2", "l1"):
            raise ValueError("loss_norm must be 'l2' or 'l1'")
        if self.scale_mode not in ("amplitude", "phase"):
            raise ValueError("scale_mode must be 'amplitude' or 'phase'")
        if self.random_radius not in ("uniform", "log-uniform"):
            raise ValueError("random_radius must be 'uniform' or 'log-uniform'")
        if self.precision not in ("double", "single"):
            raise ValueError("precision must be 'double' or 'single'")
        if self.iterations < 0 or self.step_size <= 0:
            raise ValueError("iterations must be >= 0 and step_size > 0")

    def resolved(self) -> "OptimizerConfig":
        """Copy with ablation flags folded into the plain settings."""
        cfg = replace(self)
        if cfg.disable_time_multiplexing:
            cfg.frames = 1
        if cfg.disable_high_orders:
            cfg.orders = 1
        if cfg.center_pupil_only:
            cfg.n_fixed, cfg.n_random = 1, 0
        return cfg

    def optics(self, wavelength: float) -> OpticsSettings:
        cfg = self.resolved()
        return OpticsSettings(pitch=cfg.pitch, wavelength=wavelength, orders=cfg.orders,
                              eyepiece_focal_length=cfg.eyepiece_focal_length, use_sinc=cfg.use_sinc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eyebox"] = list(self.eyebox)
        d["planes"] = None if self.planes is None else list(self.planes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown optimizer settings: {sorted(unknown)}")
        return cls(**d)


def fixed_pupils(config: OptimizerConfig) -> List[PupilSpec]:
    """Uniform grid of base-radius pupils, inset so every disk lies in the eye box."""
    cfg = config.resolved()
    g = math.isqrt(cfg.n_fixed)
    if g == 0:
        return []
    x0, y0, x1, y1 = cfg.eyebox
    r = cfg.base_radius
    if g == 1:
        xs, ys = [(x0 + x1) / 2], [(y0 + y1) / 2]
    else:
        xs, ys = np.linspace(x0 + r, x1 - r, g), np.linspace(y0 + r, y1 - r, g)
    return [PupilSpec(float(x), float(y), r, "fixed") for y in ys for x in xs]


def sample_pupils(config: OptimizerConfig, iteration: int = 0,
                  rng: Optional[np.random.Generator] = None) -> list:
    """Fixed grid pupils followed by ``n_random`` pupils drawn for ``iteration``.

    Random radii lie in ``[r/2, 2r]`` (clamped to fit the eye box) and centers
    are uniform over the positions that keep the disk inside the eye box. The
    draw depends only on ``(seed, iteration)`` unless ``rng`` is given. With
    ``disable_pupils`` the list is ``[None]`` (no iris).
    """
    cfg = config.resolved()
    if cfg.disable_pupils:
        return [None]
    pupils = fixed_pupils(cfg)
    if cfg.n_random == 0:
        return pupils
    if rng is None:
        rng = np.random.default_rng([cfg.seed, iteration])
    x0, y0, x1, y1 = cfg.eyebox
    r = cfg.base_radius
    r_max = min(x1 - x0, y1 - y0) / 2
    for _ in range(cfg.n_random):
        if cfg.random_radius == "uniform":
            rad = rng.uniform(0.5 * r, 2.0 * r)
        else:
            rad = math.exp(rng.uniform(math.log(0.5 * r), math.log(2.0 * r)))
        rad = min(rad, r_max)
        cx = rng.uniform(x0 + rad, x1 - rad)
        cy = rng.uniform(y0 + rad, y1 - rad)
        pupils.append(PupilSpec(float(cx), float(cy), float(rad), "random"))
    return pupils


def pupil_normalization(radius: float, base_radius: float, enabled: bool = True) -> float:
    """Amplitude normalization for a pupil: ``radius / base_radius``.

    Transmitted energy of a flat spectrum grows with pupil area, so the
    amplitude grows linearly with the radius.
    """
    if radius <= 0 or base_radius <= 0:
        raise ValueError("radii must be positive")
    return radius / base_radius if enabled else 1.0


def load_laser_profile(path=None, shape=None) -> np.ndarray:
    """Per-pixel illumination map normalized to unit mean (ones when ``path`` is None).

    Accepts ``.npy`` arrays or PNG images (color is averaged to gray).
    """
    if path is None:
        if shape is None:
            raise ValueError("shape is required when no profile file is given")
        return np.ones(shape)
    path = str(path)
    if path.endswith(".npy"):
        prof = np.load(path).astype(float)
    else:
        from .fileio import read_png
        prof = read_png(path).astype(float)
        if prof.ndim == 3:
            prof = prof.mean(axis=-1)
    if shape is not None and tuple(prof.shape) != tuple(shape):
        raise ValueError(f"laser profile shape {prof.shape} does not match SLM {tuple(shape)}")
    if not np.all(prof > 0):
        raise ValueError("laser profile must be strictly positive")
    return prof / prof.mean()


def default_plane_indices(num_available: int, count: int = 6) -> tuple:
    if num_available <= count:
        return tuple(range(num_available))
    return tuple(int(i) for i in np.round(np.linspace(0, num_available - 1, count)))


@dataclass
class LossReport:
    loss: float
    residuals: np.ndarray  # (planes, pupils)


class HologramModel:
    """Forward model and adjoint for one color channel.

    Precomputes, per supervised plane, the propagation kernel times the sinc
    envelope on the supersampled grid. Pupil masks are applied per call.
    """

    def __init__(self, shape, plane_depths, wavelength: float, config: OptimizerConfig,
                 laser_profile: Optional[np.ndarray] = None):
        self.config = config.resolved()
        self.shape = tuple(shape)
        self.plane_depths = np.atleast_1d(np.asarray(plane_depths, dtype=float))
        self.wavelength = float(wavelength)
        self.optics = self.config.optics(wavelength)
        self.grid = self.optics.grid(self.shape)
        single = self.config.precision == "single"
        self.cdtype = np.complex64 if single else np.complex128
        self.rdtype = np.float32 if single else np.float64
        self.transfer = np.stack([
            transfer_function(self.shape, d, self.optics).astype(self.cdtype)
            for d in self.plane_depths])
        if laser_profile is not None and tuple(laser_profile.shape) != self.shape:
            raise ValueError("laser profile does not match the SLM shape")
        self.laser = None if laser_profile is None else laser_profile.astype(self.rdtype)

    @property
    def out_shape(self) -> tuple:
        return self.grid.full_shape

    def prepare_targets(self, targets: np.ndarray) -> np.ndarray:
        """Bring target amplitudes ``(K, H, W)`` onto the reconstruction grid."""
        targets = np.asarray(targets, dtype=self.rdtype)
        if targets.ndim == 2:
            targets = targets[None]
        if targets.shape[0] != len(self.plane_depths):
            raise ValueError(f"{targets.shape[0]} targets for {len(self.plane_depths)} planes")
        o = self.config.orders
        if targets.shape[1:] == self.shape and o > 1:
            targets = np.repeat(np.repeat(targets, o, axis=1), o, axis=2)
        if targets.shape[1:] != self.out_shape:
            raise ValueError(f"target grid {targets.shape[1:]} matches neither SLM {self.shape} "
                             f"nor reconstruction grid {self.out_shape}")
        return targets

    def pupil_scales(self, pupils) -> list:
        cfg = self.config
        return [1.0 if p is None else pupil_normalization(p.radius, cfg.base_radius, cfg.pupil_normalization)
                for p in pupils]

    def masks(self, pupils) -> list:
        return [None if p is None else
                pupil_mask(p, self.wavelength, self.optics.eyepiece_focal_length, self.grid)
                for p in pupils]

    def slm_field(self, phases: np.ndarray, sigma_g: float) -> np.ndarray:
        phases = np.asarray(phases, dtype=self.rdtype)
        lp = 1.0 if self.laser is None else self.laser
        if self.config.scale_mode == "amplitude":
            return (sigma_g * lp * np.exp(1j * phases)).astype(self.cdtype)
        return np.exp(1j * sigma_g * lp * phases).astype(self.cdtype)

    def spectrum(self, u: np.ndarray) -> np.ndarray:
        spec = fft2(u)
        o = self.config.orders
        if o == 1:
            return spec
        return np.tile(spec, (1, o, o))

    def fields(self, phases, sigma_g, pupil, plane_index: int) -> np.ndarray:
        """Complex fields ``(T, oH, oW)`` through one pupil at one plane."""
        phases = np.asarray(phases)
        u = self.slm_field(phases[None] if phases.ndim == 2 else phases, sigma_g)
        tf = self.transfer[plane_index]
        m = self.masks([pupil])[0]
        if m is not None:
            tf = tf * m
        return ifft2(self.spectrum(u) * tf)

    def amplitudes(self, phases, sigma_g, pupil, plane_index: int, pupil_scale: Optional[float] = None):
        """Pupil-normalized, frame-averaged amplitude at one plane."""
        p = self.fields(phases, sigma_g, pupil, plane_index)
        inten = np.mean(np.abs(p) ** 2, axis=0)
        s = self.pupil_scales([pupil])[0] if pupil_scale is None else pupil_scale
        return np.sqrt(np.maximum(inten, self.config.intensity_floor)) / s

    def evaluate(self, phases: np.ndarray, sigma_g: float, pupils, targets: np.ndarray,
                 pupil_scales=None, grad: bool = True):
        """Loss, per-pair residuals and (optionally) gradients.

        Args:
            phases: ``(T, H, W)`` SLM phases.
            sigma_g: global scale.
            pupils: list of :class:`PupilSpec` (``None`` entries mean no iris).
            targets: amplitudes already on the reconstruction grid, ``(K, oH, oW)``.

        Returns:
            ``(LossReport, grad_phases, grad_sigma)``; gradients are ``None``
            when ``grad`` is false.
        """
        cfg = self.config
        phases = np.asarray(phases, dtype=self.rdtype)
        T = phases.shape[0]
        n_planes, n_pupils = len(self.plane_depths), len(pupils)
        scales = self.pupil_scales(pupils) if pupil_scales is None else list(pupil_scales)
        masks = self.masks(pupils)
        u = self.slm_field(phases, sigma_g)
        spec = self.spectrum(u)
        n_out = spec.shape[-1] * spec.shape[-2]
        n_pairs = n_planes * n_pupils
        residuals = np.zeros((n_planes, n_pupils))
        g_spec = np.zeros_like(spec) if grad else None
        l1 = cfg.loss_norm == "l1"
        weight = 1.0 / (n_out * n_pairs)

        for q in range(n_pupils):
            if masks[q] is None:
                for k in range(n_planes):
                    tf = self.transfer[k]
                    p = ifft2(spec * tf)
                    residuals[k, q] = pixel_pass(p, targets[k], scales[q], cfg.intensity_floor, l1, weight)
                    if grad:
                        # adjoint of ifft2 is fft2 / n
                        g_spec += np.conj(tf) * fft2(p) / n_out
                continue
            # only the pupil's bounding box of the spectrum is non-zero
            rows = np.nonzero(masks[q].any(axis=1))[0]
            cols = np.nonzero(masks[q].any(axis=0))[0]
            box = (rows[:, None], cols[None, :])
            spec_box = spec[:, box[0], box[1]]
            g_box = np.zeros_like(spec_box) if grad else None
            for k in range(n_planes):
                tf = self.transfer[k][box] * masks[q][box]
                p = _pruned_ifft2(spec_box * tf, rows, cols, spec.shape)
                residuals[k, q] = pixel_pass(p, targets[k], scales[q], cfg.intensity_floor, l1, weight)
                if grad:
                    g_box += np.conj(tf) * _pruned_fft2(p, rows, cols) / n_out
            if grad:
                g_spec[:, box[0], box[1]] += g_box

        report = LossReport(float(residuals.mean()), residuals)
        if not grad:
            return report, None, None
        g_base = fold_orders(g_spec, cfg.orders)
        n_slm = phases.shape[-1] * phases.shape[-2]
        g_u = ifft2(g_base) * n_slm
        lp = 1.0 if self.laser is None else self.laser
        w = g_u * np.conj(u)
        if cfg.scale_mode == "amplitude":
            g_phase = 2.0 * w.imag
            g_sigma = float(2.0 * np.sum(w.real) / sigma_g)
        else:
            g_phase = 2.0 * w.imag * sigma_g * lp
            g_sigma = float(2.0 * np.sum(w.imag * lp * phases))
        return report, g_phase.astype(float), g_sigma


def _pruned_ifft2(box_values, rows, cols, full_shape):
    """``ifft2`` of a spectrum that is zero outside ``rows x cols``."""
    T = box_values.shape[0]
    m, n = full_shape[-2:]
    z = np.zeros((T, len(rows), n), dtype=box_values.dtype)
    z[:, :, cols] = box_values
    z = sfft.ifft(z, axis=-1, workers=fft_workers(), overwrite_x=True)
    y = np.zeros((T, m, n), dtype=box_values.dtype)
    y[:, rows, :] = z
    return sfft.ifft(y, axis=-2, workers=fft_workers(), overwrite_x=True)


def _pruned_fft2(x, rows, cols):
    """``fft2(x)`` evaluated only on ``rows x cols``."""
    a = sfft.fft(x, axis=-2, workers=fft_workers())[:, rows, :]
    return sfft.fft(a, axis=-1, workers=fft_workers(), overwrite_x=True)[:, :, cols]


def _channel_model(batch_shape, targets: FocalStack, c: int, config, scales):
    laser = None if scales is None else scales.laser_profile
    return HologramModel(batch_shape, targets.plane_depths, targets.wavelengths[c], config, laser)


def forward_loss(batch: HologramBatch, pupils, targets: FocalStack, scales: Optional[ScaleSet],
                 config: OptimizerConfig, target_is_amplitude: bool = True) -> LossReport:
    """Loss of ``batch`` against ``targets`` summed (averaged) over channels.

    ``targets`` planes must be the supervised planes, in order.
    """
    return _loss_and_grad(batch, pupils, targets, scales, config, target_is_amplitude, grad=False)[0]


def gradient(batch: HologramBatch, pupils, targets: FocalStack, scales: Optional[ScaleSet],
             config: OptimizerConfig, target_is_amplitude: bool = True):
    """Analytic gradients ``(grad_phases (C,T,H,W), grad_global_scale (C,))`` and the loss report."""
    report, gp, gs = _loss_and_grad(batch, pupils, targets, scales, config, target_is_amplitude, grad=True)
    return gp, gs, report


def _loss_and_grad(batch, pupils, targets, scales, config, target_is_amplitude, grad):
    if batch.shape != targets.planes.shape[1:3] and \
            tuple(n * config.resolved().orders for n in batch.shape) != targets.planes.shape[1:3]:
        raise ValueError(f"hologram grid {batch.shape} does not match targets {targets.planes.shape[1:3]}")
    if batch.channels != targets.planes.shape[-1]:
        raise ValueError("channel count of batch and targets differ")
    pscales = None if scales is None else scales.pupil_scales
    total, residuals = 0.0, []
    g_phases = np.zeros_like(batch.phases) if grad else None
    g_scale = np.zeros(batch.channels) if grad else None
    for c in range(batch.channels):
        model = _channel_model(batch.shape, targets, c, config, scales)
        amp = targets.planes[..., c]
        amp = amp if target_is_amplitude else np.sqrt(amp)
        rep, gp, gs = model.evaluate(batch.phases[c], batch.global_scale[c], pupils,
                                     model.prepare_targets(amp), pscales, grad)
        total += rep.loss / batch.channels
        residuals.append(rep.residuals)
        if grad:
            g_phases[c] = gp / batch.channels
            g_scale[c] = gs / batch.channels
    report = LossReport(total, np.stack(residuals))
    return report, g_phases, g_scale


class Adam:
    """Adaptive-moment first-order update (Kingma & Ba)."""

    def __init__(self, step_size: float = 0.02, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.step_size, self.beta1, self.beta2, self.eps = step_size, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class LossHistory:
    iteration: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    best_loss: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)

    def append(self, it, loss, best, wall_ms):
        self.iteration.append(int(it))
        self.loss.append(float(loss))
        self.best_loss.append(float(best))
        self.wall_ms.append(float(wall_ms))

    def __len__(self) -> int:
        return len(self.iteration)

    def rows(self):
        return zip(self.iteration, self.loss, self.best_loss, self.wall_ms)


def initial_phases(config: OptimizerConfig, shape, channels: int = 1) -> np.ndarray:
    """i.i.d. uniform phases in ``[0, 2 pi)`` drawn from the run seed."""
    cfg = config.resolved()
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    return rng.uniform(0.0, 2 * np.pi, size=(channels, cfg.frames) + tuple(shape))


def fit_initial_scale(model: HologramModel, phases: np.ndarray, pupils, targets: np.ndarray) -> float:
    """Global scale mapping the mean reconstructed amplitude onto the mean target amplitude."""
    if model.config.scale_mode != "amplitude":
        return 1.0
    recon = [model.amplitudes(phases, 1.0, p, k).mean()
             for k in range(len(model.plane_depths)) for p in pupils]
    mean_recon = float(np.mean(recon))
    mean_target = float(np.mean(targets))
    if not mean_recon > 0 or not mean_target > 0:
        return 1.0
    return mean_target / mean_recon


def optimize_channel(model: HologramModel, targets: np.ndarray, config: OptimizerConfig,
                     phases0: np.ndarray, sigma0: Optional[float] = None,
                     callback: Optional[Callable] = None):
    """Optimize one channel. ``targets`` are amplitudes ``(K, H, W)`` or on the output grid.

    Returns ``(phases, sigma_g, history)`` for the best-loss iterate. The
    global scale is optimized in log space to stay positive.
    """
    cfg = config.resolved()
    targets = model.prepare_targets(targets)
    phases = np.array(phases0, dtype=float)
    if sigma0 is None:
        sigma0 = fit_initial_scale(model, phases, sample_pupils(cfg, 0), targets)
    log_sigma = math.log(sigma0)
    history = LossHistory()
    best = (math.inf, phases.copy(), sigma0)
    adam_phase, adam_scale = Adam(cfg.step_size), Adam(cfg.step_size)
    start = time.perf_counter()
    for it in range(cfg.iterations):
        pupils = sample_pupils(cfg, it)
        sigma = math.exp(log_sigma)
        report, g_phase, g_sigma = model.evaluate(phases, sigma, pupils, targets)
        if not math.isfinite(report.loss) or not np.all(np.isfinite(g_phase)):
            raise NonFiniteLossError(f"non-finite loss at iteration {it}",
                                     batch=(best[1], best[2]), history=history)
        if report.loss < best[0]:
            best = (report.loss, phases.copy(), sigma)
        history.append(it, report.loss, best[0], 1e3 * (time.perf_counter() - start))
        if callback is not None:
            callback(it, report, phases, sigma)
        phases = adam_phase.step(phases, g_phase)
        log_sigma = float(adam_scale.step(np.array(log_sigma), np.array(g_sigma * sigma)))
    if cfg.iterations == 0:
        return phases, sigma0, history
    return best[1], best[2], history


def optimize(config: OptimizerConfig, targets: FocalStack, scales: Optional[ScaleSet] = None,
             initial: Optional[HologramBatch] = None, target_is_amplitude: bool = False,
             callback: Optional[Callable] = None):
    """Optimize a hologram batch for every channel of ``targets``.

    ``targets`` holds intensities (the renderer's output) unless
    ``target_is_amplitude``; only the configured plane subset is supervised.

    Returns:
        ``(HologramBatch, [LossHistory per channel])``.
    """
    cfg = config.resolved()
    indices = cfg.planes if cfg.planes is not None else default_plane_indices(targets.num_planes,
                                                                             cfg.num_planes)
    sub = targets.subset(indices)
    shape = sub.planes.shape[1:3]
    if initial is None:
        phases0 = initial_phases(cfg, shape, sub.planes.shape[-1])
        sigma0 = [None] * sub.planes.shape[-1]
    else:
        if initial.frames != cfg.frames or initial.shape != tuple(shape):
            raise ValueError("initial batch does not match the configuration")
        phases0, sigma0 = initial.phases, list(initial.global_scale)
    out_phases, out_scales, histories = [], [], []
    laser = None if scales is None else scales.laser_profile
    for c, lam in enumerate(sub.wavelengths):
        model = HologramModel(shape, sub.plane_depths, lam, cfg, laser)
        amp = sub.planes[..., c]
        amp = amp if target_is_amplitude else np.sqrt(amp)
        try:
            ph, sg, hist = optimize_channel(model, amp, cfg, phases0[c], sigma0[c], callback)
        except NonFiniteLossError as err:
            ph, sg = err.batch
            partial = HologramBatch(np.concatenate([np.array(out_phases).reshape(-1, *ph.shape), ph[None]]),
                                    out_scales + [sg], sub.wavelengths[:c + 1], cfg.pitch)
            raise NonFiniteLossError(str(err), batch=partial, history=histories + [err.history]) from err
        log.info("channel %d (%.0f nm): best loss %.6g", c, lam * 1e9, min(hist.loss, default=math.nan))
        out_phases.append(ph)
        out_scales.append(sg)
        histories.append(hist)
    batch = HologramBatch(np.stack(out_phases), out_scales, sub.wavelengths, cfg.pitch)
    return batch, histories
