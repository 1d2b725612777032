"""Metrics, simulated reconstructions, sweeps, and brute-force oracles."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .fileio import write_png
from .incoherent_render import (FocalStack, LayeredDepthImage, MaskSpec, incoherent_kernel,
                                trace_visibility)
from .optimizer import HologramBatch, HologramModel, OptimizerConfig, ScaleSet
from .wave_optics import ComplexField, PupilSpec

ORACLE_MAX_SIZE = 16


def psnr(image: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` with ``target`` as reference; ``inf`` when identical."""
    image = np.asarray(image, dtype=float)
    target = np.asarray(target, dtype=float)
    if image.shape != target.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {target.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((image - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def _fmt_psnr(v: float):
    return "identical" if math.isinf(v) else v


@dataclass
class MetricReport:
    plane_psnr: list = field(default_factory=list)
    pupil_psnr: list = field(default_factory=list)
    pupils: list = field(default_factory=list)
    loss: Optional[float] = None
    runtime_s: Optional[float] = None
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["plane_psnr"] = [_fmt_psnr(v) for v in self.plane_psnr]
        d["pupil_psnr"] = [[_fmt_psnr(v) for v in row] for row in self.pupil_psnr]
        d["summary"] = {k: _fmt_psnr(v) if isinstance(v, float) else v for k, v in self.summary.items()}
        return d

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path) -> None:
        """One row per evaluated pupil: index, center, radius, per-plane PSNR."""
        lines = ["pupil,center_x,center_y,radius," +
                 ",".join(f"plane{k}" for k in range(len(self.pupil_psnr[0]) if self.pupil_psnr else 0))]
        for i, (p, row) in enumerate(zip(self.pupils, self.pupil_psnr)):
            vals = ",".join("inf" if math.isinf(v) else f"{v:.6f}" for v in row)
            lines.append(f"{i},{p['center_x']:.9g},{p['center_y']:.9g},{p['radius']:.9g},{vals}")
        Path(path).write_text("\n".join(lines) + "\n")


def simulate_reconstruction(batch: HologramBatch, pupil: Optional[PupilSpec], plane_depths,
                            config: OptimizerConfig, scales: Optional[ScaleSet] = None) -> FocalStack:
    """Eye-view amplitude stack of ``batch`` through ``pupil`` (``None``: no iris).

    Per channel this is ``sqrt(mean_t |P(phi_t)|^2) / sigma_pupil`` on the
    supersampled grid, the same quantity the loss compares to its targets.
    """
    laser = None if scales is None else scales.laser_profile
    plane_depths = np.atleast_1d(np.asarray(plane_depths, dtype=float))
    chans = []
    for c, lam in enumerate(batch.wavelengths):
        model = HologramModel(batch.shape, plane_depths, lam, config, laser)
        chans.append(np.stack([model.amplitudes(batch.phases[c], batch.global_scale[c], pupil, k)
                               for k in range(len(plane_depths))]))
    planes = np.stack(chans, axis=-1).astype(float)
    return FocalStack(plane_depths, planes, batch.wavelengths, batch.pitch / config.resolved().orders,
                      {"pupil": None if pupil is None else pupil.to_dict(), "kind": "amplitude"})


def upsample_targets(target_amp: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsampling of ``(..., H, W, C)`` images by ``factor``."""
    if factor == 1:
        return target_amp
    return np.repeat(np.repeat(target_amp, factor, axis=-3), factor, axis=-2)


def stack_psnr(recon: FocalStack, target_amp: np.ndarray) -> list:
    """Per-plane PSNR of amplitude images; channels scaled so target peak is 1 and averaged."""
    target_amp = np.asarray(target_amp, dtype=float)
    if target_amp.ndim == 3:
        target_amp = target_amp[..., None]
    factor = recon.planes.shape[1] // target_amp.shape[1]
    tgt = upsample_targets(target_amp, factor)
    if tgt.shape != recon.planes.shape:
        raise ValueError(f"target {tgt.shape} and reconstruction {recon.planes.shape} disagree")
    out = []
    for k in range(recon.num_planes):
        vals = []
        for c in range(tgt.shape[-1]):
            peak = tgt[k, ..., c].max()
            peak = peak if peak > 0 else 1.0
            vals.append(psnr(recon.planes[k, ..., c] / peak, tgt[k, ..., c] / peak, 1.0))
        out.append(float(np.mean(vals)))
    return out


def dft_oracle(field: ComplexField, distance: float, pad: bool = False) -> ComplexField:
    """Band-limited angular-spectrum propagation by explicit summation (no FFT).

    ``out[m, n] = 1/(MN) sum_{k,l} H[k,l] e^{2 pi i (km/M + ln/N)}
    sum_{x,y} u[x,y] e^{-2 pi i (kx/M + ly/N)}``, with ``H`` evaluated
    from the frequencies ``k/(M p)`` (negative above Nyquist). ``pad``
    mirrors :func:`wave_optics.propagate`'s 2x zero padding.
    """
    u = np.asarray(field.data, dtype=complex)
    if max(u.shape) > ORACLE_MAX_SIZE:
        raise ValueError(f"dft_oracle refuses grids larger than {ORACLE_MAX_SIZE}x{ORACLE_MAX_SIZE}")
    h, w = u.shape
    if pad:
        big = np.zeros((2 * h, 2 * w), dtype=complex)
        big[h // 2:h // 2 + h, w // 2:w // 2 + w] = u
        u = big
    M, N = u.shape
    lam, p = field.wavelength, field.pitch

    def freqs(n):
        return np.array([(k if k < (n + 1) // 2 else k - n) / (n * p) for k in range(n)])

    fy, fx = freqs(M), freqs(N)
    H = np.zeros((M, N), dtype=complex)
    for k in range(M):
        for l in range(N):
            if fx[l] ** 2 + fy[k] ** 2 < 1.0 / lam ** 2:
                kz = 2 * np.pi / lam * math.sqrt(1.0 - (lam * fx[l]) ** 2 - (lam * fy[k]) ** 2)
                H[k, l] = complex(math.cos(kz * distance), math.sin(kz * distance))
    ym, xn = np.arange(M), np.arange(N)
    # forward[k, l, x, y] and inverse[m, n, k, l] summation kernels
    ky = np.exp(-2j * np.pi * np.outer(ym, ym) / M)  # [k, x]
    kx = np.exp(-2j * np.pi * np.outer(xn, xn) / N)  # [l, y]
    fwd = ky[:, None, :, None] * kx[None, :, None, :]  # [k, l, x, y]
    spectrum = np.einsum("klxy,xy->kl", fwd, u)
    inv = np.conj(ky).T[:, None, :, None] * np.conj(kx).T[None, :, None, :]  # [m, n, k, l]
    out = np.einsum("mnkl,kl->mn", inv, spectrum * H) / (M * N)
    if pad:
        out = out[h // 2:h // 2 + h, w // 2:w // 2 + w]
    return ComplexField(out, p, lam)


def brute_force_render(ldi: LayeredDepthImage, plane_depths, wavelengths, mask: MaskSpec = MaskSpec(),
                       eps: float = 0.0) -> np.ndarray:
    """Reference renderer looping over every (point, plane sample) pair.

    Returns planes ``(D, H, W, C)``. Meant for scenes of at most 32x32.
    """
    plane_depths = np.atleast_1d(plane_depths)
    hgt, wid = ldi.shape
    out = np.zeros((len(plane_depths), hgt, wid, len(wavelengths)))
    for k, zk in enumerate(plane_depths):
        for layer, y, x in zip(*np.nonzero(ldi.valid)):
            z = ldi.depth[layer, y, x]
            for c, lam in enumerate(wavelengths):
                kern = incoherent_kernel(z, zk, lam, ldi.pitch, mask).values
                hw = kern.shape[0] // 2
                for dy in range(-hw, hw + 1):
                    for dx in range(-hw, hw + 1):
                        ty, tx = y + dy, x + dx
                        wgt = kern[dy + hw, dx + hw]
                        if wgt == 0 or not (0 <= ty < hgt and 0 <= tx < wid):
                            continue
                        if trace_visibility(ldi, (y, x), layer, (ty, tx), zk, eps):
                            out[k, ty, tx, c] += ldi.color[layer, y, x, c] * wgt
    return out


def finite_difference_check(model: HologramModel, phases, sigma_g, pupils, targets,
                            step: float = 1e-6, indices=None) -> float:
    """Max |analytic - central FD| over the checked parameters, relative to max |FD|.

    ``indices`` selects phase entries (default: all); the global scale is
    always included.
    """
    targets = model.prepare_targets(targets)
    _, g_phase, g_sigma = model.evaluate(phases, sigma_g, pupils, targets)
    if indices is None:
        indices = list(np.ndindex(np.shape(phases)))

    def loss(ph, sg):
        return model.evaluate(ph, sg, pupils, targets, grad=False)[0].loss

    analytic, numeric = [], []
    for idx in indices:
        a, b = np.array(phases, dtype=float), np.array(phases, dtype=float)
        a[idx] += step
        b[idx] -= step
        numeric.append((loss(a, sigma_g) - loss(b, sigma_g)) / (2 * step))
        analytic.append(g_phase[idx])
    numeric.append((loss(phases, sigma_g + step) - loss(phases, sigma_g - step)) / (2 * step))
    analytic.append(g_sigma)
    analytic, numeric = np.array(analytic), np.array(numeric)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-300))


def tone_map(image: np.ndarray, percentile: float = 99.9, gamma: float = 2.2) -> np.ndarray:
    """Linear clip at ``percentile`` then display gamma; returns 8-bit."""
    image = np.asarray(image, dtype=float)
    hi = np.percentile(image, percentile)
    hi = hi if hi > 0 else 1.0
    v = np.clip(image / hi, 0.0, 1.0) ** (1.0 / gamma)
    return np.round(v * 255).astype(np.uint8)


def sharpness(image: np.ndarray) -> float:
    """Gradient energy ``sum |grad I|^2`` of a (channel-summed) image."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        img = img.sum(axis=-1)
    gy, gx = np.gradient(img)
    return float(np.sum(gx ** 2 + gy ** 2))


def focal_sweep(batch: HologramBatch, pupil: Optional[PupilSpec], z_start: float, z_end: float,
                steps: int, config: OptimizerConfig, out_dir=None, scales: Optional[ScaleSet] = None):
    """Amplitude frames at ``steps`` evenly spaced depths from ``z_start`` to ``z_end``.

    Returns ``(depths, frames)`` with frames shaped ``(steps, H, W, C)``.
    With ``out_dir`` it also writes ``frame_0000.png``... (tone mapped),
    the float frames as ``frames.npy`` and an ``index.json``.
    """
    if steps < 2:
        raise ValueError("a sweep needs at least two steps")
    depths = np.linspace(z_start, z_end, steps)
    # evaluate in increasing depth order (FocalStack ordering), then restore the sweep order
    order = np.argsort(depths, kind="stable")
    stack = simulate_reconstruction(batch, pupil, depths[order], config, scales) \
        if len(np.unique(depths)) == steps else None
    if stack is None:
        imgs = [simulate_reconstruction(batch, pupil, [d], config, scales).planes[0] for d in depths]
    else:
        imgs = [None] * steps
        for j, i in enumerate(order):
            imgs[i] = stack.planes[j]
    frames = np.stack(imgs)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        width = max(4, len(str(steps - 1)))
        names = []
        for i, f in enumerate(frames):
            name = f"frame_{i:0{width}d}.png"
            img = tone_map(f if f.shape[-1] == 3 else f[..., 0])
            write_png(out / name, img)
            names.append(name)
        np.save(out / "frames.npy", frames.astype(np.float32))
        index = {"depths": [float(d) for d in depths], "frames": names,
                 "pupil": None if pupil is None else pupil.to_dict()}
        (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return depths, frames


def eyebox_lattice(eyebox, grid_n: int, radius: float) -> list:
    """``grid_n x grid_n`` pupils spanning the eye box, inset by ``radius``."""
    if grid_n < 1:
        raise ValueError("grid_n must be >= 1")
    x0, y0, x1, y1 = eyebox
    if grid_n == 1:
        xs, ys = [(x0 + x1) / 2], [(y0 + y1) / 2]
    else:
        xs, ys = np.linspace(x0 + radius, x1 - radius, grid_n), np.linspace(y0 + radius, y1 - radius, grid_n)
    return [PupilSpec(float(x), float(y), radius, "fixed") for y in ys for x in xs]


def eyebox_sweep(batch: HologramBatch, targets: FocalStack, grid_n: int, radius: float,
                 config: OptimizerConfig, scales: Optional[ScaleSet] = None,
                 target_is_amplitude: bool = False) -> MetricReport:
    """PSNR at every pupil of a ``grid_n x grid_n`` lattice over the eye box.

    ``targets`` must hold the supervised planes. ``summary`` reports the
    min / mean / max over the lattice of the plane-averaged PSNR.
    """
    amp = targets.planes if target_is_amplitude else np.sqrt(targets.planes)
    pupils = eyebox_lattice(config.eyebox, grid_n, radius)
    grid = []
    for p in pupils:
        recon = simulate_reconstruction(batch, p, targets.plane_depths, config, scales)
        grid.append(stack_psnr(recon, amp))
    per_pupil = [float(np.mean(row)) for row in grid]
    summary = {"min": float(np.min(per_pupil)), "mean": float(np.mean(per_pupil)),
               "max": float(np.max(per_pupil)), "grid_n": grid_n, "radius": radius}
    plane_mean = [float(v) for v in np.mean(np.array(grid), axis=0)]
    return MetricReport(plane_psnr=plane_mean, pupil_psnr=grid,
                        pupils=[p.to_dict() for p in pupils], summary=summary)
