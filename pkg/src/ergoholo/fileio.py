"""File formats: LDI directories, focal stacks, hologram batches, loss histories.

Every directory artifact carries a ``manifest.json`` with a
``schema_version``. Lengths inside files are meters.
"""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path
from typing import Optional

import numpy as np
import png

from .incoherent_render import FocalStack, LayeredDepthImage
from .optimizer import HologramBatch, LossHistory, PHASE_LEVELS, PhasePattern

SCHEMA_VERSION = 1
DEPTH_UNITS = {"m": 1.0, "mm": 1e-3, "um": 1e-6}


class ManifestError(ValueError):
    """A manifest is missing, malformed, or points at missing files."""


# ---------------------------------------------------------------- PNG / PFM

def read_png(path) -> np.ndarray:
    """PNG as ``(H, W)`` or ``(H, W, C)`` uint8/uint16 array (alpha dropped)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing image file: {path}")
    w, h, rows, info = png.Reader(filename=str(path)).asDirect()
    dtype = np.uint16 if info["bitdepth"] > 8 else np.uint8
    arr = np.vstack([np.asarray(r, dtype=dtype) for r in rows]).reshape(h, w, info["planes"])
    if info.get("alpha"):
        arr = arr[..., :-1]
    return arr[..., 0] if arr.shape[-1] == 1 else arr


def write_png(path, image: np.ndarray) -> None:
    """Write a uint8/uint16 grayscale or RGB image."""
    image = np.asarray(image)
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] != 3):
        raise ValueError(f"PNG export needs (H, W) or (H, W, 3) data, got {image.shape}")
    if image.dtype not in (np.uint8, np.uint16):
        raise TypeError("PNG export needs uint8 or uint16 data")
    bitdepth = 16 if image.dtype == np.uint16 else 8
    h, w = image.shape[:2]
    greyscale = image.ndim == 2
    writer = png.Writer(w, h, greyscale=greyscale, bitdepth=bitdepth)
    with open(path, "wb") as fh:
        writer.write(fh, image.reshape(h, -1).tolist())


def read_pfm(path) -> np.ndarray:
    """Single-channel (``Pf``) or RGB (``PF``) portable float map, top row first."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing depth file: {path}")
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        while len(dims) < 2:
            dims += fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        endian = "<" if scale < 0 else ">"
        chans = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=endian + "f4", count=w * h * chans)
    data = data.reshape(h, w, chans) if chans == 3 else data.reshape(h, w)
    return np.flipud(data).astype(np.float32)


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    kind = b"PF" if data.ndim == 3 else b"Pf"
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(np.flipud(data)).tobytes())


def read_raw_f32(path, shape) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing raw file: {path}")
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {int(np.prod(shape))} floats, found {data.size}")
    return data.reshape(shape)


def write_raw_f32(path, data: np.ndarray) -> None:
    np.ascontiguousarray(data, dtype="<f4").tofile(path)


def _read_manifest(directory) -> dict:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ManifestError(f"{path}:{err.lineno}: invalid JSON ({err.msg})") from err
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError(f"{path}: unsupported schema_version {version!r}")
    return manifest


def _write_manifest(directory, manifest: dict) -> None:
    manifest = {"schema_version": SCHEMA_VERSION, **manifest}
    (Path(directory) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- LDI

def load_ldi(directory) -> LayeredDepthImage:
    """Load an LDI directory.

    ``manifest.json`` keys: ``pitch``, ``volume_depth``, ``depth_units``
    (m/mm/um), ``gamma`` (color linearization exponent), and ``layers``: a
    front-to-back list of ``{"color": png, "depth": pfm|raw, "valid": png?}``.
    Raw depth files need ``width``/``height`` in the manifest. Without a
    ``valid`` image, samples with finite depth are valid. A single entry in
    ``layers`` is a plain RGB-D image.
    """
    directory = Path(directory)
    m = _read_manifest(directory)
    try:
        layers = m["layers"]
        pitch = float(m["pitch"])
    except KeyError as err:
        raise ManifestError(f"{directory / 'manifest.json'}: missing key {err}") from None
    units = DEPTH_UNITS.get(m.get("depth_units", "m"))
    if units is None:
        raise ManifestError(f"unknown depth_units {m.get('depth_units')!r}")
    gamma = float(m.get("gamma", 2.2))
    colors, depths, valids = [], [], []
    for entry in layers:
        img = read_png(directory / entry["color"])
        peak = 65535.0 if img.dtype == np.uint16 else 255.0
        col = (img.astype(float) / peak) ** gamma
        if col.ndim == 2:
            col = col[..., None]
        dpath = directory / entry["depth"]
        if dpath.suffix.lower() == ".pfm":
            dep = read_pfm(dpath).astype(float)
        else:
            dep = read_raw_f32(dpath, (int(m["height"]), int(m["width"]))).astype(float)
        dep = dep * units
        if "valid" in entry:
            val = read_png(directory / entry["valid"]) > 0
        else:
            val = np.isfinite(dep)
        colors.append(col)
        depths.append(np.where(val, dep, np.inf))
        valids.append(val)
    volume = m.get("volume_depth")
    return LayeredDepthImage(np.stack(colors), np.stack(depths), np.stack(valids), pitch,
                             None if volume is None else float(volume) * units)


def save_ldi(ldi: LayeredDepthImage, directory, gamma: float = 2.2, bitdepth: int = 16) -> None:
    """Write ``ldi`` as PNG colors + PFM depths (meters) + manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    peak = 65535 if bitdepth == 16 else 255
    dtype = np.uint16 if bitdepth == 16 else np.uint8
    entries = []
    for i in range(ldi.num_layers):
        col = np.clip(ldi.color[i], 0.0, 1.0) ** (1.0 / gamma)
        img = np.round(col * peak).astype(dtype)
        write_png(directory / f"layer{i}_color.png", img[..., 0] if img.shape[-1] == 1 else img)
        write_pfm(directory / f"layer{i}_depth.pfm", np.where(ldi.valid[i], ldi.depth[i], np.inf))
        write_png(directory / f"layer{i}_valid.png", ldi.valid[i].astype(np.uint8) * 255)
        entries.append({"color": f"layer{i}_color.png", "depth": f"layer{i}_depth.pfm",
                        "valid": f"layer{i}_valid.png"})
    _write_manifest(directory, {"pitch": ldi.pitch, "volume_depth": ldi.volume_depth, "depth_units": "m",
                                "gamma": gamma, "width": ldi.shape[1], "height": ldi.shape[0],
                                "layers": entries})


# ---------------------------------------------------------------- focal stack

def save_focal_stack(stack: FocalStack, directory, tone_map=None) -> None:
    """Raw float32 planes, one tone-mapped PNG per plane, and a manifest."""
    from .evalsuite import tone_map as default_tone_map
    tone_map = tone_map or default_tone_map
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_raw_f32(directory / "planes.f32", stack.planes)
    width = max(3, len(str(stack.num_planes - 1)))
    names = []
    for k in range(stack.num_planes):
        name = f"plane_{k:0{width}d}.png"
        img = stack.planes[k]
        if img.shape[-1] != 3:
            # channels side by side as one grayscale strip
            img = np.concatenate([img[..., c] for c in range(img.shape[-1])], axis=1)
        write_png(directory / name, tone_map(img))
        names.append(name)
    _write_manifest(directory, {"plane_depths": [float(z) for z in stack.plane_depths],
                                "wavelengths": list(stack.wavelengths), "pitch": stack.pitch,
                                "shape": list(stack.planes.shape), "raw": "planes.f32",
                                "raw_dtype": "float32-le", "pngs": names,
                                "metadata": stack.metadata})


def load_focal_stack(directory) -> FocalStack:
    directory = Path(directory)
    m = _read_manifest(directory)
    planes = read_raw_f32(directory / m.get("raw", "planes.f32"), tuple(m["shape"]))
    return FocalStack(m["plane_depths"], planes.astype(float), tuple(m["wavelengths"]), float(m["pitch"]),
                      m.get("metadata", {}))


# ---------------------------------------------------------------- hologram batch

def save_batch(batch: HologramBatch, directory, config: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    """One 8-bit phase PNG per (channel, frame) plus a manifest echoing ``config``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for c in range(batch.channels):
        row = []
        for t in range(batch.frames):
            name = f"phase_c{c}_t{t}.png"
            write_png(directory / name, PhasePattern(batch.phases[c, t], batch.pitch).quantize())
            row.append(name)
        files.append(row)
    manifest = {"pitch": batch.pitch, "wavelengths": list(batch.wavelengths), "frames": batch.frames,
                "global_scale": [float(s) for s in batch.global_scale], "phase_levels": PHASE_LEVELS,
                "files": files, "config": config or {}}
    if config and "seed" in config:
        manifest["seed"] = config["seed"]
    if extra:
        manifest.update(extra)
    _write_manifest(directory, manifest)


def load_batch(directory) -> HologramBatch:
    directory = Path(directory)
    m = _read_manifest(directory)
    levels = int(m.get("phase_levels", PHASE_LEVELS))
    phases = np.stack([np.stack([PhasePattern.from_levels(read_png(directory / f), m["pitch"], levels).phase
                                 for f in row]) for row in m["files"]])
    return HologramBatch(phases, m["global_scale"], tuple(m["wavelengths"]), float(m["pitch"]))


def batch_manifest(directory) -> dict:
    return _read_manifest(directory)


# ---------------------------------------------------------------- loss history

LOSS_COLUMNS = ("iteration", "loss", "best_loss", "wall_ms")


def write_loss_csv(history: LossHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for it, loss, best, ms in history.rows():
            w.writerow([it, repr(loss), repr(best), f"{ms:.3f}"])


def read_loss_csv(path) -> LossHistory:
    hist = LossHistory()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOSS_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            hist.append(int(row["iteration"]), float(row["loss"]), float(row["best_loss"]), float(row["wall_ms"]))
    return hist


# ---------------------------------------------------------------- units

_UNIT_RE = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(nm|um|µm|mm|cm|m)\s*$")
_UNIT_SCALE = {"nm": 1e-9, "um": 1e-6, "µm": 1e-6, "mm": 1e-3, "cm": 1e-2, "m": 1.0}


def parse_length(text) -> float:
    """``"8um"`` -> ``8e-6``; bare numbers are meters."""
    if isinstance(text, (int, float)):
        return float(text)
    m = _UNIT_RE.match(str(text))
    if m:
        return float(m.group(1)) * _UNIT_SCALE[m.group(2)]
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"non-finite length {text!r}")
    return value
