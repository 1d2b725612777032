"""Command-line entry points: ``render``, ``optimize``, ``eval``, ``sweep``, ``oracle-check``.

Every command reads one JSON config (``--config``) with a ``schema_version``
and the sections ``scene``, ``optics``, ``optimize``, ``eval`` and ``io``.
``--set section.key=value`` overrides single entries; values parse as JSON,
and lengths may carry a unit suffix (``8um``, ``2mm``). Exit codes: 0 on
success, 2 on invalid input, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import fileio
from .evalsuite import (dft_oracle, eyebox_sweep, finite_difference_check, focal_sweep,
                        simulate_reconstruction, stack_psnr)
from .fileio import SCHEMA_VERSION, ManifestError, parse_length
from .incoherent_render import MaskSpec, evenly_spaced_planes, render_focal_stack
from .optimizer import (HologramModel, NonFiniteLossError, OptimizerConfig, ScaleSet,
                        load_laser_profile, optimize, sample_pupils)
from .scenes import desk_scene, random_points, shadow_scene
from .wave_optics import ComplexField, PupilSpec, propagate

log = logging.getLogger("ergoholo")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

OPTICS_KEYS = ("pitch", "orders", "eyepiece_focal_length", "use_sinc")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "scene": {"ldi": None, "builtin": None, "volume_depth": 4e-3, "num_planes": 32, "plane_offset": 0.0,
              "mask": {"kind": "circular", "max_angle": None, "margin": 2}, "occlusion": True, "eps": None},
    "optics": {"pitch": 8e-6, "wavelengths": [632e-9, 520e-9, 450e-9], "orders": 3,
               "eyepiece_focal_length": 0.08, "use_sinc": True},
    "optimize": {"targets": None, "laser_profile": None},
    "eval": {"batch": None, "targets": None, "grid_n": 3, "radius": 2e-3,
             "pupil": None, "z_start": None, "z_end": None, "steps": 16},
    "io": {"output": "out", "overwrite": False},
}
LENGTH_KEYS = {"pitch", "volume_depth", "plane_offset", "eyepiece_focal_length", "base_radius",
               "radius", "z_start", "z_end", "eps"}
ABLATIONS = {"center-pupil-only": "center_pupil_only", "no-pupils": "disable_pupils",
             "no-time-multiplexing": "disable_time_multiplexing", "no-high-orders": "disable_high_orders"}


class InputError(Exception):
    """Invalid configuration or missing input; maps to exit code 2."""


# ---------------------------------------------------------------- config

def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _parse_value(key: str, text: str):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    if key in LENGTH_KEYS and isinstance(value, str):
        try:
            value = parse_length(value)
        except ValueError:
            raise InputError(f"--set {key}: cannot parse length {text!r}") from None
    if key == "wavelengths" and isinstance(value, str):
        value = [parse_length(v) for v in value.split(",")]
    return value


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file at ``path``, then ``section.key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise InputError(f"{path}: config file not found")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise InputError(f"{path}:{err.lineno}: invalid JSON ({err.msg})") from None
        if user.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise InputError(f"{path}: unsupported schema_version {user['schema_version']!r}")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise InputError(f"{path}: unknown sections {sorted(unknown)}")
        cfg = _merge(cfg, user)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise InputError(f"--set {item!r}: expected section.key=value")
        dotted, text = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in DEFAULTS or section == "schema_version":
            raise InputError(f"--set {item!r}: unknown section {section!r}")
        node = cfg[section]
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(parts[-1], text)
    cfg["schema_version"] = SCHEMA_VERSION
    return cfg


def optimizer_config(cfg: dict) -> OptimizerConfig:
    """OptimizerConfig from the ``optics`` and ``optimize`` sections."""
    opts = {k: v for k, v in cfg["optimize"].items() if k not in ("targets", "laser_profile")}
    for k in OPTICS_KEYS:
        opts.setdefault(k, cfg["optics"][k])
    try:
        return OptimizerConfig.from_dict(opts)
    except (TypeError, ValueError) as err:
        raise InputError(f"optimize: {err}") from None


def _validate_physical(cfg: dict) -> None:
    o = cfg["optics"]
    for key in ("pitch", "eyepiece_focal_length"):
        if not (isinstance(o[key], (int, float)) and o[key] > 0):
            raise InputError(f"optics.{key}: must be a positive length, got {o[key]!r}")
    if not o["wavelengths"] or not all(isinstance(w, (int, float)) and w > 0 for w in o["wavelengths"]):
        raise InputError(f"optics.wavelengths: must be positive lengths, got {o['wavelengths']!r}")
    s = cfg["scene"]
    if not (s["volume_depth"] > 0 and int(s["num_planes"]) >= 1):
        raise InputError("scene: volume_depth must be positive and num_planes >= 1")


def _output_dir(cfg: dict, name: str) -> Path:
    out = Path(cfg["io"]["output"]) / name
    if (out / "manifest.json").exists() and not cfg["io"]["overwrite"]:
        raise InputError(f"{out}: output exists (set io.overwrite=true to replace)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path, what: str) -> Path:
    if path is None:
        raise InputError(f"{what}: no path configured")
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: {what} not found")
    return path


# ---------------------------------------------------------------- commands

def _scene(cfg: dict):
    s = cfg["scene"]
    pitch = cfg["optics"]["pitch"]
    channels = len(cfg["optics"]["wavelengths"])
    if s["ldi"] is not None:
        ldi = fileio.load_ldi(_existing(s["ldi"], "LDI directory"))
    elif s["builtin"] == "desk":
        ldi = desk_scene(channels=channels, pitch=pitch)
    elif s["builtin"] == "shadow":
        ldi = shadow_scene(channels=channels, pitch=pitch)
    elif s["builtin"] == "points":
        ldi = random_points(channels=channels, pitch=pitch)
    else:
        raise InputError("scene: set scene.ldi to an LDI directory or scene.builtin to desk/shadow/points")
    if ldi.channels == 1 and channels > 1:
        ldi = type(ldi)(np.repeat(ldi.color, channels, axis=-1), ldi.depth, ldi.valid, ldi.pitch, ldi.volume_depth)
    if ldi.channels != channels:
        raise InputError(f"scene: LDI has {ldi.channels} channels but {channels} wavelengths are configured")
    return ldi


def cmd_render(cfg: dict) -> int:
    _validate_physical(cfg)
    s = cfg["scene"]
    ldi = _scene(cfg)
    if ldi.volume_depth is None:
        ldi.volume_depth = s["volume_depth"]
    planes = evenly_spaced_planes(s["volume_depth"], int(s["num_planes"]), s["plane_offset"])
    try:
        mask = MaskSpec(**s["mask"])
    except (TypeError, ValueError) as err:
        raise InputError(f"scene.mask: {err}") from None
    out = _output_dir(cfg, "stack")
    t0 = time.perf_counter()
    stack = render_focal_stack(ldi, planes, tuple(cfg["optics"]["wavelengths"]), mask,
                               eps=s["eps"], occlusion=bool(s["occlusion"]))
    stack.metadata["config"] = cfg
    fileio.save_focal_stack(stack, out)
    log.info("rendered %d planes in %.1f s -> %s", stack.num_planes, time.perf_counter() - t0, out)
    return EXIT_OK


def cmd_optimize(cfg: dict, render_first: bool = False) -> int:
    _validate_physical(cfg)
    ocfg = optimizer_config(cfg)
    if render_first:
        cmd_render(cfg)
        target_dir = Path(cfg["io"]["output"]) / "stack"
    else:
        target_dir = _existing(cfg["optimize"]["targets"], "target focal stack")
    targets = fileio.load_focal_stack(target_dir)
    scales = None
    if cfg["optimize"]["laser_profile"] is not None:
        prof = load_laser_profile(_existing(cfg["optimize"]["laser_profile"], "laser profile"),
                                  targets.planes.shape[1:3])
        scales = ScaleSet(laser_profile=prof)
    out = _output_dir(cfg, "batch")
    resolved = _resolved_echo(cfg, ocfg, str(target_dir))
    try:
        batch, histories = optimize(ocfg, targets, scales)
    except NonFiniteLossError as err:
        fileio.save_batch(err.batch, out, resolved["optimize"],
                          {"status": "non-finite", "message": str(err), "run_config": resolved})
        for c, hist in enumerate(err.history):
            fileio.write_loss_csv(hist, out / f"loss_c{c}.csv")
        raise
    fileio.save_batch(batch, out, resolved["optimize"], {"status": "ok", "run_config": resolved,
                                                         "pupils_iteration0": [
                                                             None if p is None else p.to_dict()
                                                             for p in sample_pupils(ocfg, 0)]})
    for c, hist in enumerate(histories):
        fileio.write_loss_csv(hist, out / f"loss_c{c}.csv")
    log.info("optimized batch written to %s", out)
    return EXIT_OK


def _resolved_echo(cfg: dict, ocfg: OptimizerConfig, targets: str) -> dict:
    echo = copy.deepcopy(cfg)
    echo["optimize"] = {**ocfg.to_dict(), "targets": targets,
                        "laser_profile": cfg["optimize"]["laser_profile"],
                        "resolved": ocfg.resolved().to_dict()}
    return echo


def _load_eval_inputs(cfg: dict):
    e = cfg["eval"]
    batch_dir = _existing(e["batch"], "hologram batch")
    batch = fileio.load_batch(batch_dir)
    manifest = fileio.batch_manifest(batch_dir)
    settings = {k: v for k, v in manifest.get("config", {}).items()
                if k in OptimizerConfig.__dataclass_fields__}
    ocfg = OptimizerConfig.from_dict(settings) if settings else optimizer_config(cfg)
    return batch, ocfg


def _pupil(spec):
    if spec is None:
        return None
    if isinstance(spec, dict):
        return PupilSpec(spec["center_x"], spec["center_y"], spec["radius"])
    x, y, r = (parse_length(v) for v in spec)
    return PupilSpec(x, y, r)


def cmd_eval(cfg: dict) -> int:
    e = cfg["eval"]
    batch, ocfg = _load_eval_inputs(cfg)
    targets = fileio.load_focal_stack(_existing(e["targets"], "target focal stack"))
    idx = ocfg.planes if ocfg.planes is not None else None
    if idx is None:
        from .optimizer import default_plane_indices
        idx = default_plane_indices(targets.num_planes, ocfg.num_planes)
    sub = targets.subset(idx)
    if sub.wavelengths != batch.wavelengths:
        raise InputError("eval: target wavelengths differ from the batch wavelengths")
    out = _output_dir(cfg, "eval")
    t0 = time.perf_counter()
    report = eyebox_sweep(batch, sub, int(e["grid_n"]), float(e["radius"]), ocfg)
    center = simulate_reconstruction(batch, _pupil(e["pupil"]) or PupilSpec(0.0, 0.0, ocfg.base_radius),
                                     sub.plane_depths, ocfg)
    report.summary["center_plane_psnr"] = [float(v) for v in stack_psnr(center, np.sqrt(sub.planes))]
    report.runtime_s = round(time.perf_counter() - t0, 3)
    report.to_csv(out / "eyebox.csv")
    report.runtime_s = None  # keep the JSON byte-identical across runs
    report.to_json(out / "report.json")
    if e["z_start"] is not None and e["z_end"] is not None:
        focal_sweep(batch, _pupil(e["pupil"]), float(e["z_start"]), float(e["z_end"]), int(e["steps"]),
                    ocfg, out / "sweep")
    (out / "manifest.json").write_text(json.dumps({"schema_version": SCHEMA_VERSION, "config": cfg},
                                                  indent=2, sort_keys=True) + "\n")
    log.info("evaluation written to %s", out)
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    e = cfg["eval"]
    batch, ocfg = _load_eval_inputs(cfg)
    if e["z_start"] is None or e["z_end"] is None:
        raise InputError("eval.z_start and eval.z_end are required for a sweep")
    out = _output_dir(cfg, "sweep")
    focal_sweep(batch, _pupil(e["pupil"]), float(e["z_start"]), float(e["z_end"]), int(e["steps"]), ocfg, out)
    (out / "manifest.json").write_text(json.dumps({"schema_version": SCHEMA_VERSION, "config": cfg},
                                                  indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_oracle_check(cfg: dict) -> int:
    """Direct-summation propagation oracle and finite-difference gradient check."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        u = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
        f = ComplexField(u, 8e-6, 520e-9)
        d = float(rng.uniform(-5e-3, 5e-3))
        worst = max(worst, float(np.max(np.abs(propagate(f, d).data - dft_oracle(f, d).data))))
    ok_dft = worst < 1e-10
    print(f"{'PASS' if ok_dft else 'FAIL'} dft-oracle max abs diff {worst:.3e} (limit 1e-10)")
    fd_worst = 0.0
    for i, orders in enumerate((1, 3, 1, 3, 3)):
        ocfg = OptimizerConfig(frames=2, orders=orders, n_fixed=1, n_random=1, seed=i, base_radius=2e-3)
        model = HologramModel((16, 16), [1e-3, 2e-3], 520e-9, ocfg)
        r = np.random.default_rng(100 + i)
        phases = r.uniform(0, 2 * np.pi, size=(2, 16, 16))
        targets = r.uniform(0, 1, size=(2, 16, 16))
        pick = [tuple(int(v) for v in r.integers(0, [2, 16, 16])) for _ in range(8)]
        with warnings.catch_warnings():
            # random pupils may overhang the single-order grid; the check is still exact
            warnings.simplefilter("ignore", RuntimeWarning)
            err = finite_difference_check(model, phases, 0.7, sample_pupils(ocfg, 0), targets, indices=pick)
        fd_worst = max(fd_worst, err)
    ok_fd = fd_worst < 1e-4
    print(f"{'PASS' if ok_fd else 'FAIL'} gradient-check max relative error {fd_worst:.3e} (limit 1e-4)")
    return EXIT_OK if ok_dft and ok_fd else EXIT_NUMERIC


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ergoholo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("render", "optimize", "eval", "sweep", "oracle-check"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--output", help="output directory (io.output)")
        if name == "optimize":
            p.add_argument("--render-first", action="store_true", help="render the target stack first")
            p.add_argument("--ablation", choices=sorted(ABLATIONS), action="append", default=[])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.output:
            overrides.append(f"io.output={json.dumps(args.output)}")
        for a in getattr(args, "ablation", []):
            overrides.append(f"optimize.{ABLATIONS[a]}=true")
        cfg = load_config(args.config, overrides)
        if args.command == "render":
            return cmd_render(cfg)
        if args.command == "optimize":
            return cmd_optimize(cfg, args.render_first)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_oracle_check(cfg)
    except NonFiniteLossError as err:
        print(f"error: {err} (last good batch written to {Path(cfg['io']['output']) / 'batch'})", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ManifestError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as err:
        print(f"error: invalid input: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
