"""Incoherent focal-stack rendering and hologram optimization in simulation."""

from .evalsuite import (MetricReport, dft_oracle, eyebox_sweep, focal_sweep, psnr,
                        simulate_reconstruction)
from .incoherent_render import (FocalStack, LayeredDepthImage, MaskSpec, incoherent_kernel,
                                render_focal_stack, trace_visibility)
from .optimizer import HologramBatch, OptimizerConfig, PhasePattern, optimize
from .wave_optics import ComplexField, OpticsSettings, PupilSpec, propagate, reconstruct_plane

__version__ = "0.1.0"

__all__ = [
    "ComplexField", "FocalStack", "HologramBatch", "LayeredDepthImage", "MaskSpec", "MetricReport",
    "OpticsSettings", "OptimizerConfig", "PhasePattern", "PupilSpec", "dft_oracle", "eyebox_sweep",
    "focal_sweep", "incoherent_kernel", "optimize", "propagate", "psnr", "reconstruct_plane",
    "render_focal_stack", "simulate_reconstruction", "trace_visibility",
]
