"""Shipped scale presets and their published reference totals.

The width/depth tables are reconstructions around the documented placement
rules (n per scale, 7x7 kernels, ADown sites, transformer counts); the
reference totals below are the published full-model figures (detection,
millions of params / billions of FLOPs) and are printed for comparison only.
The presets cover backbone + neck, so computed totals land below them.
"""
from __future__ import annotations

from importlib import resources

from ..graph import parse_config

SCALES = ("N", "S", "M", "L", "X")

# scale -> (params in millions, FLOPs in billions), published, detection task
REFERENCE_TOTALS = {
    "N": (3.78, 13.7),
    "S": (11.58, 47.9),
    "M": (20.29, 94.5),
    "L": (24.63, 115.2),
    "X": (72.7, 208.3),
}


def preset_text(scale: str) -> str:
    scale = scale.upper()
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r} (want one of {SCALES})")
    name = f"vajra_v1_{scale.lower()}.cfg"
    return resources.files("vajrakit.presets").joinpath(name).read_text("utf-8")


def load_preset(scale: str):
    """Parse a shipped preset into (ModelGraph, ScaleConfig)."""
    return parse_config(preset_text(scale))
