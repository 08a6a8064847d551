"""Core volume types and NIfTI-backed load/save."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti
from .errors import MapShapeMismatch, NonFiniteData

PROB_SUM_EPS = 1e-6

SOURCE_EXTERNAL_FAST = "external_fast"
SOURCE_KMEANS_FALLBACK = "kmeans_fallback"
_SOURCES = (SOURCE_EXTERNAL_FAST, SOURCE_KMEANS_FALLBACK)


@dataclass(eq=False)
class Volume3D:
    """One subject scan: 3D intensity grid plus voxel spacing."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"all dimensions must be >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteData(f"volume {self.subject_id!r} contains NaN/Inf voxels")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(eq=False)
class ProbabilityMaps:
    """Per-voxel GM and WM probabilities aligned to a source volume."""

    p_gm: np.ndarray
    p_wm: np.ndarray
    source: str = SOURCE_EXTERNAL_FAST

    def __post_init__(self):
        self.p_gm = np.asarray(self.p_gm, dtype=np.float32)
        self.p_wm = np.asarray(self.p_wm, dtype=np.float32)
        if self.p_gm.shape != self.p_wm.shape:
            raise MapShapeMismatch(
                f"GM/WM map shapes differ: {self.p_gm.shape} vs {self.p_wm.shape}"
            )
        if self.p_gm.ndim != 3:
            raise MapShapeMismatch(f"maps must be 3D, got shape {self.p_gm.shape}")
        for name, m in (("GM", self.p_gm), ("WM", self.p_wm)):
            if not np.isfinite(m).all():
                raise MapShapeMismatch(f"{name} map contains NaN/Inf")
            if m.min() < 0.0 or m.max() > 1.0:
                raise MapShapeMismatch(
                    f"{name} map outside [0,1]: min={m.min():g} max={m.max():g}"
                )
        if (self.p_gm.astype(np.float64) + self.p_wm).max() > 1.0 + PROB_SUM_EPS:
            raise MapShapeMismatch("per-voxel GM+WM probability exceeds 1")
        if self.source not in _SOURCES:
            raise MapShapeMismatch(f"unknown map source {self.source!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.p_gm.shape


@dataclass
class ToolConfig:
    """How to invoke one external command-line tool."""

    executable_path: str
    extra_args: list[str] = field(default_factory=list)
    timeout_s: float = 3600.0

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError(f"timeout_s must be positive, got {self.timeout_s}")


def subject_id_from_path(path) -> str:
    """Filename stem with .nii/.nii.gz stripped."""
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(name).stem


def load_volume(path) -> Volume3D:
    """Load a NIfTI volume; subject id is derived from the filename."""
    data, spacing = nifti.read_nifti(path)
    subject = subject_id_from_path(path)
    if not np.isfinite(data).all():
        raise NonFiniteData(f"{path}: volume contains NaN/Inf voxels")
    return Volume3D(data=data.astype(np.float32), spacing=spacing, subject_id=subject)


def save_volume(vol: Volume3D, path) -> None:
    nifti.write_nifti(path, vol.data, vol.spacing)


def save_probability_maps(maps: ProbabilityMaps, gm_path, wm_path, spacing=(1.0, 1.0, 1.0)) -> None:
    nifti.write_nifti(gm_path, maps.p_gm.astype(np.float32), spacing)
    nifti.write_nifti(wm_path, maps.p_wm.astype(np.float32), spacing)


def load_probability_maps(gm_path, wm_path, source: str, expected_shape=None) -> ProbabilityMaps:
    """Load GM/WM maps and validate them against an expected volume shape."""
    gm, _ = nifti.read_nifti(gm_path)
    wm, _ = nifti.read_nifti(wm_path)
    maps = ProbabilityMaps(p_gm=gm, p_wm=wm, source=source)
    if expected_shape is not None and maps.shape != tuple(expected_shape):
        raise MapShapeMismatch(
            f"map shape {maps.shape} does not match volume shape {tuple(expected_shape)}"
        )
    return maps
