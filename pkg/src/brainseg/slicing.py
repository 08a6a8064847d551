"""Orthogonal-plane slicing, resizing, mask fusion, and slice filtering."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptySlice, ShapeMismatch

PLANE_AXIAL = "axial"
PLANE_CORONAL = "coronal"
PLANE_SAGITTAL = "sagittal"
PLANES = (PLANE_AXIAL, PLANE_CORONAL, PLANE_SAGITTAL)

# volume axes are (nx, ny, nz); slicing axis per anatomical plane
_PLANE_AXIS = {PLANE_SAGITTAL: 0, PLANE_CORONAL: 1, PLANE_AXIAL: 2}

LABEL_BACKGROUND = 0
LABEL_GM = 1
LABEL_WM = 2


def plane_axis(plane: str) -> int:
    if plane not in _PLANE_AXIS:
        raise ValueError(f"unknown plane {plane!r}, expected one of {PLANES}")
    return _PLANE_AXIS[plane]


def extract_slices(volume: np.ndarray, plane: str) -> list[np.ndarray]:
    """All 2D slices along the plane's axis, in ascending index order."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {volume.shape}")
    axis = plane_axis(plane)
    return [np.ascontiguousarray(s) for s in np.moveaxis(volume, axis, 0)]


def stack_slices(slices: list[np.ndarray], plane: str) -> np.ndarray:
    """Inverse of extract_slices: rebuild the volume from its slices."""
    axis = plane_axis(plane)
    return np.ascontiguousarray(np.moveaxis(np.stack(slices, axis=0), 0, axis))


def resize_to_grid(slice_2d: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize to target x target (half-pixel-center convention)."""
    slice_2d = np.asarray(slice_2d)
    if slice_2d.ndim != 2 or slice_2d.size == 0:
        raise EmptySlice(f"cannot resize slice of shape {slice_2d.shape}")
    if slice_2d.shape == (target, target):
        return slice_2d.astype(np.float32)
    t = torch.from_numpy(slice_2d.astype(np.float32))[None, None]
    out = F.interpolate(t, size=(target, target), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def resize_probability_slice(slice_2d: np.ndarray, target: int) -> np.ndarray:
    """Resize a probability-map slice; interpolation keeps values in [0,1]
    up to float round-off, which is clipped away."""
    return np.clip(resize_to_grid(slice_2d, target), 0.0, 1.0)


def normalize_slice(slice_2d: np.ndarray) -> np.ndarray:
    """Per-slice min-max normalization to [0,1]; constant slices map to zero."""
    slice_2d = np.asarray(slice_2d, dtype=np.float32)
    lo = float(slice_2d.min())
    hi = float(slice_2d.max())
    if hi <= lo:
        return np.zeros_like(slice_2d)
    return (slice_2d - lo) / (hi - lo)


def fuse_mask(p_gm: np.ndarray, p_wm: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Combine GM/WM probabilities into a {0,1,2} label mask.

    A pixel becomes GM when p_gm > threshold and WM when p_wm > threshold;
    WM is applied second and wins the (post-resize) case where both exceed
    the threshold. Comparison is strictly greater, so p == threshold stays
    background.
    """
    p_gm = np.asarray(p_gm)
    p_wm = np.asarray(p_wm)
    if p_gm.shape != p_wm.shape:
        raise ShapeMismatch(f"map shapes differ: {p_gm.shape} vs {p_wm.shape}")
    label = np.zeros(p_gm.shape, dtype=np.uint8)
    label[p_gm > threshold] = LABEL_GM
    label[p_wm > threshold] = LABEL_WM
    return label


def is_informative(label: np.ndarray, min_tissue_fraction: float) -> bool:
    """True iff the fraction of GM/WM pixels reaches min_tissue_fraction."""
    label = np.asarray(label)
    tissue = np.count_nonzero((label == LABEL_GM) | (label == LABEL_WM))
    return tissue / label.size >= min_tissue_fraction
