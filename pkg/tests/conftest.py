"""Shared fixtures: synthetic volumes, fake external tools, synthetic slice sets."""

from __future__ import annotations

import os
import stat
from pathlib import Path

import numpy as np
import pytest

from brainseg.volume import Volume3D


def make_plateau_volume(shape=(12, 12, 12), subject_id="subj", levels=(10.0, 50.0, 90.0)):
    """Volume with three equal-thirds intensity plateaus along x, zero border."""
    data = np.zeros(shape, dtype=np.float32)
    nx = shape[0]
    third = max(nx // 3, 1)
    data[:third] = levels[0]
    data[third : 2 * third] = levels[1]
    data[2 * third :] = levels[2]
    data[:, 0, :] = 0.0  # keep some background voxels
    return Volume3D(data=data, spacing=(1.0, 1.0, 1.0), subject_id=subject_id)


def make_random_volume(shape=(10, 11, 12), seed=0, subject_id="subj"):
    rng = np.random.default_rng(seed)
    data = rng.random(shape, dtype=np.float32) * 100.0
    return Volume3D(data=data, spacing=(1.0, 1.0, 1.0), subject_id=subject_id)


def _write_script(path: Path, body: str) -> Path:
    path.write_text("#!/usr/bin/env python3\n" + body, encoding="utf-8")
    path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return path


@pytest.fixture
def fake_bet(tmp_path):
    """Executable mimicking `bet <in> <out>`: zeroes a one-voxel border."""
    return _write_script(
        tmp_path / "bet",
        """
import sys
from brainseg import nifti

data, spacing = nifti.read_nifti(sys.argv[1])
out = data.copy()
out[0, :, :] = 0; out[-1, :, :] = 0
out[:, 0, :] = 0; out[:, -1, :] = 0
out[:, :, 0] = 0; out[:, :, -1] = 0
nifti.write_nifti(sys.argv[2], out, spacing)
""",
    )


@pytest.fixture
def fake_fast(tmp_path):
    """Executable mimicking `fast <in>`: writes *_pve_1/2 maps from intensity tertiles."""
    return _write_script(
        tmp_path / "fast",
        """
import sys
import numpy as np
from brainseg import nifti

in_path = sys.argv[-1]
data, spacing = nifti.read_nifti(in_path)
base = in_path[: -len(".nii.gz")] if in_path.endswith(".nii.gz") else in_path[: -len(".nii")]
hi = data.max() or 1.0
norm = data / hi
p_gm = np.where((norm > 0.3) & (norm <= 0.7), 0.9, 0.05).astype(np.float32)
p_wm = np.where(norm > 0.7, 0.9, 0.05).astype(np.float32)
p_gm[data == 0] = 0.0
p_wm[data == 0] = 0.0
nifti.write_nifti(base + "_pve_1.nii.gz", p_gm, spacing)
nifti.write_nifti(base + "_pve_2.nii.gz", p_wm, spacing)
""",
    )


@pytest.fixture
def broken_tool(tmp_path):
    """Executable that always exits nonzero."""
    return _write_script(tmp_path / "broken", "import sys\nsys.exit(3)\n")


@pytest.fixture
def slow_tool(tmp_path):
    """Executable that sleeps past any sane timeout."""
    return _write_script(tmp_path / "slow", "import time\ntime.sleep(30)\n")


def synth_slice_pair(k: int, size: int = 256):
    """Deterministic geometric GM/WM pattern: one rectangle per tissue class.

    Rectangles are aligned to the 16-pixel grid with sides of at least
    three cells; GM sits in the left half, WM in the right.
    """
    rng = np.random.default_rng(k)
    label = np.zeros((size, size), dtype=np.uint8)
    gx0, gy0 = 16 * rng.integers(0, 4), 16 * rng.integers(0, 8)
    gw, gh = 16 * rng.integers(3, 5), 16 * rng.integers(3, 8)
    wx0, wy0 = size // 2 + 16 * rng.integers(0, 4), 16 * rng.integers(0, 8)
    ww, wh = 16 * rng.integers(3, 5), 16 * rng.integers(3, 8)
    label[gy0 : gy0 + gh, gx0 : gx0 + gw] = 1
    label[wy0 : wy0 + wh, wx0 : wx0 + ww] = 2
    image = np.full((size, size), 0.05, dtype=np.float32)
    image[label == 1] = 0.5
    image[label == 2] = 0.9
    return image, label


def write_synth_dataset(root: Path, n: int, split: str = "train", plane: str = "axial",
                        first: int = 0) -> Path:
    """Write n synthetic slice pairs plus a manifest; returns the manifest path."""
    from brainseg.dataset import (
        DatasetManifest,
        ManifestEntry,
        write_image_png,
        write_label_png,
        write_manifest,
    )

    manifest = DatasetManifest(split=split, seed=0, build_config_hash="synthetic")
    for k in range(first, first + n):
        image, label = synth_slice_pair(k)
        rel_img = f"{split}/{plane}/s{k:03d}_0000.png"
        rel_lbl = f"{split}/{plane}/s{k:03d}_0000_label.png"
        write_image_png(root / rel_img, image)
        write_label_png(root / rel_lbl, label)
        manifest.entries.append(ManifestEntry(rel_img, rel_lbl, f"s{k:03d}", plane, 0))
    return write_manifest(manifest, root)


@pytest.fixture
def no_fsl_env(monkeypatch, tmp_path):
    """PATH without bet/fast and no BRAINSEG_FSL_DIR."""
    empty = tmp_path / "emptybin"
    empty.mkdir()
    monkeypatch.setenv("PATH", str(empty))
    monkeypatch.delenv("BRAINSEG_FSL_DIR", raising=False)
    return empty
