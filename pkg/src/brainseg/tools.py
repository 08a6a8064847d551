"""Subprocess clients for the external brain-extraction and tissue-segmentation tools.

Both tools are consumed through their command-line contracts (`bet <in> <out>`,
`fast [args] <in>`, exit code 0 = success); their internals are never
reimplemented here. The fallback pseudo-labeler lives in `fallback.py`.
"""

from __future__ import annotations

import os
import shutil
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .errors import ToolFailure, ToolNotFound, ToolTimeout
from .volume import (
    SOURCE_EXTERNAL_FAST,
    ProbabilityMaps,
    ToolConfig,
    Volume3D,
    load_probability_maps,
    load_volume,
    save_volume,
)

FSL_DIR_ENV = "BRAINSEG_FSL_DIR"

# FAST emits one partial-volume map per class; for T1 the conventional order
# is 0=CSF, 1=GM, 2=WM. Patterns are overridable for posterior-map setups.
DEFAULT_GM_PATTERN = "{base}_pve_1.nii.gz"
DEFAULT_WM_PATTERN = "{base}_pve_2.nii.gz"


def resolve_executable(cfg: ToolConfig) -> str:
    """Resolve a tool path: explicit path, then PATH, then $BRAINSEG_FSL_DIR/bin."""
    exe = cfg.executable_path
    p = Path(exe)
    if p.is_absolute() or os.sep in exe:
        if p.is_file() and os.access(p, os.X_OK):
            return str(p)
        raise ToolNotFound(f"external tool not found: {exe}")
    found = shutil.which(exe)
    if found:
        return found
    fsl_dir = os.environ.get(FSL_DIR_ENV)
    if fsl_dir:
        candidate = Path(fsl_dir) / "bin" / exe
        if candidate.is_file() and os.access(candidate, os.X_OK):
            return str(candidate)
    raise ToolNotFound(f"external tool not found: {exe}")


def _scratch_dir(work_dir):
    if work_dir is not None:
        Path(work_dir).mkdir(parents=True, exist_ok=True)
    return tempfile.TemporaryDirectory(dir=work_dir)


def _run(cmd: list[str], timeout_s: float) -> None:
    env = dict(os.environ, FSLOUTPUTTYPE="NIFTI_GZ")
    try:
        proc = subprocess.run(
            cmd, capture_output=True, text=True, timeout=timeout_s, env=env
        )
    except subprocess.TimeoutExpired:
        raise ToolTimeout(f"{cmd[0]} exceeded timeout of {timeout_s}s")
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout or "").strip()[-500:]
        raise ToolFailure(f"{cmd[0]} exited {proc.returncode}: {tail}")


def run_brain_extraction(vol: Volume3D, cfg: ToolConfig, work_dir=None) -> Volume3D:
    """Strip non-brain voxels via the external extraction tool.

    The output must keep the input shape and cannot gain nonzero voxels;
    either violation is reported as ToolFailure.
    """
    exe = resolve_executable(cfg)
    with _scratch_dir(work_dir) as td:
        in_path = Path(td) / f"{vol.subject_id or 'input'}.nii.gz"
        out_path = Path(td) / f"{vol.subject_id or 'input'}_brain.nii.gz"
        save_volume(vol, in_path)
        _run([exe, str(in_path), str(out_path), *cfg.extra_args], cfg.timeout_s)
        if not out_path.is_file():
            raise ToolFailure(f"{exe} produced no output at {out_path}")
        out = load_volume(out_path)
    if out.shape != vol.shape:
        raise ToolFailure(
            f"brain extraction changed volume shape: {vol.shape} -> {out.shape}"
        )
    if np.count_nonzero(out.data) > np.count_nonzero(vol.data):
        raise ToolFailure("brain extraction increased the number of nonzero voxels")
    out.subject_id = vol.subject_id
    return out


def run_tissue_segmentation(
    vol: Volume3D,
    cfg: ToolConfig,
    work_dir=None,
    gm_pattern: str = DEFAULT_GM_PATTERN,
    wm_pattern: str = DEFAULT_WM_PATTERN,
) -> ProbabilityMaps:
    """Run the external tissue classifier and collect its GM/WM probability maps."""
    exe = resolve_executable(cfg)
    with _scratch_dir(work_dir) as td:
        in_path = Path(td) / f"{vol.subject_id or 'input'}.nii.gz"
        save_volume(vol, in_path)
        _run([exe, *cfg.extra_args, str(in_path)], cfg.timeout_s)
        base = str(in_path)[: -len(".nii.gz")]
        gm_path = Path(gm_pattern.format(base=base))
        wm_path = Path(wm_pattern.format(base=base))
        for p in (gm_path, wm_path):
            if not p.is_file():
                raise ToolFailure(f"{exe} did not produce expected map {p.name}")
        maps = load_probability_maps(
            gm_path, wm_path, source=SOURCE_EXTERNAL_FAST, expected_shape=vol.shape
        )
    return maps
