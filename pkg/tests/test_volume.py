"""Volume3D/ProbabilityMaps validation and NIfTI-backed load/save."""

from __future__ import annotations

import numpy as np
import pytest

from brainseg.errors import MapShapeMismatch, NonFiniteData
from brainseg.nifti import write_nifti
from brainseg.volume import (
    ProbabilityMaps,
    ToolConfig,
    Volume3D,
    load_volume,
    save_volume,
    subject_id_from_path,
)


def test_volume_round_trip(tmp_path):
    data = np.random.default_rng(0).random((8, 8, 8)).astype(np.float32)
    vol = Volume3D(data=data, spacing=(1.0, 1.2, 1.5), subject_id="s1")
    path = tmp_path / "s1.nii.gz"
    save_volume(vol, path)
    back = load_volume(path)
    assert np.array_equal(back.data, data)
    assert back.spacing == pytest.approx(vol.spacing, abs=1e-6)
    assert back.subject_id == "s1"


def test_nan_volume_rejected(tmp_path):
    data = np.ones((4, 4, 4), dtype=np.float32)
    data[1, 2, 3] = np.nan
    path = tmp_path / "nan.nii"
    write_nifti(path, data)
    with pytest.raises(NonFiniteData):
        load_volume(path)


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume3D(data=np.zeros((4, 4)))
    with pytest.raises(NonFiniteData):
        Volume3D(data=np.full((2, 2, 2), np.inf))
    with pytest.raises(ValueError):
        Volume3D(data=np.zeros((2, 2, 2)), spacing=(1.0, -1.0, 1.0))


@pytest.mark.parametrize(
    "name,expected",
    [
        ("IXI002-Guys-0828-T1.nii.gz", "IXI002-Guys-0828-T1"),
        ("scan.nii", "scan"),
        ("/abs/dir/sub 1.nii.gz", "sub 1"),
    ],
)
def test_subject_id_from_path(name, expected):
    assert subject_id_from_path(name) == expected


def test_probability_maps_valid():
    p = np.full((3, 3, 3), 0.4, dtype=np.float32)
    maps = ProbabilityMaps(p_gm=p, p_wm=p, source="external_fast")
    assert maps.shape == (3, 3, 3)


def test_probability_maps_sum_cap():
    gm = np.full((2, 2, 2), 0.7, dtype=np.float32)
    wm = np.full((2, 2, 2), 0.7, dtype=np.float32)
    with pytest.raises(MapShapeMismatch):
        ProbabilityMaps(p_gm=gm, p_wm=wm, source="external_fast")


def test_probability_maps_shape_and_range():
    gm = np.zeros((2, 2, 2), dtype=np.float32)
    with pytest.raises(MapShapeMismatch):
        ProbabilityMaps(p_gm=gm, p_wm=np.zeros((2, 2, 3), dtype=np.float32))
    with pytest.raises(MapShapeMismatch):
        ProbabilityMaps(p_gm=gm - 0.1, p_wm=gm)
    with pytest.raises(MapShapeMismatch):
        ProbabilityMaps(p_gm=gm, p_wm=gm, source="mystery")


def test_tool_config_timeout():
    with pytest.raises(ValueError):
        ToolConfig("bet", timeout_s=0.0)
