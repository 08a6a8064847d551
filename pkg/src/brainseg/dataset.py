"""Build pseudo-labeled 2D slice datasets with subject-level splits.

Output layout: <root>/<split>/<plane>/<subject>_<index>.png plus the
matching ..._label.png, and one JSON-lines manifest per split (header
record followed by one record per slice).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DuplicateIds, ManifestWriteFailure, MissingManifest
from .slicing import (
    PLANES,
    extract_slices,
    fuse_mask,
    is_informative,
    normalize_slice,
    resize_probability_slice,
    resize_to_grid,
)
from .volume import ProbabilityMaps, Volume3D, load_probability_maps, load_volume

SPLITS = ("train", "val", "test")


@dataclass
class BuildConfig:
    target_resolution: int = 256
    threshold: float = 0.5
    min_tissue_fraction: float = 0.01
    planes: tuple[str, ...] = PLANES

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0,1), got {self.threshold}")
        if self.target_resolution < 16:
            raise ValueError(f"target_resolution must be >= 16, got {self.target_resolution}")
        if not 0.0 <= self.min_tissue_fraction < 1.0:
            raise ValueError(
                f"min_tissue_fraction must be in [0,1), got {self.min_tissue_fraction}"
            )
        self.planes = tuple(self.planes)
        for p in self.planes:
            if p not in PLANES:
                raise ValueError(f"unknown plane {p!r}")

    def content_hash(self) -> str:
        blob = json.dumps(
            {
                "target_resolution": self.target_resolution,
                "threshold": self.threshold,
                "min_tissue_fraction": self.min_tissue_fraction,
                "planes": list(self.planes),
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ManifestEntry:
    image_path: str  # relative to the dataset root
    label_path: str
    subject_id: str
    plane: str
    index: int


@dataclass(eq=False)
class SlicePair:
    """One training example: grayscale slice plus its three-class mask."""

    image: np.ndarray
    label: np.ndarray
    subject_id: str = ""
    plane: str = PLANES[0]
    index: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.label = np.asarray(self.label)
        if self.image.shape != self.label.shape:
            raise ValueError(
                f"image shape {self.image.shape} != label shape {self.label.shape}"
            )
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise ValueError("slice image values must lie in [0,1]")
        if not np.isin(self.label, (0, 1, 2)).all():
            raise ValueError("label values must be in {0,1,2}")
        if self.plane not in PLANES:
            raise ValueError(f"unknown plane {self.plane!r}")
        if self.index < 0:
            raise ValueError(f"index must be non-negative, got {self.index}")


def load_slice_pair(root, entry: ManifestEntry) -> SlicePair:
    root = Path(root)
    return SlicePair(
        image=read_image_png(root / entry.image_path),
        label=read_label_png(root / entry.label_path),
        subject_id=entry.subject_id,
        plane=entry.plane,
        index=entry.index,
    )


@dataclass
class DatasetManifest:
    split: str
    seed: int
    build_config_hash: str
    entries: list[ManifestEntry] = field(default_factory=list)


def split_subjects(
    subject_ids: list[str], fractions: tuple[float, float, float], seed: int
) -> tuple[list[str], list[str], list[str]]:
    """Deterministic subject-level train/val/test split.

    Train and val sizes are floors of their fractions; the remainder goes
    to test.
    """
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise DuplicateIds("subject id list contains duplicates")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_train = math.floor(fractions[0] * n)
    n_val = math.floor(fractions[1] * n)
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


def write_image_png(path: Path, image01: np.ndarray) -> None:
    """8-bit grayscale PNG from a [0,1] float image."""
    arr = np.clip(np.rint(np.asarray(image01) * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def write_label_png(path: Path, label: np.ndarray) -> None:
    """Label PNG storing raw class indices {0,1,2}."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(label, dtype=np.uint8), mode="L").save(path, format="PNG")


def read_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.int64)


def manifest_path(root, split: str) -> Path:
    return Path(root) / f"manifest_{split}.jsonl"


def write_manifest(manifest: DatasetManifest, root) -> Path:
    root = Path(root)
    path = manifest_path(root, manifest.split)
    try:
        for e in manifest.entries:
            for rel in (e.image_path, e.label_path):
                if not (root / rel).is_file():
                    raise ManifestWriteFailure(f"manifest references missing file {rel}")
        lines = [
            json.dumps(
                {
                    "split": manifest.split,
                    "seed": manifest.seed,
                    "build_config_hash": manifest.build_config_hash,
                },
                sort_keys=True,
            )
        ]
        for e in manifest.entries:
            lines.append(
                json.dumps(
                    {
                        "image_path": e.image_path,
                        "label_path": e.label_path,
                        "subject_id": e.subject_id,
                        "plane": e.plane,
                        "index": e.index,
                    },
                    sort_keys=True,
                )
            )
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise ManifestWriteFailure(f"could not write manifest {path}: {e}")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingManifest(f"no manifest at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise MissingManifest(f"manifest {path} is empty")
    header = json.loads(lines[0])
    manifest = DatasetManifest(
        split=header["split"],
        seed=header["seed"],
        build_config_hash=header["build_config_hash"],
    )
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        manifest.entries.append(ManifestEntry(**rec))
    return manifest


def _as_volume(value) -> Volume3D:
    return value if isinstance(value, Volume3D) else load_volume(value)


def _as_maps(value, expected_shape) -> ProbabilityMaps:
    if isinstance(value, ProbabilityMaps):
        return value
    gm_path, wm_path, source = value
    return load_probability_maps(gm_path, wm_path, source, expected_shape=expected_shape)


def build_dataset(
    volumes,
    maps,
    out_root,
    config: BuildConfig,
    splits: dict[str, list[str]],
    seed: int = 0,
) -> dict[str, DatasetManifest]:
    """Slice, resize, fuse, filter, and write one dataset per split.

    `volumes` maps subject id -> Volume3D or NIfTI path; `maps` maps
    subject id -> ProbabilityMaps or (gm_path, wm_path, source). Splitting
    is by subject: split lists must be pairwise disjoint.
    """
    out_root = Path(out_root)
    seen: set[str] = set()
    for split, ids in splits.items():
        overlap = seen & set(ids)
        if overlap:
            raise DuplicateIds(f"subjects in more than one split: {sorted(overlap)}")
        seen |= set(ids)

    cfg_hash = config.content_hash()
    manifests: dict[str, DatasetManifest] = {}
    for split in SPLITS:
        if split not in splits:
            continue
        manifest = DatasetManifest(split=split, seed=seed, build_config_hash=cfg_hash)
        for subject in splits[split]:
            vol = _as_volume(volumes[subject])
            pmaps = _as_maps(maps[subject], vol.shape)
            if pmaps.shape != vol.shape:
                raise ManifestWriteFailure(
                    f"{subject}: map shape {pmaps.shape} != volume shape {vol.shape}"
                )
            for plane in config.planes:
                img_slices = extract_slices(vol.data, plane)
                gm_slices = extract_slices(pmaps.p_gm, plane)
                wm_slices = extract_slices(pmaps.p_wm, plane)
                for index, (img, gm, wm) in enumerate(zip(img_slices, gm_slices, wm_slices)):
                    gm_r = resize_probability_slice(gm, config.target_resolution)
                    wm_r = resize_probability_slice(wm, config.target_resolution)
                    label = fuse_mask(gm_r, wm_r, config.threshold)
                    if not is_informative(label, config.min_tissue_fraction):
                        continue
                    image = normalize_slice(resize_to_grid(img, config.target_resolution))
                    rel_img = f"{split}/{plane}/{subject}_{index:04d}.png"
                    rel_lbl = f"{split}/{plane}/{subject}_{index:04d}_label.png"
                    write_image_png(out_root / rel_img, image)
                    write_label_png(out_root / rel_lbl, label)
                    manifest.entries.append(
                        ManifestEntry(
                            image_path=rel_img,
                            label_path=rel_lbl,
                            subject_id=subject,
                            plane=plane,
                            index=index,
                        )
                    )
        write_manifest(manifest, out_root)
        manifests[split] = manifest
    return manifests
