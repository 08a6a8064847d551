"""FSL-free fallback pseudo-labeler: intensity thresholding and k-means tissue priors."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInput, InvalidRange
from .volume import SOURCE_KMEANS_FALLBACK, ProbabilityMaps, Volume3D

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


def intensity_threshold_mask(vol: Volume3D, low: float, high: float) -> np.ndarray:
    """Boolean mask of voxels with low <= intensity < high."""
    if low > high:
        raise InvalidRange(f"low ({low}) > high ({high})")
    return (vol.data >= low) & (vol.data < high)


def kmeans_tissue_prior(vol: Volume3D, seed: int = 0) -> ProbabilityMaps:
    """Cluster nonzero voxel intensities into three tissue classes.

    Plain Lloyd iterations on the 1-D intensity values, initialized at the
    25th/50th/75th percentiles so results do not depend on the seed or on
    voxel order. Clusters are ranked by ascending centroid: darkest is
    treated as CSF/background, the middle as GM, the brightest as WM.
    Returns hard 1.0/0.0 maps with source=kmeans_fallback.
    """
    del seed  # percentile init makes the result seed-independent; kept for interface parity
    brain = vol.data != 0
    values = vol.data[brain].astype(np.float64)
    if np.unique(values).size < 3:
        raise DegenerateInput(
            f"need >= 3 distinct nonzero intensities, found {np.unique(values).size}"
        )

    centroids = np.percentile(values, [25.0, 50.0, 75.0])
    for _ in range(KMEANS_MAX_ITER):
        assign = np.argmin(np.abs(values[:, None] - centroids[None, :]), axis=1)
        new_centroids = centroids.copy()
        for k in range(3):
            members = values[assign == k]
            if members.size:
                new_centroids[k] = members.mean()
        if np.max(np.abs(new_centroids - centroids)) < KMEANS_TOL:
            centroids = new_centroids
            break
        centroids = new_centroids

    assign = np.argmin(np.abs(values[:, None] - centroids[None, :]), axis=1)
    rank = np.argsort(centroids, kind="stable")  # rank[j] = cluster index of j-th darkest
    cluster_of = {"gm": int(rank[1]), "wm": int(rank[2])}

    p_gm = np.zeros(vol.shape, dtype=np.float32)
    p_wm = np.zeros(vol.shape, dtype=np.float32)
    gm_flat = np.zeros(values.shape, dtype=np.float32)
    wm_flat = np.zeros(values.shape, dtype=np.float32)
    gm_flat[assign == cluster_of["gm"]] = 1.0
    wm_flat[assign == cluster_of["wm"]] = 1.0
    p_gm[brain] = gm_flat
    p_wm[brain] = wm_flat
    return ProbabilityMaps(p_gm=p_gm, p_wm=p_wm, source=SOURCE_KMEANS_FALLBACK)
