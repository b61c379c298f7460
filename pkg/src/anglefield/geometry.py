"""Point-cloud containers, exact kNN, patch extraction and angle math."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegeneratePatch, LengthMismatch, DataError

UNIT_TOL = 1e-9


def as_unit(v, tol: float = UNIT_TOL) -> np.ndarray:
    """Return ``v`` as a float64 array after checking every row is unit-norm."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= tol):
        raise ValueError("vector is not unit length")
    return v


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class LabeledCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise DataError("a cloud needs at least one 3D point")
        if not np.all(np.isfinite(pts)):
            raise DataError("non-finite point coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.ascontiguousarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise LengthMismatch(
                    f"{len(nrm)} normals for {len(pts)} points")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx) -> "LabeledCloud":
        idx = np.asarray(idx)
        normals = None if self.normals is None else self.normals[idx]
        return LabeledCloud(self.points[idx], normals)


@dataclass(frozen=True)
class Patch:
    """k neighbors of point ``center_index``, translated so that point sits at
    the origin and scaled into the unit ball.

    ``center`` is the world position of the center point and ``indices`` the
    source-cloud rows of the neighbors, in the same order as ``coords``.
    """

    coords: np.ndarray
    centroid: np.ndarray
    scale: float
    center_index: int
    center: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return len(self.coords)

    def to_world(self) -> np.ndarray:
        return self.coords * self.scale + self.center

    def permuted(self, perm) -> "Patch":
        perm = np.asarray(perm)
        return Patch(self.coords[perm], self.centroid, self.scale,
                     self.center_index, self.center, self.indices[perm])


class KdIndex:
    """Exact k-nearest-neighbour index.

    Results are ordered by ascending distance, ties broken by ascending
    point index.
    """

    def __init__(self, points):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if len(self.points) < 1:
            raise DataError("cannot index an empty cloud")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, x, k: int):
        """Return ``(indices, distances)``, each shaped ``(len(x), k)``
        (or ``(k,)`` for a single query point)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} outside [1, {n}]")
        kk = min(k + 1, n)
        _, cand = self._tree.query(x, kk)
        cand = cand.reshape(len(x), kk)
        d2 = np.sum((self.points[cand] - x[:, None, :]) ** 2, axis=-1)
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=-1)
        d2 = np.take_along_axis(d2, order, axis=-1)

        out = cand[:, :k].copy()
        out_d2 = d2[:, :k].copy()
        if kk > k:
            # a tie across the k-th boundary may hide lower-index points
            tied = d2[:, k] <= d2[:, k - 1] * (1 + 1e-12)
            for r in np.flatnonzero(tied):
                out[r], out_d2[r] = self._query_ball(x[r], k, d2[r, k])
        dist = np.sqrt(out_d2)
        if single:
            return out[0], dist[0]
        return out, dist

    def _query_ball(self, x, k, r2):
        cand = np.asarray(
            self._tree.query_ball_point(x, np.sqrt(r2) * (1 + 1e-9) + 1e-300),
            dtype=np.int64)
        d2 = np.sum((self.points[cand] - x) ** 2, axis=-1)
        order = np.lexsort((cand, d2))[:k]
        return cand[order], d2[order]


def build_index(cloud: LabeledCloud) -> KdIndex:
    return KdIndex(cloud.points)


def _make_patch(cloud, i, nbrs):
    # p_i is always among its own neighbours unless >= k points coincide
    # with it, in which case the patch is degenerate anyway
    nbrs = np.asarray(nbrs, dtype=np.int64)
    center = cloud.points[i]
    local = cloud.points[nbrs] - center
    scale = float(np.max(np.linalg.norm(local, axis=1)))
    if scale == 0.0:
        raise DegeneratePatch(f"all {len(nbrs)} neighbours of point {i} coincide")
    coords = local / scale
    coords.setflags(write=False)
    return Patch(coords, cloud.points[nbrs].mean(axis=0), scale, int(i),
                 center.copy(), nbrs)


def extract_patch(index: KdIndex, cloud: LabeledCloud, i: int, k: int) -> Patch:
    if not 0 <= i < len(cloud):
        raise IndexError(f"point index {i} out of range")
    if k < 3:
        raise ValueError("patches need k >= 3")
    nbrs, _ = index.query(cloud.points[i], k)
    return _make_patch(cloud, i, nbrs)


def extract_patches(index: KdIndex, cloud: LabeledCloud, indices, k: int,
                    skip_degenerate: bool = False):
    """Batched ``extract_patch``. With ``skip_degenerate`` the degenerate
    centers are dropped and returned separately."""
    indices = np.asarray(indices, dtype=np.int64)
    if k < 3:
        raise ValueError("patches need k >= 3")
    if len(indices) == 0:
        return ([], []) if skip_degenerate else []
    nbrs, _ = index.query(cloud.points[indices], k)
    patches, bad = [], []
    for i, row in zip(indices, nbrs):
        try:
            patches.append(_make_patch(cloud, int(i), row))
        except DegeneratePatch:
            if not skip_degenerate:
                raise
            bad.append(int(i))
    return (patches, bad) if skip_degenerate else patches


def sample_sphere_uniform(count: int, seed: int) -> np.ndarray:
    """Uniform unit vectors by normalizing i.i.d. Gaussian triples."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((count, 3))
    norms = np.linalg.norm(g, axis=1)
    bad = norms == 0.0
    while np.any(bad):
        g[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms[bad] = np.linalg.norm(g[bad], axis=1)
        bad = norms == 0.0
    return g / norms[:, None]


def angle_offset(gt, q) -> np.ndarray:
    """Unoriented angle between ``gt`` and ``q`` as arcsin of the cross
    product norm, in [0, pi/2]. Broadcasts over leading axes."""
    c = np.linalg.norm(np.cross(gt, q), axis=-1)
    return np.arcsin(np.clip(c, 0.0, 1.0))


def unoriented_angle(a, b) -> np.ndarray:
    """Per-row unoriented angle in radians, min(theta, pi - theta).

    Equal to acos(|a.b|) for unit rows, but computed as
    atan2(|a x b|, |a.b|), which stays accurate near 0 and pi/2.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.abs(np.sum(a * b, axis=-1))
    return np.arctan2(cross, dot)


def unoriented_errors_deg(pred, gt) -> np.ndarray:
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if pred.shape != gt.shape:
        raise LengthMismatch(f"{len(pred)} predictions for {len(gt)} normals")
    return np.degrees(unoriented_angle(pred, gt))


def unoriented_rmse(pred, gt) -> float:
    """Root-mean-square unoriented angular error in degrees."""
    err = unoriented_errors_deg(pred, gt)
    if len(err) < 1:
        raise LengthMismatch("no normals to compare")
    return float(np.sqrt(np.mean(err ** 2)))
