"""Classical normal estimators: PCA plane fit and order-2 jet fit."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import RankDeficient, SingularSystem
from .geometry import KdIndex, LabeledCloud, Patch, extract_patches

JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 50
RANK_TOL = 1e-12
JET_MAX_COND = 1e12


class BaselineKind(enum.Enum):
    PCA = "pca"
    JET2 = "jet2"


@dataclass(frozen=True)
class BaselineMethod:
    kind: BaselineKind
    k: int

    def __post_init__(self):
        minimum = 3 if self.kind is BaselineKind.PCA else 6
        if self.k < minimum:
            raise ValueError(f"{self.kind.value} needs k >= {minimum}")

    def estimate(self, patch: Patch) -> np.ndarray:
        if self.kind is BaselineKind.PCA:
            return pca_normal(patch)
        return jet2_normal(patch)


def jacobi_eigh(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
    rotations. Returns ascending eigenvalues and matching column vectors."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(np.triu(a, 1) ** 2)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def canonical_sign(n) -> np.ndarray:
    """Flip ``n`` so z >= 0; ties fall through to y, then x."""
    n = np.asarray(n, dtype=np.float64)
    for c in (2, 1, 0):
        if n[c] > 0:
            return n
        if n[c] < 0:
            return -n
    return n


def _pca_frame(coords):
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / len(coords)
    w, v = jacobi_eigh(cov)
    if w[1] - w[0] <= RANK_TOL:
        raise RankDeficient("normal direction of patch is ill-defined")
    return w, v


def pca_normal(patch: Patch) -> np.ndarray:
    _, v = _pca_frame(patch.coords)
    n = v[:, 0]
    return canonical_sign(n / np.linalg.norm(n))


def jet2_fit(patch: Patch):
    """Fit h(u,v) = a0 + a1 u + a2 v + a3 u^2 + a4 uv + a5 v^2 in the PCA
    tangent frame. Returns ``(coefficients, frame)``; frame columns are the
    two tangent axes followed by the PCA normal."""
    coords = patch.coords
    if len(coords) < 6:
        raise ValueError("jet2 needs at least 6 neighbours")
    _, v = _pca_frame(coords)
    frame = np.column_stack([v[:, 2], v[:, 1], v[:, 0]])
    local = coords @ frame
    u, w, h = local[:, 0], local[:, 1], local[:, 2]
    design = np.column_stack([np.ones_like(u), u, w, u * u, u * w, w * w])
    lhs = design.T @ design
    rhs = design.T @ h
    if not np.isfinite(np.linalg.cond(lhs)) or np.linalg.cond(lhs) > JET_MAX_COND:
        raise SingularSystem("jet normal equations are singular")
    return np.linalg.solve(lhs, rhs), frame


def jet2_normal(patch: Patch) -> np.ndarray:
    a, frame = jet2_fit(patch)
    n = frame @ np.array([-a[1], -a[2], 1.0])
    return canonical_sign(n / np.linalg.norm(n))


def estimate_cloud(method: BaselineMethod, cloud: LabeledCloud,
                   index: KdIndex | None = None, indices=None) -> np.ndarray:
    """Normals for ``indices`` (default: every point) of ``cloud``."""
    if index is None:
        index = KdIndex(cloud.points)
    if indices is None:
        indices = np.arange(len(cloud))
    patches = extract_patches(index, cloud, indices, method.k)
    return np.array([method.estimate(p) for p in patches]).reshape(-1, 3)
