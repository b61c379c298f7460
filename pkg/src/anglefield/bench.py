"""Synthetic shapes with analytic normals, evaluation and benchmark tables."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .baselines import BaselineKind, BaselineMethod, estimate_cloud
from .errors import AngleFieldError, CoordinateMismatch, EmptyResult, LengthMismatch
from .geometry import KdIndex, LabeledCloud, unoriented_errors_deg
from .inference import InferConfig, estimate_normals
from .xyz import read_xyz

log = logging.getLogger(__name__)

COORD_TOL = 1e-9
STRIPE_BANDS = 10

# PCPNet-style noise levels as fractions of the bounding-box diagonal
NOISE_LEVELS = {"none": 0.0, "low": 0.00125, "med": 0.0065, "high": 0.012}


class ShapeKind(enum.Enum):
    PLANE = "plane"
    SPHERE = "sphere"
    CYLINDER = "cylinder"
    TORUS = "torus"


class Density(enum.Enum):
    UNIFORM = "uniform"
    STRIPES = "stripes"
    GRADIENT = "gradient"


DEFAULT_PARAMS = {
    ShapeKind.PLANE: {"size": 2.0},
    ShapeKind.SPHERE: {"radius": 1.0},
    ShapeKind.CYLINDER: {"radius": 1.0, "height": 2.0},
    ShapeKind.TORUS: {"major": 1.0, "minor": 0.4},
}


@dataclass(frozen=True)
class ShapeSpec:
    kind: ShapeKind
    points: int = 2000
    noise_sigma: float = 0.0
    density: Density = Density.UNIFORM
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", ShapeKind(self.kind))
        object.__setattr__(self, "density", Density(self.density))
        merged = dict(DEFAULT_PARAMS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"unknown {self.kind.value} parameter(s): {sorted(unknown)}")
        merged.update({k: float(v) for k, v in self.params.items()})
        object.__setattr__(self, "params", merged)
        if self.points < 1:
            raise ValueError("points must be >= 1")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")
        if any(not v > 0 for v in merged.values()):
            raise ValueError("shape parameters must be positive")
        if self.kind is ShapeKind.TORUS and merged["minor"] >= merged["major"]:
            raise ValueError("torus minor radius must be below the major radius")

    @property
    def label(self) -> str:
        parts = [self.kind.value]
        if self.density is not Density.UNIFORM:
            parts.append(self.density.value)
        if self.noise_sigma > 0:
            parts.append(f"n{self.noise_sigma:g}")
        return "-".join(parts)

    def to_line(self) -> str:
        extra = "".join(f" {k}={v:g}" for k, v in self.params.items())
        return (f"kind={self.kind.value} points={self.points} noise={self.noise_sigma:g} "
                f"density={self.density.value} seed={self.seed}{extra}")


def parse_suite_line(line: str) -> ShapeSpec:
    """Parse ``kind=sphere points=2000 noise=0.0065 density=uniform seed=3``;
    extra ``key=value`` pairs are shape parameters (radius, size, ...)."""
    kv = {}
    for tok in line.split():
        if "=" not in tok:
            raise ValueError(f"expected key=value, got {tok!r}")
        key, value = tok.split("=", 1)
        kv[key] = value
    if "kind" not in kv:
        raise ValueError("suite line needs kind=")
    noise = kv.pop("noise", "0")
    noise = NOISE_LEVELS[noise] if noise in NOISE_LEVELS else float(noise)
    return ShapeSpec(kind=kv.pop("kind"), points=int(kv.pop("points", 2000)),
                     noise_sigma=noise, density=kv.pop("density", "uniform"),
                     seed=int(kv.pop("seed", 0)), params=kv)


def read_suite(path) -> list:
    specs = []
    with open(path) as fh:
        for line in fh:
            s = line.split("#", 1)[0].strip()
            if s:
                specs.append(parse_suite_line(s))
    return specs


def _sample_surface(spec: ShapeSpec, rng):
    """Returns points, normals and the first surface parameter mapped to
    [0, 1) for density masks."""
    n = spec.points
    p = spec.params
    kind = spec.kind
    if kind is ShapeKind.PLANE:
        uv = rng.uniform(-0.5, 0.5, (n, 2)) * p["size"]
        pts = np.column_stack([uv, np.zeros(n)])
        nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
        t = uv[:, 0] / p["size"] + 0.5
    elif kind is ShapeKind.SPHERE:
        g = rng.standard_normal((n, 3))
        nrm = g / np.linalg.norm(g, axis=1, keepdims=True)
        pts = nrm * p["radius"]
        t = (np.arctan2(nrm[:, 1], nrm[:, 0]) + math.pi) / (2 * math.pi)
    elif kind is ShapeKind.CYLINDER:
        phi = rng.uniform(0.0, 2 * math.pi, n)
        h = rng.uniform(-0.5, 0.5, n) * p["height"]
        nrm = np.column_stack([np.cos(phi), np.sin(phi), np.zeros(n)])
        pts = nrm * p["radius"] + np.column_stack([np.zeros((n, 2)), h])
        t = phi / (2 * math.pi)
    else:
        big, small = p["major"], p["minor"]
        phi = rng.uniform(0.0, 2 * math.pi, n)
        # area element is proportional to (R + r cos theta)
        theta = np.empty(n)
        filled = 0
        while filled < n:
            cand = rng.uniform(0.0, 2 * math.pi, n)
            keep = cand[rng.uniform(0.0, big + small, n) < big + small * np.cos(cand)]
            take = min(len(keep), n - filled)
            theta[filled:filled + take] = keep[:take]
            filled += take
        nrm = np.column_stack([np.cos(theta) * np.cos(phi),
                               np.cos(theta) * np.sin(phi), np.sin(theta)])
        ring = np.column_stack([np.cos(phi), np.sin(phi), np.zeros(n)]) * big
        pts = ring + small * nrm
        t = phi / (2 * math.pi)
    return pts, nrm, np.clip(t, 0.0, np.nextafter(1.0, 0.0))


def synth_cloud(spec: ShapeSpec) -> LabeledCloud:
    """Sample ``spec.points`` candidates on the surface, apply the density
    mask, then add Gaussian noise with std ``noise_sigma * bbox diagonal``
    per coordinate. Normals belong to the pre-noise positions."""
    rng = np.random.default_rng(spec.seed)
    pts, nrm, t = _sample_surface(spec, rng)
    if spec.density is Density.STRIPES:
        keep = np.floor(t * STRIPE_BANDS).astype(int) % 2 == 0
    elif spec.density is Density.GRADIENT:
        keep = rng.uniform(0.0, 1.0, len(t)) < t
    else:
        keep = np.ones(len(t), dtype=bool)
    if not np.any(keep):
        raise EmptyResult("density mask removed every point")
    pts, nrm = pts[keep], nrm[keep]
    if spec.noise_sigma > 0:
        sigma = spec.noise_sigma * bbox_diagonal(pts)
        pts = pts + rng.normal(0.0, sigma, pts.shape)
    return LabeledCloud(pts, nrm)


def bbox_diagonal(points) -> float:
    points = np.asarray(points)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


@dataclass
class EvalReport:
    labels: list
    rmse: list  # degrees, one per cloud; NaN for failed clouds
    point_errors: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        vals = [r for r in self.rmse if not math.isnan(r)]
        return float(np.mean(vals)) if vals else math.nan

    def format(self) -> str:
        if len(self.rmse) == 1:
            return f"RMSE {self.rmse[0]:.4f} deg"
        lines = [f"{lab:<24s} RMSE {r:.4f} deg" for lab, r in zip(self.labels, self.rmse)]
        lines.append(f"{'average':<24s} RMSE {self.mean:.4f} deg")
        return "\n".join(lines)


def subsample_indices(n: int, count: Optional[int], seed: int) -> np.ndarray:
    if count is None or count >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, count, replace=False))


def evaluate_clouds(pred: LabeledCloud, gt: LabeledCloud,
                    subsample: Optional[int] = 5000, seed: int = 0):
    """Per-point unoriented errors (degrees) over a seeded subsample and the
    chosen indices."""
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predicted points vs {len(gt)} ground-truth")
    if pred.normals is None or gt.normals is None:
        raise LengthMismatch("both files need normals")
    if not np.allclose(pred.points, gt.points, rtol=0.0, atol=COORD_TOL):
        raise CoordinateMismatch("point coordinates of the two files differ")
    idx = subsample_indices(len(gt), subsample, seed)
    return unoriented_errors_deg(pred.normals[idx], gt.normals[idx]), idx


def evaluate(pred_file, gt_file, subsample: Optional[int] = 5000, seed: int = 0) -> EvalReport:
    err, _ = evaluate_clouds(read_xyz(pred_file), read_xyz(gt_file), subsample, seed)
    return EvalReport([str(pred_file)], [float(np.sqrt(np.mean(err ** 2)))], [err])


@dataclass
class BenchTable:
    columns: list
    rows: dict  # method -> list of RMSE per column

    def average(self, method: str) -> float:
        vals = [v for v in self.rows[method] if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def format(self) -> str:
        width = max([10] + [len(c) for c in self.columns]) + 2
        head = f"{'method':<8s}" + "".join(f"{c:>{width}s}" for c in self.columns + ["average"])
        lines = [head]
        for method, vals in self.rows.items():
            cells = "".join(f"{v:>{width}.2f}" for v in vals + [self.average(method)])
            lines.append(f"{method:<8s}{cells}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["method," + ",".join(self.columns + ["average"])]
        for method, vals in self.rows.items():
            lines.append(method + "," + ",".join(repr(float(v)) for v in vals + [self.average(method)]))
        return "\n".join(lines) + "\n"


def run_benchmark(model, suite: Sequence[ShapeSpec], cfg: InferConfig, *,
                  k: int = 64, baseline_k: Optional[int] = None,
                  subsample: Optional[int] = 5000, eval_seed: int = 0,
                  methods=("NeAF", "PCA", "Jet2"), threads: int = 1) -> BenchTable:
    """RMSE table with one row per method and one column per shape.

    Only the evaluated subsample of each cloud is estimated. A cloud whose
    estimation fails is reported as NaN for that method.
    """
    baseline_k = k if baseline_k is None else baseline_k
    methods = [m for m in methods if not (m == "NeAF" and model is None)]
    rows = {m: [] for m in methods}
    labels = []
    for spec in suite:
        labels.append(spec.label)
        try:
            cloud = synth_cloud(spec)
        except AngleFieldError as exc:
            log.warning("%s: %s", spec.label, exc)
            for m in methods:
                rows[m].append(math.nan)
            continue
        index = KdIndex(cloud.points)
        idx = subsample_indices(len(cloud), subsample, eval_seed)
        gt = cloud.normals[idx]
        for m in methods:
            try:
                if m == "NeAF":
                    pred = estimate_normals(model, cloud, k, cfg, indices=idx,
                                            index=index, threads=threads)
                else:
                    kind = BaselineKind.PCA if m == "PCA" else BaselineKind.JET2
                    pred = estimate_cloud(BaselineMethod(kind, baseline_k), cloud, index, idx)
                err = unoriented_errors_deg(pred, gt)
                rows[m].append(float(np.sqrt(np.mean(err ** 2))))
            except (AngleFieldError, ValueError) as exc:
                log.warning("%s / %s failed: %s", spec.label, m, exc)
                rows[m].append(math.nan)
    return BenchTable(labels, rows)
