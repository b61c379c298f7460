"""Normal extraction from a trained angle field.

Per point: evaluate the field on ``m`` sphere samples, keep the ``l`` with
the smallest predicted offset, refine each by gradient descent on its own
predicted offset (parameters frozen), flip them into the half-space of the
most confident candidate and average.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import neural
from .errors import DegenerateMean
from .geometry import KdIndex, LabeledCloud, extract_patches, sample_sphere_uniform

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12
MEAN_MIN_NORM = 1e-9


@dataclass(frozen=True)
class InferConfig:
    m: int = 10000
    l: int = 10
    refine_steps: int = 5
    refine_lr: float = 0.005
    seed: int = 0
    select: str = "mean"  # "mean" averages candidates, "min" keeps the best
    coarse: bool = True  # False refines l random vectors instead

    def __post_init__(self):
        if not 1 <= self.l <= self.m:
            raise ValueError("need 1 <= l <= m")
        if self.refine_steps < 0:
            raise ValueError("refine_steps must be >= 0")
        if not self.refine_lr > 0:
            raise ValueError("refine_lr must be positive")
        if self.select not in ("mean", "min"):
            raise ValueError("select must be 'mean' or 'min'")


@dataclass(frozen=True)
class CoarseSet:
    vectors: np.ndarray  # (l, 3)
    offsets: np.ndarray  # (l,), ascending
    source: np.ndarray  # indices into the m samples


def coarse_samples(cfg: InferConfig) -> np.ndarray:
    return sample_sphere_uniform(cfg.m, cfg.seed)


def predict_coarse(model, patch, cfg: InferConfig, samples=None) -> CoarseSet:
    if samples is None:
        samples = coarse_samples(cfg)
    alpha = neural.predict_alpha(model, patch, samples)
    # stable sort keeps ties in sample order
    order = np.argsort(alpha, kind="stable")[:cfg.l]
    return CoarseSet(samples[order].copy(), alpha[order], order)


def random_candidates(patch, cfg: InferConfig) -> CoarseSet:
    """``l`` random unit vectors standing in for the coarse set."""
    seed = np.random.SeedSequence([cfg.seed, patch.center_index]).generate_state(1)[0]
    vecs = sample_sphere_uniform(cfg.l, int(seed))
    return CoarseSet(vecs, np.zeros(cfg.l), np.arange(cfg.l))


def refine(model, patch, coarse: CoarseSet, cfg: InferConfig) -> np.ndarray:
    """Adam descent on each candidate's predicted offset, projecting back to
    the unit sphere after every step.

    Candidates share one batched forward pass but never interact: the
    encoder does not see the queries and Adam is elementwise, so this is the
    same as optimizing each with its own fresh state.
    """
    q = np.array(coarse.vectors, dtype=np.float64)
    live = np.ones(len(q), dtype=bool)
    params = {"query": q}
    state = neural.AdamState()
    for _ in range(cfg.refine_steps):
        _, tape = neural.forward(model, patch, q)
        # |alpha - 0| = alpha since alpha > 0
        grad = neural.backward_query(tape)
        grad[~live] = 0.0
        before = q.copy()
        neural.adam_update(params, {"query": grad}, state, cfg.refine_lr)
        norms = np.linalg.norm(q, axis=1)
        dead = live & (norms < ZERO_NORM)
        if np.any(dead):
            log.warning("point %d: %d refinement candidate(s) collapsed to zero",
                        patch.center_index, int(dead.sum()))
            live &= ~dead
        q[~live] = before[~live]
        q[live] /= norms[live, None]
    return q


def normalize_signs(vectors) -> np.ndarray:
    """Flip every vector into the half-space of ``vectors[0]``;
    a zero dot product counts as positive."""
    v = np.asarray(vectors, dtype=np.float64)
    signs = np.where(v @ v[0] >= 0.0, 1.0, -1.0)
    return v * signs[:, None]


def average_normals(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
    if len(v) == 1:
        # a lone unit candidate is its own mean; renormalising would only add rounding
        return v[0].copy()
    mean = v.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < MEAN_MIN_NORM:
        raise DegenerateMean("refined candidates cancel out")
    return mean / norm


def estimate_normal(model, patch, cfg: InferConfig, samples=None) -> np.ndarray:
    if cfg.coarse:
        coarse = predict_coarse(model, patch, cfg, samples)
    else:
        coarse = random_candidates(patch, cfg)
    refined = refine(model, patch, coarse, cfg)
    if cfg.select == "min":
        alpha = neural.predict_alpha(model, patch, refined)
        return refined[int(np.argmin(alpha))]
    signed = normalize_signs(refined)
    try:
        return average_normals(signed)
    except DegenerateMean:
        log.warning("point %d: degenerate candidate mean, using reference",
                    patch.center_index)
        return signed[0]


def estimate_normals(model, cloud: LabeledCloud, k: int, cfg: InferConfig,
                     indices=None, index: KdIndex | None = None,
                     threads: int = 1) -> np.ndarray:
    """Estimate normals for ``indices`` (default: all points) of ``cloud``."""
    if index is None:
        index = KdIndex(cloud.points)
    if indices is None:
        indices = np.arange(len(cloud))
    patches = extract_patches(index, cloud, indices, k)
    samples = coarse_samples(cfg) if cfg.coarse else None

    def one(p):
        return estimate_normal(model, p, cfg, samples)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            out = list(ex.map(one, patches))
    else:
        out = [one(p) for p in patches]
    return np.array(out).reshape(-1, 3)
