"""Training loop for the angle field."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import neural
from .errors import MissingNormals, NonFinite
from .geometry import KdIndex, LabeledCloud, angle_offset, extract_patches, sample_sphere_uniform

log = logging.getLogger(__name__)

GRAD_CLIP = 10.0


@dataclass(frozen=True)
class TrainConfig:
    k: int = 64
    M: int = 5000
    batch_queries: int = 400
    epochs: int = 1
    lr: float = 1e-3
    warmup_steps: int = 200
    seed: int = 0
    cap: Optional[int] = None  # patches per cloud; None keeps every point

    def __post_init__(self):
        for name in ("k", "M", "batch_queries", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k < 3:
            raise ValueError("k must be >= 3")
        if self.batch_queries > self.M:
            raise ValueError("batch_queries cannot exceed the query pool size M")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.cap is not None and self.cap < 1:
            raise ValueError("cap must be >= 1")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # (step, lr, loss)
    epoch_losses: list = field(default_factory=list)

    def record(self, step: int, lr: float, loss: float) -> None:
        if self.steps and step <= self.steps[-1][0]:
            raise ValueError("log steps must increase")
        self.steps.append((step, lr, loss))

    @property
    def losses(self) -> np.ndarray:
        return np.array([s[2] for s in self.steps])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "lr", "loss"])
            for step, lr, loss in self.steps:
                w.writerow([step, repr(lr), repr(loss)])


def make_training_set(clouds: Sequence[LabeledCloud], cfg: TrainConfig):
    """One ``(patch, gt_normal)`` pair per point, or per seeded subsample of
    ``cfg.cap`` points per cloud. Degenerate patches are skipped."""
    rng = np.random.default_rng([cfg.seed, 1])
    out = []
    for ci, cloud in enumerate(clouds):
        if not cloud.has_normals:
            raise MissingNormals(f"training cloud {ci} has no ground-truth normals")
        idx = np.arange(len(cloud))
        if cfg.cap is not None and cfg.cap < len(cloud):
            idx = np.sort(rng.choice(len(cloud), cfg.cap, replace=False))
        index = KdIndex(cloud.points)
        patches, bad = extract_patches(index, cloud, idx, cfg.k, skip_degenerate=True)
        for i in bad:
            log.warning("cloud %d: skipping degenerate patch at point %d", ci, i)
        out.extend((p, cloud.normals[p.center_index]) for p in patches)
    return out


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``cfg.lr`` then cosine decay to 0 at the last step."""
    warm = cfg.warmup_steps
    if step < warm:
        return cfg.lr * step / warm
    span = total_steps - 1 - warm
    progress = (step - warm) / span if span > 0 else 0.0
    return max(0.0, cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


def batch_loss(model, patch, queries, gt_normal):
    """Mean L1 angle-offset loss for one patch and a query batch, with the
    tape and d loss / d alpha for backpropagation."""
    alpha_gt = angle_offset(gt_normal, queries)
    alpha, tape = neural.forward(model, patch, queries)
    loss, dalpha = neural.loss_l1(alpha, alpha_gt)
    return loss, tape, dalpha


def train(clouds: Sequence[LabeledCloud], cfg: TrainConfig, *,
          checkpoint=None, epoch_checkpoints: bool = False,
          training_set=None, model=None):
    """Fit an angle field. Returns ``(model, TrainLog)``.

    One optimizer step = one patch x ``cfg.batch_queries`` queries drawn
    without replacement from a fixed pool of ``cfg.M`` sphere samples.
    Patch order is reshuffled every epoch.
    """
    if training_set is None:
        training_set = make_training_set(clouds, cfg)
    if not training_set:
        raise MissingNormals("no usable training patches")
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    if model is None:
        model = neural.init_model(int(seeds[0].generate_state(1)[0]))
    pool = sample_sphere_uniform(cfg.M, int(seeds[1].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[2])

    n = len(training_set)
    total = cfg.epochs * n
    state = neural.AdamState()
    trace = TrainLog()
    last_good = model.copy()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for pi in order:
            patch, gt = training_set[pi]
            queries = pool[rng.choice(cfg.M, cfg.batch_queries, replace=False)]
            lr = lr_schedule(step, total, cfg)
            try:
                loss, tape, dalpha = batch_loss(model, patch, queries, gt)
                grads = neural.backward_params(tape, dalpha)
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise NonFinite("non-finite gradient")
            except NonFinite:
                if checkpoint is not None:
                    neural.save_model(last_good, checkpoint)
                raise
            grads = neural.clip_by_global_norm(grads, GRAD_CLIP)
            neural.adam_step(model, grads, state, lr)
            trace.record(step, lr, loss)
            epoch_loss += loss
            step += 1
        trace.epoch_losses.append(epoch_loss / n)
        log.info("epoch %d: mean loss %.5f", epoch, epoch_loss / n)
        last_good = model.copy()
        if checkpoint is not None and epoch_checkpoints:
            neural.save_model(model, _epoch_path(checkpoint, epoch))
    if checkpoint is not None:
        neural.save_model(model, checkpoint)
    return model, trace


def _epoch_path(checkpoint, epoch):
    p = Path(checkpoint)
    return p.with_name(f"{p.stem}.epoch{epoch}{p.suffix}")
