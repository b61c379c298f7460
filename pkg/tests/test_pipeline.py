import csv
import math

import numpy as np
import pytest

from anglefield import neural
from anglefield.errors import MissingNormals, NonFinite
from anglefield.geometry import LabeledCloud, angle_offset, sample_sphere_uniform
from anglefield.pipeline import TrainConfig, TrainLog, batch_loss, lr_schedule, make_training_set, train

from conftest import plane_grid


def sphere_cloud(n=300, seed=0, radius=2.0):
    d = sample_sphere_uniform(n, seed)
    return LabeledCloud(d * radius + [0.5, -1.0, 3.0], d)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(k=2), dict(M=100, batch_queries=200), dict(lr=0.0),
                                    dict(epochs=0), dict(warmup_steps=-1), dict(cap=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_text_echo(self):
        text = TrainConfig(k=32, cap=7).to_text()
        assert "k = 32\n" in text
        assert "cap = 7\n" in text
        assert "M = 5000\n" in text


class TestTrainingSet:
    def test_plane_one_patch_per_point(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(-1, 1, (100, 2)), np.zeros(100)])
        cloud = LabeledCloud(pts, np.tile([0, 0, 1.0], (100, 1)))
        pairs = make_training_set([cloud], TrainConfig(k=9))
        assert len(pairs) == 100
        assert all(p.k == 9 for p, _ in pairs)
        assert all(abs(n[2]) == 1.0 and n[0] == n[1] == 0 for _, n in pairs)

    def test_cap_is_seeded(self):
        cloud = sphere_cloud()
        a = make_training_set([cloud], TrainConfig(k=9, cap=50, seed=3))
        b = make_training_set([cloud], TrainConfig(k=9, cap=50, seed=3))
        c = make_training_set([cloud], TrainConfig(k=9, cap=50, seed=4))
        ids = [p.center_index for p, _ in a]
        assert len(ids) == 50 == len(set(ids))
        assert ids == [p.center_index for p, _ in b]
        assert ids != [p.center_index for p, _ in c]

    def test_sphere_normals_are_radial(self):
        cloud = sphere_cloud()
        for patch, n in make_training_set([cloud], TrainConfig(k=16)):
            radial = patch.center - np.array([0.5, -1.0, 3.0])
            np.testing.assert_allclose(n, radial / 2.0, atol=1e-12)

    def test_requires_normals(self):
        with pytest.raises(MissingNormals):
            make_training_set([LabeledCloud(np.eye(3) + 1)], TrainConfig(k=3))

    def test_degenerate_skipped(self, caplog):
        pts = np.vstack([np.zeros((4, 3)), sample_sphere_uniform(20, 1) * 5])
        normals = np.vstack([np.tile([0, 0, 1.0], (4, 1)), sample_sphere_uniform(20, 1)])
        pairs = make_training_set([LabeledCloud(pts, normals)], TrainConfig(k=3))
        assert len(pairs) == 20
        assert "degenerate" in caplog.text


class TestSchedule:
    cfg = TrainConfig(lr=1e-3, warmup_steps=10)

    def test_endpoints(self):
        assert lr_schedule(0, 100, self.cfg) == 0.0
        assert lr_schedule(10, 100, self.cfg) == pytest.approx(1e-3)
        assert lr_schedule(5, 100, self.cfg) == pytest.approx(5e-4)

    def test_cosine_end_without_warmup(self):
        cfg = TrainConfig(warmup_steps=0)
        assert lr_schedule(0, 50, cfg) == cfg.lr
        assert lr_schedule(49, 50, cfg) == pytest.approx(0.0, abs=1e-20)

    def test_midpoint_and_monotone(self):
        cfg = TrainConfig(warmup_steps=0)
        assert lr_schedule(50, 101, cfg) == pytest.approx(cfg.lr / 2)
        lrs = [lr_schedule(s, 60, self.cfg) for s in range(60)]
        assert all(x >= 0 for x in lrs)
        assert all(b <= a for a, b in zip(lrs[10:], lrs[11:]))


class TestTrain:
    def test_single_patch_overfit(self, plane_overfit):
        _, trace = plane_overfit
        assert len(trace.steps) == 500
        assert trace.losses[-1] < 0.05

    def test_first_step_loss(self, plane_overfit, plane_patch):
        # fresh outputs sit near pi/4, so the first loss is the mean gap to the targets
        _, trace = plane_overfit
        seeds = np.random.SeedSequence(0).spawn(2)
        pool = sample_sphere_uniform(5000, int(seeds[1].generate_state(1)[0]))
        gt = angle_offset([0, 0, 1.0], pool)
        crude = np.mean(np.abs(math.pi / 4 - gt))
        assert abs(trace.losses[0] - crude) < 0.1

    def test_deterministic(self, plane_patch):
        cfg = TrainConfig(k=16, epochs=3, warmup_steps=1, M=500, batch_queries=50, seed=5)
        clouds = [plane_grid(6)]
        runs = [train(clouds, cfg) for _ in range(2)]
        assert runs[0][1].steps == runs[1][1].steps
        for name, p in runs[0][0].params.items():
            assert p.tobytes() == runs[1][0].params[name].tobytes()

    def test_outputs(self, tmp_path):
        cfg = TrainConfig(k=9, epochs=2, M=100, batch_queries=20, warmup_steps=2)
        ckpt = tmp_path / "m.bin"
        model, trace = train([plane_grid(4)], cfg, checkpoint=ckpt, epoch_checkpoints=True)
        assert len(trace.steps) == 32
        assert len(trace.epoch_losses) == 2
        assert ckpt.exists() and (tmp_path / "m.epoch0.bin").exists()
        trace.write_csv(tmp_path / "log.csv")
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert rows[0] == ["step", "lr", "loss"]
        assert len(rows) == 33
        assert float(rows[-1][2]) == trace.steps[-1][2]

    def test_log_steps_increase(self):
        log = TrainLog()
        log.record(0, 0.1, 1.0)
        with pytest.raises(ValueError):
            log.record(0, 0.1, 1.0)

    def test_nonfinite_keeps_last_good(self, tmp_path):
        cfg = TrainConfig(k=9, epochs=1, M=100, batch_queries=20)
        model = neural.init_model(0)
        model.params["out.bias"][:] = np.nan
        with pytest.raises(NonFinite):
            train([plane_grid(4)], cfg, checkpoint=tmp_path / "m.bin", model=model)
        assert (tmp_path / "m.bin").exists()


def test_descent_property():
    """One small Adam step on a frozen batch lowers that batch's loss."""
    cloud = sphere_cloud(400, 2, radius=1.0)
    pairs = make_training_set([cloud], TrainConfig(k=32, cap=100, seed=0))
    model = neural.init_model(1)
    decreased = 0
    for t in range(100):
        patch, gt = pairs[t]
        q = sample_sphere_uniform(64, 1000 + t)
        trial = model.copy()
        before, tape, dalpha = batch_loss(trial, patch, q, gt)
        grads = neural.clip_by_global_norm(neural.backward_params(tape, dalpha), 10.0)
        neural.adam_step(trial, grads, neural.AdamState(), 1e-5)
        after, _, _ = batch_loss(trial, patch, q, gt)
        decreased += after < before
    assert decreased >= 95, decreased
