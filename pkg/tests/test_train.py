import csv
import math

import numpy as np
import pytest
import torch

from aiocodec.checkpoint import load_checkpoint
from aiocodec.data import random_crop, synthetic_corpus, synthetic_image
from aiocodec.train import (
    LOG_COLUMNS, AdamState, NonFiniteGradient, TrainConfig, TrainingDiverged, adam_step,
    clip_grad_norm, cosine_lr, parse_config, progressive_schedule, rd_loss, train_loop,
)


def test_rd_loss_closed_form():
    x = torch.zeros(2, 3, 4, 4)
    xh = torch.full_like(x, 0.1)
    loss = rd_loss(xh, x, torch.tensor(40.0), torch.tensor(24.0), 0.01)
    # 0.01 * 255^2 * 0.01 + 64 bits / 32 pixels
    assert loss.item() == pytest.approx(0.01 * 65025 * 0.01 + 2.0, rel=1e-6)
    with pytest.raises(Exception):
        rd_loss(xh[:, :, :3], x, torch.tensor(0.0), torch.tensor(0.0), 0.01)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = {"w": torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)}
        g = {"w": torch.tensor([0.5, -4.0, 1e-3], dtype=torch.float64)}
        adam_step(p, g, AdamState(), 1, 0.1, eps=0.0)
        torch.testing.assert_close(p["w"], torch.tensor([0.9, -1.9, 2.9], dtype=torch.float64))

    def test_matches_reference_optimizer(self, float64):
        torch.manual_seed(1)
        w0 = torch.randn(5, 3)
        ref = w0.clone().requires_grad_(True)
        opt = torch.optim.Adam([ref], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
        mine = {"w": w0.clone()}
        state = AdamState()
        for t in range(1, 21):
            g = torch.randn(5, 3)
            ref.grad = g.clone()
            opt.step()
            adam_step(mine, {"w": g.clone()}, state, t, 0.01)
        torch.testing.assert_close(mine["w"], ref.detach(), atol=1e-12, rtol=0)

    def test_non_finite_named(self):
        p = {"a": torch.zeros(2), "b": torch.zeros(2)}
        g = {"a": torch.zeros(2), "b": torch.tensor([0.0, float("inf")])}
        with pytest.raises(NonFiniteGradient) as e:
            adam_step(p, g, AdamState(), 1, 0.1)
        assert e.value.name == "b"
        assert not p["a"].any()

    def test_step_counter(self):
        with pytest.raises(ValueError):
            adam_step({}, {}, AdamState(), 0, 0.1)


def test_cosine_lr():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(25, 100, 1.0) == pytest.approx((1 + math.cos(math.pi / 4)) / 2)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-3)


def test_progressive_schedule_boundaries():
    sched = ((32, 10), (48, 5), (64, 5))
    assert progressive_schedule(0, sched) == 32
    assert progressive_schedule(9, sched) == 32
    assert progressive_schedule(10, sched) == 48
    assert progressive_schedule(15, sched) == 64
    assert progressive_schedule(19, sched) == 64
    with pytest.raises(ValueError):
        progressive_schedule(20, sched)


def test_clip_grad_norm():
    g = {"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert g["a"].item() == pytest.approx(0.6) and g["b"].item() == pytest.approx(0.8)
    g = {"a": torch.tensor([0.3])}
    clip_grad_norm(g, 1.0)
    assert g["a"].item() == pytest.approx(0.3)


class TestConfig:
    def test_describe_round_trip(self):
        cfg = TrainConfig(lr0=3e-4, patch_schedule=((32, 5), (64, 2)), qualities=(3,),
                          policy={"gaussian_noise": 1.0, "noise_levels": (25.0,)})
        assert parse_config(cfg.describe()) == cfg

    @pytest.mark.parametrize("text", [
        "lr = 1", "patch_schedule = 30:5", "qualities = 4", "lambdas = 1, 2", "policy.fog = 1", "nonsense",
    ])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            parse_config(text)

    def test_overrides_keep_base(self):
        cfg = parse_config("seed = 7", base=TrainConfig(lr0=5e-4))
        assert cfg.seed == 7 and cfg.lr0 == 5e-4


def test_data_helpers():
    a, b = synthetic_image(32, 3), synthetic_image(32, 3)
    assert np.array_equal(a, b) and a.shape == (3, 32, 32) and a.dtype == np.float32
    assert 0 <= a.min() and a.max() <= 1
    crop = random_crop(a, 16, np.random.default_rng(0))
    assert crop.shape == (3, 16, 16)
    with pytest.raises(ValueError):
        random_crop(a, 48, np.random.default_rng(0))


SMALL = dict(patch_schedule=((16, 3), (32, 2)), batch_size=2, checkpoint_every=2)


def test_train_loop_outputs_and_determinism(tmp_path):
    corpus = synthetic_corpus(4, 32, seed=0)
    cfg = TrainConfig(**SMALL)
    r1 = train_loop(cfg, corpus, tmp_path / "a")
    r2 = train_loop(cfg, corpus, tmp_path / "b")
    assert r1.model_hash == r2.model_hash
    rows = list(csv.DictReader(open(r1.log_path)))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert [int(r["patch"]) for r in rows] == [16, 16, 16, 32, 32]
    assert all(math.isfinite(float(r["loss"])) for r in rows)
    model, h, extra = load_checkpoint(r1.checkpoint)
    assert h == r1.model_hash and extra["iter"] == 5
    r3 = train_loop(TrainConfig(**SMALL, seed=1), corpus, tmp_path / "c")
    assert r3.model_hash != r1.model_hash


def test_divergence_keeps_last_good_checkpoint(tmp_path):
    bad = synthetic_corpus(2, 32, seed=0)
    bad[0][:] = np.nan
    bad[1][:] = np.nan
    with pytest.raises(TrainingDiverged):
        train_loop(TrainConfig(**SMALL), bad, tmp_path)
    model, _, extra = load_checkpoint(tmp_path / "model.ckpt")
    assert extra["iter"] == 0
    assert all(torch.isfinite(p).all() for p in model.parameters())
