import json
import math

import pytest
import torch

from conftest import TINY
from dvedit import training
from dvedit.data import ClipDistribution, generate_dataset
from dvedit.denoiser import ContentUNet, StructureAdapter, parameter_hash
from dvedit.diffusion import make_linear_schedule
from dvedit.text import NULL_TOKEN, TOKEN_IDS
from dvedit.training import (
    Batch,
    FreezeViolationError,
    LatentData,
    StageReport,
    TrainConfig,
    TrainingDivergedError,
    content_predictor,
    noise_estimation_loss,
    sample_batch,
    structured_predictor,
    train_stage1,
    train_stage2a,
    train_stage2b,
    video_predictor,
)

SCHED = make_linear_schedule()
SMALL = ClipDistribution(height=32, width=32, num_frames=4, size_range=(8, 10), max_speed=1)


@pytest.fixture(scope="module")
def data():
    return LatentData.from_clips(generate_dataset(6, seed=3, distribution=SMALL))


def cfg(**kw):
    base = dict(learning_rate=1e-3, batch_size=4, steps=3, seed=0, optimizer="adam", log_every=0)
    base.update(kw)
    return TrainConfig(**base)


def oracle_predictor(x0, scale=1.0):
    """Predicts ``scale`` times the true noise, recovered from x_t and x0."""

    def predict(x_t, t, tokens, structures=None):
        ab = torch.from_numpy(SCHED.alpha_bars.copy())[t].reshape(-1, *([1] * (x_t.dim() - 1)))
        return scale * (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()

    return predict


class TestLoss:
    def test_perfect_predictor_zero_loss(self):
        x0 = torch.randn(64, 192, 2, 2, dtype=torch.float64)
        batch = Batch(x0, torch.zeros(64, 3, dtype=torch.long))
        loss = noise_estimation_loss(oracle_predictor(x0), batch, SCHED, torch.Generator().manual_seed(0))
        assert float(loss) < 1e-18

    def test_zero_predictor_monte_carlo(self):
        # E[eps^2] = 1; 10k scalar samples; per-sample variance of eps^2 is 2
        x0 = torch.zeros(10_000, 1, dtype=torch.float64)
        batch = Batch(x0, torch.zeros(10_000, 3, dtype=torch.long))
        loss = float(noise_estimation_loss(lambda x, t, c, s: torch.zeros_like(x), batch, SCHED, torch.Generator().manual_seed(1)))
        se = math.sqrt(2.0 / 10_000)
        assert abs(loss - 1.0) <= 3 * se

    @pytest.mark.parametrize("scale", [0.0, 0.5, 2.0])
    def test_quadratic_in_error(self, scale):
        x0 = torch.randn(32, 192, 2, 2, dtype=torch.float64)
        batch = Batch(x0, torch.zeros(32, 3, dtype=torch.long))
        loss = noise_estimation_loss(oracle_predictor(x0, scale), batch, SCHED, torch.Generator().manual_seed(2))
        # brute force with the same draws
        g = torch.Generator().manual_seed(2)
        torch.randint(1000, (32,), generator=g)
        eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        expect = ((scale - 1.0) ** 2 * eps**2).mean()
        assert float(loss) == pytest.approx(float(expect), rel=1e-10, abs=1e-15)

    def test_video_loss_sums_frames(self):
        x0 = torch.zeros(2000, 4, 1, 1, 1, dtype=torch.float64)
        batch = Batch(x0, torch.zeros(2000, 3, dtype=torch.long))
        loss = float(noise_estimation_loss(lambda x, t, c, s: torch.zeros_like(x), batch, SCHED, torch.Generator().manual_seed(3)))
        assert abs(loss - 4.0) <= 3 * math.sqrt(4 * 2.0 / 2000)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            noise_estimation_loss(lambda *a: None, Batch(torch.zeros(0, 4), torch.zeros(0, 3)), SCHED, torch.Generator())


class TestData:
    def test_ragged_rejected(self):
        with pytest.raises(ValueError, match="ragged"):
            LatentData.from_sequences([torch.zeros(4, 192, 2, 2), torch.zeros(3, 192, 2, 2)], torch.zeros(2, 3, dtype=torch.long))

    def test_token_count_checked(self):
        with pytest.raises(ValueError):
            LatentData(torch.zeros(2, 4, 192, 2, 2), torch.zeros(3, 3, dtype=torch.long))

    def test_dropout_rate(self, data):
        g = torch.Generator().manual_seed(0)
        nulls = 0
        for _ in range(100):
            b = sample_batch(data, cfg(batch_size=50, condition_dropout=0.1), g, video=False)
            nulls += int((b.tokens == TOKEN_IDS[NULL_TOKEN]).all(dim=1).sum())
        assert 0.07 < nulls / 5000 < 0.13

    def test_no_dropout(self, data):
        b = sample_batch(data, cfg(batch_size=64, condition_dropout=0.0), torch.Generator().manual_seed(0), video=True)
        assert not (b.tokens == TOKEN_IDS[NULL_TOKEN]).any()
        assert b.x0.shape == (64, 4, 192, 4, 4)

    @pytest.mark.parametrize("kw", [dict(learning_rate=-1.0), dict(batch_size=0), dict(steps=0), dict(optimizer="rmsprop"), dict(condition_dropout=1.0), dict(min_timestep=-1)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            cfg(**kw)


class TestStages:
    def test_stage1_deterministic(self, data):
        a, ra = train_stage1(data, cfg(), SCHED, TINY)
        b, rb = train_stage1(data, cfg(), SCHED, TINY)
        assert parameter_hash(a) == parameter_hash(b)
        assert ra.losses == rb.losses

    def test_zero_learning_rate_is_noop(self, data):
        torch.manual_seed(0)
        content = ContentUNet(TINY)
        before = parameter_hash(content)
        train_stage1(data, cfg(learning_rate=0.0, optimizer="sgd"), SCHED, TINY, content=content)
        assert parameter_hash(content) == before

    def test_loss_decreases(self, data):
        _, report = train_stage1(data, cfg(steps=60, batch_size=16, learning_rate=3e-3), SCHED, TINY)
        assert sum(report.losses[-10:]) < sum(report.losses[:10])

    def test_stage2a_freezes_content(self, data):
        content, _ = train_stage1(data, cfg(), SCHED, TINY)
        h = parameter_hash(content)
        adapter, report = train_stage2a(data, content, cfg(steps=5), SCHED)
        assert parameter_hash(content) == h
        assert report.frozen_hashes_before == report.frozen_hashes_after == {"content": h}
        assert report.max_frozen_grad == 0.0
        assert all(not p.requires_grad for p in content.parameters())
        assert report.trained_hash == parameter_hash(adapter)

    def test_stage2b_freezes_content(self, data):
        content, _ = train_stage1(data, cfg(), SCHED, TINY)
        h = parameter_hash(content)
        motion, report = train_stage2b(data, content, cfg(steps=5, batch_size=2), SCHED)
        assert parameter_hash(content) == h
        assert report.max_frozen_grad == 0.0

    def test_leaked_gradient_detected(self, data, monkeypatch):
        content, _ = train_stage1(data, cfg(), SCHED, TINY)
        real = training._set_trainable
        monkeypatch.setattr(training, "_set_trainable", lambda m, flag: real(m, True))
        with pytest.raises(FreezeViolationError):
            train_stage2a(data, content, cfg(steps=2), SCHED)

    def test_step0_loss_matches_stage1(self, data):
        content, _ = train_stage1(data, cfg(), SCHED, TINY)
        content.requires_grad_(False)
        adapter = StructureAdapter.from_content(content)
        c = cfg()
        for video, predictor in (
            (False, structured_predictor(content, adapter)),
            (True, video_predictor(content, training.MotionModule(TINY))),
        ):
            g1, g2 = torch.Generator().manual_seed(5), torch.Generator().manual_seed(5)
            l_new = noise_estimation_loss(predictor, sample_batch(data, c, g1, video), SCHED, g1)
            l_ref = noise_estimation_loss(content_predictor(content), sample_batch(data, c, g2, video), SCHED, g2)
            assert float(l_new.detach()) == pytest.approx(float(l_ref.detach()), rel=1e-6)

    def test_stage2a_needs_structures(self, data):
        content = ContentUNet(TINY)
        with pytest.raises(ValueError):
            train_stage2a(LatentData(data.latents, data.tokens), content, cfg(), SCHED)

    def test_stage2b_frame_count(self, data):
        content = ContentUNet(TINY)
        short = LatentData(data.latents[:, :3], data.tokens)
        with pytest.raises(ValueError):
            train_stage2b(short, content, cfg(), SCHED)

    def test_divergence_reported(self, data):
        bad = LatentData(torch.full_like(data.latents, float("nan")), data.tokens)
        with pytest.raises(TrainingDivergedError) as err:
            train_stage1(bad, cfg(), SCHED, TINY)
        assert err.value.step == 0

    def test_report_json(self, data):
        _, report = train_stage1(data, cfg(steps=2), SCHED, TINY)
        again = StageReport.from_dict(json.loads(report.to_json()))
        assert again == report
