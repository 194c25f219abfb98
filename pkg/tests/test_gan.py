"""Adversarial nets: losses, architectures, training loop, sampling."""

import csv
import hashlib
import math

import numpy as np
import pytest

from roadseg.autograd import (
    AdamState,
    ShapeError,
    Tape,
    adam_step,
    backward,
    load_checkpoint,
)
from roadseg.errors import ConfigError
from roadseg.data import read_netpbm, write_ppm
from roadseg.gan import (
    GAN_LOG_FIELDS,
    GanConfig,
    GanStepStats,
    build_discriminator,
    build_generator,
    discriminator_loss,
    generator_loss,
    sample,
    sample_grid,
    striped_images,
    train,
    write_gan_log,
)

SMOKE_CFG = dict(image_size=(16, 16), base_channels=8, batch_size=8, seed=42, epochs=100)


def param_hash(model):
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()


def expected_param_counts(latent, height, width, channels):
    """Layer-by-layer parameter totals recomputed from the architecture
    recipe, independent of what the models actually allocate."""
    h4, w4 = height // 4, width // 4
    gen = (
        latent * (channels * h4 * w4) + channels * h4 * w4  # dense in
        + channels * channels * 9 + channels                # conv after first upsample
        + channels * channels * 9 + channels                # conv after second upsample
        + 3 * channels * 9 + 3                              # conv to rgb
    )
    h8, w8 = height // 8, width // 8
    disc = (
        channels * 3 * 9 + channels                         # stride-2 conv from rgb
        + channels * channels * 9 + 2 * channels            # stride-2 conv + bn affine
        + channels * channels * 9 + 2 * channels            # stride-2 conv + bn affine
        + channels * h8 * w8 + 1                            # dense to one score
    )
    return gen, disc


@pytest.fixture(scope="module")
def smoke_run():
    """500 alternating steps on the 16x16 striped dataset, seed 42."""
    data = striped_images(64, seed=42)
    cfg = GanConfig(**SMOKE_CFG)
    return train(data, cfg, max_steps=500)


class TestGanConfig:
    def test_defaults(self):
        cfg = GanConfig()
        assert cfg.latent_dim == 100
        assert cfg.image_size == (32, 32)
        assert cfg.learning_rate == 2e-4
        assert cfg.beta1 == 0.5
        assert cfg.beta2 == 0.999

    @pytest.mark.parametrize("size", [(24, 24), (32, 20), (17, 32)])
    def test_non_power_of_two_size_rejected(self, size):
        with pytest.raises(ConfigError, match="powers of two"):
            GanConfig(image_size=size)

    def test_size_below_16_rejected(self):
        with pytest.raises(ConfigError, match="below 16x16"):
            GanConfig(image_size=(8, 8))

    def test_bad_latent_dim(self):
        with pytest.raises(ConfigError, match="latent_dim"):
            GanConfig(latent_dim=0)

    def test_bad_channels_batch_epochs(self):
        with pytest.raises(ConfigError):
            GanConfig(base_channels=0)
        with pytest.raises(ConfigError):
            GanConfig(batch_size=0)
        with pytest.raises(ConfigError):
            GanConfig(epochs=0)


class TestLosses:
    def test_symmetric_half_is_two_ln_two(self):
        loss = discriminator_loss(np.array([0.5]), np.array([0.5]))
        assert abs(float(loss.data) - 2 * math.log(2)) < 1e-12

    def test_point_nine_point_one(self):
        loss = discriminator_loss(np.array([0.9]), np.array([0.1]))
        assert abs(float(loss.data) - 2 * (-math.log(0.9))) < 1e-12

    def test_perfect_discriminator_near_zero(self):
        loss = discriminator_loss(np.array([1.0]), np.array([0.0]))
        assert float(loss.data) < 1e-6

    def test_score_identity_sweep(self):
        # at real = fake = s the sum collapses to -ln s - ln(1 - s)
        for s in (0.1, 0.25, 0.5, 0.73, 0.9):
            loss = discriminator_loss(np.array([s]), np.array([s]))
            assert abs(float(loss.data) - (-math.log(s) - math.log(1 - s))) < 1e-12

    def test_generator_loss_fixtures(self):
        assert abs(float(generator_loss(np.array([0.5])).data) - math.log(2)) < 1e-12
        assert abs(float(generator_loss(np.array([0.1])).data) + math.log(0.1)) < 1e-12
        assert float(generator_loss(np.array([1.0])).data) < 1e-6

    def test_batch_losses_average(self):
        loss = generator_loss(np.array([0.5, 0.1]))
        want = (math.log(2) - math.log(0.1)) / 2
        assert abs(float(loss.data) - want) < 1e-12

    def test_discriminator_loss_gradient(self):
        # d/ds of -ln s - ln(1-s) at s = 0.3
        from roadseg.autograd import Tensor

        s = Tensor(np.array([0.3]), requires_grad=True)
        with Tape():
            loss = discriminator_loss(s, s)
            backward(loss)
        want = -1 / 0.3 + 1 / 0.7
        assert abs(float(s.grad[0]) - want) < 1e-9


class TestGenerator:
    def test_output_shape_32(self):
        gen = build_generator(GanConfig(seed=1))
        out = gen.forward(np.zeros((2, 100)))
        assert out.shape == (2, 3, 32, 32)
        assert out.data.min() > 0.0 and out.data.max() < 1.0

    def test_output_shape_16(self):
        cfg = GanConfig(image_size=(16, 16), base_channels=8)
        out = build_generator(cfg).forward(np.zeros((3, 100)))
        assert out.shape == (3, 3, 16, 16)

    def test_zero_latent_deterministic(self):
        cfg = GanConfig(image_size=(16, 16), base_channels=8, seed=5)
        a = build_generator(cfg).forward(np.zeros((1, 100))).data
        b = build_generator(cfg).forward(np.zeros((1, 100))).data
        assert np.array_equal(a, b)

    def test_wrong_latent_shape(self):
        gen = build_generator(GanConfig(image_size=(16, 16), base_channels=8))
        with pytest.raises(ShapeError, match="latent"):
            gen.forward(np.zeros((2, 7)))
        with pytest.raises(ShapeError, match="latent"):
            gen.forward(np.zeros(100))

    def test_parameter_count_oracle(self):
        cfg = GanConfig(latent_dim=100, image_size=(32, 32), base_channels=32)
        want_gen, want_disc = expected_param_counts(100, 32, 32, 32)
        gen_total = sum(p.data.size for p in build_generator(cfg).params.values())
        disc_total = sum(p.data.size for p in build_discriminator(cfg).params.values())
        assert gen_total == want_gen
        assert disc_total == want_disc

    def test_parameter_count_oracle_small(self):
        cfg = GanConfig(latent_dim=12, image_size=(16, 32), base_channels=8)
        want_gen, want_disc = expected_param_counts(12, 16, 32, 8)
        assert sum(p.data.size for p in build_generator(cfg).params.values()) == want_gen
        assert sum(p.data.size for p in build_discriminator(cfg).params.values()) == want_disc


class TestDiscriminator:
    def test_output_shape_and_range(self):
        disc = build_discriminator(GanConfig(seed=2))
        out = disc.forward(np.random.default_rng(0).uniform(0, 1, (4, 3, 32, 32)),
                           mode="eval")
        assert out.shape == (4, 1)
        assert out.data.min() > 0.0 and out.data.max() < 1.0

    def test_eval_mode_deterministic(self):
        disc = build_discriminator(GanConfig(image_size=(16, 16), base_channels=8))
        x = np.random.default_rng(1).uniform(0, 1, (2, 3, 16, 16))
        assert np.array_equal(disc.forward(x, mode="eval").data,
                              disc.forward(x, mode="eval").data)

    def test_train_mode_needs_rng(self):
        disc = build_discriminator(GanConfig(image_size=(16, 16), base_channels=8))
        x = np.zeros((1, 3, 16, 16))
        with pytest.raises(ValueError, match="rng"):
            disc.forward(x, mode="train")

    def test_dropout_reproducible_under_rng(self):
        disc = build_discriminator(GanConfig(image_size=(16, 16), base_channels=8))
        x = np.random.default_rng(2).uniform(0, 1, (2, 3, 16, 16))
        a = disc.forward(x, mode="train", rng=np.random.default_rng(9)).data
        b = disc.forward(x, mode="train", rng=np.random.default_rng(9)).data
        assert np.array_equal(a, b)

    def test_three_halvings_reach_four_by_four(self):
        # flatten width pins the spatial size after the stride-2 stack
        cfg = GanConfig(image_size=(32, 32), base_channels=8)
        disc = build_discriminator(cfg)
        assert disc.params["dense.w"].shape == (8 * 4 * 4, 1)

    def test_wrong_input_shape(self):
        disc = build_discriminator(GanConfig(image_size=(16, 16), base_channels=8))
        with pytest.raises(ShapeError, match="image batch"):
            disc.forward(np.zeros((2, 3, 32, 32)), mode="eval")


class TestTrainLoop:
    def test_empty_dataset_rejected(self):
        cfg = GanConfig(image_size=(16, 16), base_channels=8)
        with pytest.raises(ValueError, match="non-empty"):
            train(np.zeros((0, 3, 16, 16)), cfg)

    def test_wrong_image_shape_rejected(self):
        cfg = GanConfig(image_size=(16, 16), base_channels=8)
        with pytest.raises(ValueError, match="config wants"):
            train(np.zeros((4, 3, 32, 32)), cfg)

    def test_out_of_range_pixels_rejected(self):
        cfg = GanConfig(image_size=(16, 16), base_channels=8)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            train(np.full((4, 3, 16, 16), 1.5), cfg)

    def test_one_epoch_eight_images_batch_four(self):
        cfg = GanConfig(image_size=(16, 16), base_channels=4, batch_size=4,
                        epochs=1, seed=0)
        data = striped_images(8, seed=0)
        gen, disc, log, checkpoints = train(data, cfg)
        assert len(log) == 2
        assert [rec.step for rec in log] == [0, 1]
        assert len(checkpoints) == 1

    def test_max_steps_truncates(self):
        cfg = GanConfig(image_size=(16, 16), base_channels=4, batch_size=8,
                        epochs=100, seed=0)
        _, _, log, _ = train(striped_images(16, seed=0), cfg, max_steps=5)
        assert len(log) == 5

    def test_log_bit_identical_across_runs(self):
        cfg = GanConfig(image_size=(16, 16), base_channels=4, batch_size=8,
                        epochs=100, seed=3)
        data = striped_images(16, seed=3)
        _, _, log_a, _ = train(data, cfg, max_steps=20)
        _, _, log_b, _ = train(data, cfg, max_steps=20)
        assert log_a == log_b

    def test_checkpoint_files_written_and_loadable(self, tmp_path):
        cfg = GanConfig(image_size=(16, 16), base_channels=4, batch_size=4,
                        epochs=2, seed=1)
        gen, disc, log, checkpoints = train(striped_images(8, seed=1), cfg,
                                            checkpoint_dir=tmp_path)
        for epoch in range(2):
            assert (tmp_path / f"gen_epoch_{epoch:03d}.ckpt").exists()
            assert (tmp_path / f"disc_epoch_{epoch:03d}.ckpt").exists()
        # final-epoch file matches the returned generator exactly
        fresh = build_generator(cfg)
        fresh.load(tmp_path / "gen_epoch_001.ckpt")
        for name, arr in gen.state_arrays().items():
            assert np.array_equal(fresh.state_arrays()[name], arr)
        disc_state = load_checkpoint(tmp_path / "disc_epoch_001.ckpt")
        assert set(disc_state) == set(disc.state_arrays())

    def test_in_memory_checkpoints_snapshot_each_epoch(self):
        cfg = GanConfig(image_size=(16, 16), base_channels=4, batch_size=4,
                        epochs=3, seed=2)
        gen, _, _, checkpoints = train(striped_images(8, seed=2), cfg)
        assert len(checkpoints) == 3
        # snapshots are copies from different epochs, not aliases
        assert not np.array_equal(checkpoints[0]["dense.w"], checkpoints[2]["dense.w"])
        assert np.array_equal(checkpoints[2]["dense.w"], gen.state_arrays()["dense.w"])


class TestParameterFreeze:
    def test_discriminator_step_leaves_generator_alone(self):
        cfg = GanConfig(image_size=(16, 16), base_channels=4, seed=0)
        gen, disc = build_generator(cfg), build_discriminator(cfg)
        rng = np.random.default_rng(0)
        real = striped_images(4, seed=0)
        gen_before, disc_before = param_hash(gen), param_hash(disc)
        fake = gen.forward(rng.standard_normal((4, cfg.latent_dim))).data
        state = AdamState(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
        with Tape():
            loss = discriminator_loss(disc.forward(real, mode="train", rng=rng),
                                      disc.forward(fake, mode="train", rng=rng))
            backward(loss)
        new_p, state = adam_step(disc.params, disc.grads(), state)
        disc.replace_params(new_p)
        assert param_hash(gen) == gen_before
        assert param_hash(disc) != disc_before

    def test_generator_step_leaves_discriminator_alone(self):
        cfg = GanConfig(image_size=(16, 16), base_channels=4, seed=0)
        gen, disc = build_generator(cfg), build_discriminator(cfg)
        rng = np.random.default_rng(0)
        gen_before, disc_before = param_hash(gen), param_hash(disc)
        state = AdamState(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
        with Tape():
            fake = gen.forward(rng.standard_normal((4, cfg.latent_dim)))
            loss = generator_loss(disc.forward(fake, mode="train", rng=rng))
            backward(loss)
        new_p, state = adam_step(gen.params, gen.grads(), state)
        gen.replace_params(new_p)
        assert param_hash(disc) == disc_before
        assert param_hash(gen) != gen_before


class TestControlledRuns:
    def test_frozen_generator_discriminator_loss_strictly_decreases(self):
        # fixed batches and eval-mode forwards make the objective a smooth
        # deterministic function, so each Adam step must make progress
        cfg = GanConfig(image_size=(16, 16), base_channels=8, batch_size=8,
                        seed=0, epochs=1, learning_rate=1e-3)
        gen = build_generator(cfg)
        disc = build_discriminator(cfg)
        rng = np.random.default_rng(100)
        real = rng.uniform(0.8, 1.0, (16, 3, 16, 16))
        fake = gen.forward(rng.standard_normal((16, cfg.latent_dim))).data
        state = AdamState(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
        losses = []
        for _ in range(50):
            with Tape():
                loss = discriminator_loss(disc.forward(real, mode="eval"),
                                          disc.forward(fake, mode="eval"))
                backward(loss)
            new_p, state = adam_step(disc.params, disc.grads(), state)
            disc.replace_params(new_p)
            losses.append(float(loss.data))
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]


class TestConvergenceSmoke:
    def test_exactly_one_record_per_step(self, smoke_run):
        _, _, log, _ = smoke_run
        assert len(log) == 500

    def test_discriminator_loss_settles_lower(self, smoke_run):
        _, _, log, _ = smoke_run
        d = np.array([rec.d_loss for rec in log])
        assert d[-50:].mean() < d[:50].mean()

    def test_fake_score_rises_above_threshold(self, smoke_run):
        _, _, log, _ = smoke_run
        fake = np.array([rec.fake_score for rec in log])
        assert fake[-50:].mean() > 0.3

    def test_all_scores_are_probabilities(self, smoke_run):
        _, _, log, _ = smoke_run
        for rec in log:
            assert 0.0 <= rec.real_score <= 1.0
            assert 0.0 <= rec.fake_score <= 1.0

    def test_generated_images_in_range(self, smoke_run):
        gen = smoke_run[0]
        images = sample(gen, 4, seed=0)
        assert images.min() >= 0.0 and images.max() <= 1.0


class TestSampling:
    def test_zero_samples(self):
        gen = build_generator(GanConfig(image_size=(16, 16), base_channels=4))
        out = sample(gen, 0)
        assert out.shape == (0, 3, 16, 16)

    def test_same_seed_identical(self):
        gen = build_generator(GanConfig(image_size=(16, 16), base_channels=4, seed=4))
        assert np.array_equal(sample(gen, 3, seed=7), sample(gen, 3, seed=7))

    def test_different_seed_differs(self):
        gen = build_generator(GanConfig(image_size=(16, 16), base_channels=4, seed=4))
        assert not np.array_equal(sample(gen, 3, seed=7), sample(gen, 3, seed=8))

    def test_grid_tiles_row_major(self):
        images = np.zeros((3, 3, 4, 4))
        images[0] = 1.0
        grid = sample_grid(images, cols=2)
        assert grid.shape == (8, 8, 3)
        assert np.all(grid[:4, :4] == 255)   # image 0 at row 0, col 0
        assert np.all(grid[4:, 4:] == 0)     # fourth cell empty

    def test_ppm_round_trip(self, tmp_path):
        gen = build_generator(GanConfig(image_size=(16, 16), base_channels=4, seed=6))
        grid = sample_grid(sample(gen, 4, seed=1), cols=2)
        assert grid.shape == (32, 32, 3)
        path = tmp_path / "grid.ppm"
        write_ppm(path, grid)
        assert np.array_equal(read_netpbm(path), grid)


class TestGanLog:
    def test_csv_header_and_round_trip(self, tmp_path):
        log = [GanStepStats(0, 1.25, 0.75, 0.6, 0.4),
               GanStepStats(1, 1.0 / 3.0, 2.0 / 3.0, 0.51, 0.49)]
        path = tmp_path / "log.csv"
        write_gan_log(path, log)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == GAN_LOG_FIELDS
        assert len(rows) == 3
        # repr round-trips doubles exactly
        assert float(rows[2][1]) == 1.0 / 3.0
        assert int(rows[1][0]) == 0


class TestStripedImages:
    def test_shape_and_range(self):
        data = striped_images(5, image_size=(16, 32), seed=0)
        assert data.shape == (5, 3, 16, 32)
        assert data.min() >= 0.0 and data.max() <= 1.0

    def test_deterministic(self):
        assert np.array_equal(striped_images(4, seed=9), striped_images(4, seed=9))

    def test_images_distinct(self):
        data = striped_images(4, seed=0)
        assert not np.array_equal(data[0], data[1])

    def test_noiseless_rows_identical(self):
        # the stripe pattern varies only along x; rows differ only by noise
        data = striped_images(2, noise=0.0, seed=1)
        for img in data:
            for ch in img:
                assert np.allclose(ch, ch[0][None, :])

    def test_noise_breaks_row_identity(self):
        data = striped_images(1, seed=2)
        assert not np.allclose(data[0, 0, 0], data[0, 0, 1])
