"""Adversarial image synthesis: generator, discriminator, training loop.

Images are [3, H, W] float arrays in [0, 1]; the generator ends in a
sigmoid so its range matches.  The two networks train alternately, one
discriminator step then one generator step, both with Adam.  Every
random draw (init, shuffling, latents, dropout) flows from the config
seed, so a run is bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import AdamState, Model, RunningStats, Tape, Tensor, adam_step, backward
from .errors import ConfigError

LATENT_DIM = 100
LEAKY_SLOPE = 0.2
DROPOUT_RATE = 0.3
GAN_LEARNING_RATE = 2e-4
GAN_BETA1 = 0.5
GAN_BETA2 = 0.999
# The two nets start at different scales: a near-zero discriminator takes
# long enough to sharpen that the generator can keep pace, which is what
# lets the desk-scale smoke run reach an equilibrium instead of a runaway
# discriminator win.
GEN_INIT_SCALE = 0.02
DISC_INIT_SCALE = 0.006


def _power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = LATENT_DIM
    image_size: tuple = (32, 32)
    base_channels: int = 32
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    learning_rate: float = GAN_LEARNING_RATE
    beta1: float = GAN_BETA1
    beta2: float = GAN_BETA2

    def __post_init__(self):
        h, w = self.image_size
        if not (_power_of_two(h) and _power_of_two(w)):
            raise ConfigError(f"image size {self.image_size} must be powers of two")
        if h < 16 or w < 16:
            raise ConfigError(f"image size {self.image_size} below 16x16")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


@dataclass(frozen=True)
class GanStepStats:
    step: int
    d_loss: float
    g_loss: float
    real_score: float
    fake_score: float


GAN_LOG_FIELDS = ["step", "d_loss", "g_loss", "real_score", "fake_score"]


def write_gan_log(path, log: Sequence[GanStepStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GAN_LOG_FIELDS)
        for rec in log:
            writer.writerow([rec.step, repr(rec.d_loss), repr(rec.g_loss),
                             repr(rec.real_score), repr(rec.fake_score)])


class Generator(Model):
    """dense + relu -> reshape -> two (upsample, conv, relu) stages -> conv
    -> sigmoid, producing [B, 3, H, W] in (0, 1)."""

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.config = cfg
        c = cfg.base_channels
        h4, w4 = cfg.image_size[0] // 4, cfg.image_size[1] // 4
        rng = np.random.default_rng(cfg.seed)
        self.add_param("dense.w", rng.normal(0, GEN_INIT_SCALE, (cfg.latent_dim, c * h4 * w4)))
        self.add_param("dense.b", np.zeros(c * h4 * w4))
        self.add_param("conv1.k", rng.normal(0, GEN_INIT_SCALE, (c, c, 3, 3)))
        self.add_param("conv1.b", np.zeros(c))
        self.add_param("conv2.k", rng.normal(0, GEN_INIT_SCALE, (c, c, 3, 3)))
        self.add_param("conv2.b", np.zeros(c))
        self.add_param("conv3.k", rng.normal(0, GEN_INIT_SCALE, (3, c, 3, 3)))
        self.add_param("conv3.b", np.zeros(3))

    def forward(self, z) -> Tensor:
        """Map latent vectors [B, latent_dim] to images [B, 3, H, W]."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ag.ShapeError(
                f"latent batch must be [B, {self.config.latent_dim}], got {z.shape}")
        p = self.params
        c = self.config.base_channels
        h4, w4 = self.config.image_size[0] // 4, self.config.image_size[1] // 4

        def biased_conv(x, name):
            out = ag.conv2d(x, p[f"{name}.k"], stride=1, padding=1)
            return out + ag.reshape(p[f"{name}.b"], (1, -1, 1, 1))

        x = ag.relu(ag.dense(z, p["dense.w"], p["dense.b"]))
        x = ag.reshape(x, (z.shape[0], c, h4, w4))
        x = ag.relu(biased_conv(ag.upsample2d_nearest(x, 2), "conv1"))
        x = ag.relu(biased_conv(ag.upsample2d_nearest(x, 2), "conv2"))
        return ag.sigmoid(biased_conv(x, "conv3"))


class Discriminator(Model):
    """Three stride-2 convs (batchnorm on the last two) into a sigmoid
    score per image.  Dropout follows the first activation.

    All three convs keep the same channel width: widening per stage makes
    the discriminator fast enough to win outright at desk scale, which
    starves the generator of useful gradients.
    """

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.config = cfg
        c = cfg.base_channels
        rng = np.random.default_rng(cfg.seed + 1)
        self.add_param("conv1.k", rng.normal(0, DISC_INIT_SCALE, (c, 3, 3, 3)))
        self.add_param("conv1.b", np.zeros(c))
        self.add_param("conv2.k", rng.normal(0, DISC_INIT_SCALE, (c, c, 3, 3)))
        self.add_param("bn2.gamma", np.ones(c))
        self.add_param("bn2.beta", np.zeros(c))
        self.add_param("conv3.k", rng.normal(0, DISC_INIT_SCALE, (c, c, 3, 3)))
        self.add_param("bn3.gamma", np.ones(c))
        self.add_param("bn3.beta", np.zeros(c))
        h8, w8 = cfg.image_size[0] // 8, cfg.image_size[1] // 8
        self.add_param("dense.w", rng.normal(0, DISC_INIT_SCALE, (c * h8 * w8, 1)))
        self.add_param("dense.b", np.zeros(1))
        self.buffers["bn2"] = RunningStats(c)
        self.buffers["bn3"] = RunningStats(c)

    def forward(self, images, mode: str = "train",
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Score a batch [B, 3, H, W] as real, one probability per image."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        h, w = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (3, h, w):
            raise ag.ShapeError(
                f"image batch must be [B, 3, {h}, {w}], got {x.shape}")
        p = self.params
        x = ag.conv2d(x, p["conv1.k"], stride=2, padding=1)
        x = ag.leaky_relu(x + ag.reshape(p["conv1.b"], (1, -1, 1, 1)), LEAKY_SLOPE)
        x = ag.dropout(x, DROPOUT_RATE, mode=mode, rng=rng)
        x = ag.conv2d(x, p["conv2.k"], stride=2, padding=1)
        x = ag.leaky_relu(ag.batchnorm2d(x, p["bn2.gamma"], p["bn2.beta"],
                                         self.buffers["bn2"], mode=mode), LEAKY_SLOPE)
        x = ag.conv2d(x, p["conv3.k"], stride=2, padding=1)
        x = ag.leaky_relu(ag.batchnorm2d(x, p["bn3.gamma"], p["bn3.beta"],
                                         self.buffers["bn3"], mode=mode), LEAKY_SLOPE)
        x = ag.reshape(x, (x.shape[0], -1))
        return ag.sigmoid(ag.dense(x, p["dense.w"], p["dense.b"]))


def build_generator(cfg: GanConfig) -> Generator:
    return Generator(cfg)


def build_discriminator(cfg: GanConfig) -> Discriminator:
    return Discriminator(cfg)


def _as_loss_input(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def discriminator_loss(real_out, fake_out):
    """BCE of real scores against 1 plus BCE of fake scores against 0."""
    real_out, fake_out = _as_loss_input(real_out), _as_loss_input(fake_out)
    loss = (ag.bce_loss(real_out, np.ones(real_out.shape))
            + ag.bce_loss(fake_out, np.zeros(fake_out.shape)))
    return loss


def generator_loss(fake_out):
    """BCE of fake scores against 1: the non-saturating label-flip form."""
    fake_out = _as_loss_input(fake_out)
    return ag.bce_loss(fake_out, np.ones(fake_out.shape))


def train(dataset, cfg: GanConfig, checkpoint_dir=None, max_steps: Optional[int] = None):
    """Alternating adversarial training over a [N, 3, H, W] dataset.

    Per optimizer step: one discriminator update on a real batch plus a
    freshly generated batch (generator untaped, so its parameters see no
    gradient), then one generator update through the discriminator.  The
    log gains one record per step; checkpoints snapshot the generator at
    every epoch end.

    Returns (generator, discriminator, log, checkpoints).
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError(f"dataset must be a non-empty [N, 3, H, W] array, got {data.shape}")
    h, w = cfg.image_size
    if data.shape[1:] != (3, h, w):
        raise ValueError(f"images are {data.shape[1:]}, config wants (3, {h}, {w})")
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")

    gen = build_generator(cfg)
    disc = build_discriminator(cfg)
    g_state = AdamState(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    d_state = AdamState(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng(cfg.seed + 2)
    log: list[GanStepStats] = []
    checkpoints: list[dict] = []
    step = 0
    done = False

    for epoch in range(cfg.epochs):
        order = rng.permutation(data.shape[0])
        for start in range(0, len(order), cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            b = batch.shape[0]

            # discriminator update; generated images enter as constants
            fake = gen.forward(rng.standard_normal((b, cfg.latent_dim))).data
            with Tape():
                d_real = disc.forward(batch, mode="train", rng=rng)
                d_fake = disc.forward(fake, mode="train", rng=rng)
                d_loss = discriminator_loss(d_real, d_fake)
                backward(d_loss)
            new_d, d_state = adam_step(disc.params, disc.grads(), d_state)
            disc.replace_params(new_d)

            # generator update; discriminator gradients are discarded
            with Tape():
                g_fake = gen.forward(rng.standard_normal((b, cfg.latent_dim)))
                g_scores = disc.forward(g_fake, mode="train", rng=rng)
                g_loss = generator_loss(g_scores)
                backward(g_loss)
            new_g, g_state = adam_step(gen.params, gen.grads(), g_state)
            gen.replace_params(new_g)

            log.append(GanStepStats(step, float(d_loss.data), float(g_loss.data),
                                    float(d_real.data.mean()), float(d_fake.data.mean())))
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break

        checkpoints.append({name: arr.copy() for name, arr in gen.state_arrays().items()})
        if checkpoint_dir is not None:
            root = Path(checkpoint_dir)
            root.mkdir(parents=True, exist_ok=True)
            gen.save(root / f"gen_epoch_{epoch:03d}.ckpt")
            ag.save_checkpoint(root / f"disc_epoch_{epoch:03d}.ckpt", disc.state_arrays())
        if done:
            break

    return gen, disc, log, checkpoints


def sample(generator: Generator, n: int, seed: int = 0) -> np.ndarray:
    """Generate n images [n, 3, H, W] in [0, 1], deterministic under seed."""
    h, w = generator.config.image_size
    if n == 0:
        return np.zeros((0, 3, h, w))
    z = np.random.default_rng(seed).standard_normal((n, generator.config.latent_dim))
    return generator.forward(z).data.copy()


def sample_grid(images: np.ndarray, cols: int = 4) -> np.ndarray:
    """Tile [N, 3, H, W] images in [0, 1] into one [GH, GW, 3] uint8 image."""
    n = images.shape[0]
    if n == 0:
        return np.zeros((0, 0, 3), np.uint8)
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    _, _, h, w = images.shape
    grid = np.zeros((rows * h, cols * w, 3), np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        tile = np.clip(np.rint(images[i] * 255.0), 0, 255).astype(np.uint8)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = tile.transpose(1, 2, 0)
    return grid


def striped_images(
    n: int,
    image_size=(16, 16),
    period: float = 16.0,
    noise: float = 0.05,
    seed: int = 0,
) -> np.ndarray:
    """Synthetic vertical-stripe dataset: a sinusoidal brightness wave per
    channel with random phase, mid level and amplitude, plus pixel noise.
    Values lie in [0, 1], shape [n, 3, h, w].

    Smooth edges and per-pixel noise matter here.  Hard-edged stripes are
    separable from generator output by a single conv, so the adversarial
    game collapses before the generator learns anything.
    """
    h, w = image_size
    rng = np.random.default_rng(seed)
    out = np.zeros((n, 3, h, w))
    x = np.arange(w, dtype=float)
    for i in range(n):
        phase = rng.uniform(0.0, period)
        mid = rng.uniform(0.4, 0.6, 3)
        amp = rng.uniform(0.2, 0.4, 3)
        wave = np.sin(2.0 * np.pi * (x + phase) / period)
        img = mid[:, None, None] + amp[:, None, None] * wave[None, None, :]
        img = img + rng.normal(0.0, noise, (3, h, w))
        out[i] = np.clip(img, 0.0, 1.0)
    return out
