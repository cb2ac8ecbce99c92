"""Autoregressive WGAN-GP for 24-step multichannel windows.

The generator seeds a GRU stack with a Gaussian noise vector as initial
hidden state and feeds a per-channel-mean start token as the first input;
each produced step is fed back until 24 steps exist (the start token itself
is never emitted).  The critic scores whole windows through its own GRU and
a scalar head.  Training alternates several critic updates per generator
update, with an interpolate-based gradient penalty keeping the critic close
to 1-Lipschitz.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import tensor as T
from .errors import ConfigError, ShapeError, TrainingError
from .layers import Adam, GruStack, Linear
from .tensor import Tape, Tensor, backward

GP_NORM_EPS = 1e-12  # inside the root so the norm stays differentiable at 0


class Generator:
    """GRU generator; noise_dim = layers * hidden fills the initial state."""

    def __init__(self, gru, head, start_token):
        self.gru = gru
        self.head = head
        self.start_token = Tensor(np.asarray(start_token, dtype=np.float64))
        self.channels = head.out_dim

    @classmethod
    def build(cls, channels, hidden, layers, start_token, rng):
        gru = GruStack.build(channels, hidden, layers, rng)
        head = Linear.build(hidden, channels, rng)
        return cls(gru, head, start_token)

    @property
    def noise_dim(self):
        return self.gru.num_layers * self.gru.hidden

    def generate(self, z, steps=24):
        """Map noise [batch, noise_dim] to windows [batch, steps, channels]."""
        if z.ndim != 2 or z.shape[1] != self.noise_dim:
            raise ShapeError(
                f"generate: noise must be [batch, {self.noise_dim}], got {z.shape}"
            )
        batch = z.shape[0]
        hidden = self.gru.hidden
        hs = [
            T.reshape(T.narrow(z, 1, l * hidden, hidden), (batch, hidden))
            for l in range(self.gru.num_layers)
        ]
        ctxs = self.gru.make_ctx(batch)
        head_ctx = self.head.make_ctx(batch)
        # start token is a data statistic, not a trainable parameter
        x = T.broadcast_to(T.reshape(self.start_token, (1, self.channels)), (batch, self.channels))
        outs = []
        for _ in range(steps):
            top, hs = self.gru.step(ctxs, x, hs)
            y = self.head.apply_ctx(head_ctx, top)
            outs.append(T.reshape(y, (batch, 1, self.channels)))
            x = y
        return T.concat(outs, 1) if steps > 1 else outs[0]

    def sample(self, count, rng, steps=24, batch=256):
        """Detached numpy windows for evaluation and augmentation."""
        chunks = []
        done = 0
        while done < count:
            n = min(batch, count - done)
            z = Tensor(rng.standard_normal((n, self.noise_dim)))
            chunks.append(self.generate(z, steps).data)
            done += n
        return np.concatenate(chunks) if len(chunks) > 1 else chunks[0]

    def parameters(self):
        out = [(f"gen.gru.{n}", p) for n, p in self.gru.parameters()]
        out += [(f"gen.head.{n}", p) for n, p in self.head.parameters()]
        return out


class Critic:
    """GRU critic scoring each window with one unbounded realism value."""

    def __init__(self, gru, head):
        self.gru = gru
        self.head = head

    @classmethod
    def build(cls, channels, hidden, layers, rng):
        return cls(GruStack.build(channels, hidden, layers, rng), Linear.build(hidden, 1, rng))

    def score(self, x):
        """x [batch, steps, channels] -> [batch, 1]."""
        batch = x.shape[0]
        h0 = T.zeros((self.gru.num_layers, batch, self.gru.hidden))
        outputs, _ = self.gru.forward(x, h0)
        steps = x.shape[1]
        last = T.reshape(T.narrow(outputs, 1, steps - 1, 1), (batch, self.gru.hidden))
        return self.head(last)

    def parameters(self):
        out = [(f"critic.gru.{n}", p) for n, p in self.gru.parameters()]
        out += [(f"critic.head.{n}", p) for n, p in self.head.parameters()]
        return out


# ---------------------------------------------------------------------------
# losses


def gradient_penalty(score_fn, real, fake, rng):
    """Mean (||grad of score at interpolates||_2 - 1)^2, before the lambda.

    One uniform draw per sample places the interpolate on the segment
    between its real/fake pair; the gradient is taken with create_graph so
    the penalty remains differentiable with respect to the critic.
    """
    real_np = real.data if isinstance(real, Tensor) else np.asarray(real, dtype=np.float64)
    fake_np = fake.data if isinstance(fake, Tensor) else np.asarray(fake, dtype=np.float64)
    if real_np.shape != fake_np.shape:
        raise ShapeError(f"penalty: real {real_np.shape} vs fake {fake_np.shape}")
    batch = real_np.shape[0]
    u = rng.uniform(size=(batch,) + (1,) * (real_np.ndim - 1))
    interp = Tensor(u * real_np + (1.0 - u) * fake_np, requires_grad=True)
    score = score_fn(interp)
    grad = backward(T.reduce_sum(score), [interp], create_graph=True)[interp]
    flat = T.reshape(grad, (batch, grad.size // batch))
    norm = T.sqrt(T.add(T.reduce_sum(T.square(flat), (1,)), GP_NORM_EPS))
    penalty = T.reduce_mean(T.square(T.sub(norm, 1.0)))
    if not np.isfinite(penalty.data):
        raise TrainingError("gradient penalty is non-finite")
    return penalty


def critic_loss(critic, real, fake, lambda_gp, rng):
    """E[D(fake)] - E[D(real)] + lambda * penalty; fake must be detached."""
    penalty = gradient_penalty(critic.score, real, fake, rng)
    loss = T.add(
        T.sub(T.reduce_mean(critic.score(fake)), T.reduce_mean(critic.score(real))),
        T.mul(penalty, lambda_gp),
    )
    return loss, float(penalty.data)


def generator_loss(critic, fake):
    """Negative mean critic score on generator output."""
    return T.neg(T.reduce_mean(critic.score(fake)))


# ---------------------------------------------------------------------------
# training


@dataclass
class GanTrainConfig:
    lambda_gp: float = 10.0
    critic_iters_per_gen: int = 5
    batch_size: int = 64
    total_generator_steps: int = 2000
    window_len: int = 24
    seed: int = 1
    g_lr: float = 1e-4
    d_lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eval_interval: int = 100
    eval_windows: int = 256
    bins: int = 50
    checkpoint_interval: int = 0

    def validate(self):
        if self.lambda_gp <= 0:
            raise ConfigError("lambda_gp must be positive")
        if self.critic_iters_per_gen < 1:
            raise ConfigError("critic_iters_per_gen must be at least 1")
        if self.batch_size < 1 or self.total_generator_steps < 1:
            raise ConfigError("batch_size and total_generator_steps must be positive")
        if self.window_len != 24:
            raise ConfigError("window_len is fixed at 24")


@dataclass
class GanModel:
    generator: Generator
    critic: Critic
    channels: tuple = ("precipitation_mm", "flow")


@dataclass
class StepRecord:
    step: int
    critic_loss: float
    generator_loss: float
    penalty: float


@dataclass
class EvalRecord:
    step: int
    jsd_mean: float
    jsd_per_channel: dict


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)


class _Batcher:
    """Cycles through the corpus in seeded shuffled order."""

    def __init__(self, windows, batch_size, rng):
        if len(windows) < batch_size:
            raise ConfigError(
                f"corpus of {len(windows)} windows is smaller than batch size {batch_size}"
            )
        self.windows = windows
        self.batch_size = batch_size
        self.rng = rng
        self._order = None
        self._pos = 0

    def next(self):
        if self._order is None or self._pos + self.batch_size > len(self.windows):
            self._order = self.rng.permutation(len(self.windows))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.windows[idx]


class GanTrainer:
    """Owns the alternating update loop; reusable across tuning rungs."""

    def __init__(self, generator, critic, windows, config, channels=None):
        config.validate()
        if windows.ndim != 3 or windows.shape[1] != config.window_len:
            raise ShapeError(f"trainer: corpus must be [count, 24, channels], got {windows.shape}")
        self.generator = generator
        self.critic = critic
        self.windows = np.asarray(windows, dtype=np.float64)
        self.config = config
        self.channels = tuple(channels) if channels else tuple(
            f"ch{i}" for i in range(windows.shape[2])
        )
        self.rng = np.random.default_rng(config.seed)
        self.batcher = _Batcher(self.windows, config.batch_size, self.rng)
        self.opt_d = Adam(critic.parameters(), lr=config.d_lr, beta1=config.beta1, beta2=config.beta2)
        self.opt_g = Adam(generator.parameters(), lr=config.g_lr, beta1=config.beta1, beta2=config.beta2)
        self.log = TrainLog()
        self.step = 0
        self.last_checkpoint = None
        self._gen_params = [p for _, p in generator.parameters()]
        self._critic_params = [p for _, p in critic.parameters()]

    def _critic_update(self):
        cfg = self.config
        real_np = self.batcher.next()
        z = self.rng.standard_normal((cfg.batch_size, self.generator.noise_dim))
        fake_np = self.generator.generate(Tensor(z)).data  # no tape active: detached
        with Tape():
            loss, penalty = critic_loss(
                self.critic, Tensor(real_np), Tensor(fake_np), cfg.lambda_gp, self.rng
            )
            self._check_finite(loss, "critic loss")
            grads = backward(loss, self._critic_params)
        self.opt_d.step(grads)
        return float(loss.data), penalty

    def _generator_update(self):
        cfg = self.config
        z = self.rng.standard_normal((cfg.batch_size, self.generator.noise_dim))
        with Tape():
            fake = self.generator.generate(Tensor(z))
            loss = generator_loss(self.critic, fake)
            self._check_finite(loss, "generator loss")
            grads = backward(loss, self._gen_params)
        self.opt_g.step(grads)
        return float(loss.data)

    def _check_finite(self, loss, label):
        if not np.isfinite(loss.data):
            where = (
                f" (last good checkpoint at step {self.last_checkpoint})"
                if self.last_checkpoint is not None
                else " (no checkpoint emitted yet)"
            )
            raise TrainingError(f"{label} became non-finite at step {self.step}{where}")

    def evaluate(self):
        """JSD of a fresh sample against the training corpus, off-stream RNG."""
        cfg = self.config
        eval_rng = np.random.default_rng([cfg.seed, 7919, self.step])
        fake = self.generator.sample(cfg.eval_windows, eval_rng)
        result = metrics.jsd(self.windows, fake, bins=cfg.bins)
        record = EvalRecord(step=self.step, jsd_mean=result.mean, jsd_per_channel=result.per_channel)
        self.log.evals.append(record)
        return record

    def run(self, steps, eval_hook=None, checkpoint_hook=None):
        cfg = self.config
        for _ in range(steps):
            self.step += 1
            d_loss = g_penalty = 0.0
            for _ in range(cfg.critic_iters_per_gen):
                d_loss, g_penalty = self._critic_update()
            g_loss = self._generator_update()
            self.log.steps.append(StepRecord(self.step, d_loss, g_loss, g_penalty))
            if cfg.eval_interval and self.step % cfg.eval_interval == 0:
                record = self.evaluate()
                if eval_hook is not None:
                    eval_hook(record)
            if (
                checkpoint_hook is not None
                and cfg.checkpoint_interval
                and self.step % cfg.checkpoint_interval == 0
            ):
                checkpoint_hook(self.step, self.generator, self.critic)
                self.last_checkpoint = self.step
        return self.log


def train_gan(windows, config, g_hidden, g_layers, d_hidden, d_layers,
              channels=None, eval_hook=None, checkpoint_hook=None):
    """Build models from the corpus statistics and run the full loop."""
    from .data import WindowBatch, compute_start_token  # local import avoids a cycle

    if isinstance(windows, WindowBatch):
        channels = windows.channels
        start_token = compute_start_token(windows)
        corpus = windows.data
    else:
        corpus = np.asarray(windows, dtype=np.float64)
        start_token = corpus.mean(axis=(0, 1))
    init_rng = np.random.default_rng([config.seed, 101])
    generator = Generator.build(corpus.shape[2], g_hidden, g_layers, start_token, init_rng)
    critic = Critic.build(corpus.shape[2], d_hidden, d_layers, init_rng)
    trainer = GanTrainer(generator, critic, corpus, config, channels)
    trainer.run(config.total_generator_steps, eval_hook, checkpoint_hook)
    return GanModel(generator, critic, trainer.channels), trainer.log
