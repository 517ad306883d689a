"""Residual GAN for CSI synthesis: generator, critic, CT-GAN style losses, training."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor, grad, no_grad, ops
from .nn import Adam, BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module, ParamVector

VARIANTS = ("adopted", "full")
BASE_CHANNELS = 64


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"{what} became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class GanConfig:
    latent_dim: int = 128
    lambda1: float = 10.0
    lambda2: float = 2.0
    margin: float = 0.2
    dropout: float = 0.5
    lr: float = 1e-3
    epochs: int = 1000
    batch_size: int = 100
    n_critic: int = 5
    width_scale: float = 1.0
    variant: str = "adopted"
    size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        self.size = tuple(self.size)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalty weights must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.n_critic < 1 or self.batch_size < 2 or self.epochs < 0:
            raise ValueError("n_critic >= 1, batch_size >= 2 and epochs >= 0 required")

    @property
    def channels(self) -> int:
        return max(1, int(round(BASE_CHANNELS * self.width_scale)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        return d


def _n_upsamples(size: tuple[int, int]) -> int:
    h, w = size
    n = int(round(math.log2(h / 4))) if h >= 4 else -1
    if h != w or n < 0 or 4 * 2 ** n != h:
        raise ValueError(f"generator output must be square with side 4*2^k, got {size}")
    return n


class UpBlock(Module):
    """Two conv-BN-ReLU stages with x2 nearest upsampling between them and on the skip."""

    def __init__(self, c: int, rng):
        self.conv1 = Conv2d(c, c, 3, rng, padding=1)
        self.bn1 = BatchNorm2d(c)
        self.conv2 = Conv2d(c, c, 3, rng, padding=1)
        self.bn2 = BatchNorm2d(c)

    def forward(self, x):
        h = ops.relu(self.bn1(self.conv1(x)))
        h = ops.upsample2(h)
        h = ops.relu(self.bn2(self.conv2(h)))
        return h + ops.upsample2(x)


class DownBlock(Module):
    """Residual block with optional 2x2 average pooling on branch and skip.

    When the input channel count differs from the block width the skip path
    gets a 1x1 projection.
    """

    def __init__(self, c_in: int, c: int, rng, pool: bool):
        self.conv1 = Conv2d(c_in, c, 3, rng, padding=1)
        self.bn1 = BatchNorm2d(c)
        self.conv2 = Conv2d(c, c, 3, rng, padding=1)
        self.bn2 = BatchNorm2d(c)
        if c_in != c:
            self.skip = Conv2d(c_in, c, 1, rng)
        self.pool = pool

    def forward(self, x):
        h = ops.relu(self.bn1(self.conv1(x)))
        if self.pool:
            h = ops.avg_pool2(h)
        h = ops.relu(self.bn2(self.conv2(h)))
        s = ops.avg_pool2(x) if self.pool else x
        if hasattr(self, "skip"):
            s = self.skip(s)
        return h + s


class Generator(Module):
    def __init__(self, config: GanConfig, rng: np.random.Generator):
        c = config.channels
        self.latent_dim = config.latent_dim
        self.size = config.size
        self.head = ConvTranspose2d(config.latent_dim, c, 4, rng)
        self.blocks = [UpBlock(c, rng) for _ in range(_n_upsamples(config.size))]
        self.bn = BatchNorm2d(c)
        self.out = Conv2d(c, 2, 3, rng, padding=1)

    def forward(self, z):
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim == 2:
            z = ops.reshape(z, (z.shape[0], z.shape[1], 1, 1))
        if z.shape[1:] != (self.latent_dim, 1, 1):
            raise ValueError(f"latent batch must be (N, {self.latent_dim}, 1, 1), got {z.shape}")
        h = self.head(z)
        for block in self.blocks:
            h = block(h)
        h = ops.relu(self.bn(h))
        return ops.tanh(self.out(h))


class Discriminator(Module):
    """Critic returning a score per sample and the pooled feature vector before the last layer."""

    def __init__(self, config: GanConfig, rng: np.random.Generator):
        c = config.channels
        self.size = config.size
        self.blocks = [
            DownBlock(2, c, rng, pool=True),
            DownBlock(c, c, rng, pool=True),
            DownBlock(c, c, rng, pool=False),
            DownBlock(c, c, rng, pool=False),
        ]
        self.fc = Linear(c, 1, rng)

    def forward(self, x, dropout: float = 0.0, seed=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != (2, *self.size):
            raise ValueError(f"critic input must be (N, 2, {self.size[0]}, {self.size[1]}), got {x.shape}")
        rng = np.random.default_rng(seed) if dropout > 0 else None
        h = self.blocks[1](self.blocks[0](x))
        h = ops.dropout(h, dropout, rng)
        h = ops.dropout(self.blocks[2](h), dropout, rng)
        h = ops.dropout(self.blocks[3](h), dropout, rng)
        features = ops.mean(h, axis=(2, 3))
        score = ops.reshape(self.fc(features), (x.shape[0],))
        return score, features


def build_gan(config: GanConfig, init_seed: int) -> tuple[Generator, Discriminator]:
    rng = np.random.default_rng(init_seed)
    return Generator(config, rng), Discriminator(config, rng)


# ---------------------------------------------------------------- loss terms


def generator_loss(D: Discriminator, G: Generator, z, dropout: float = 0.0, seed=None) -> Tensor:
    """Mean over the batch of -D(G(z))."""
    score, _ = D(G(z), dropout, seed)
    return ops.mean(ops.neg(score))


def interpolate_hat(real, fake, rng: np.random.Generator | None = None, weights=None) -> np.ndarray:
    """Per-sample convex combination i*real + (1-i)*fake with i ~ U[0, 1]."""
    real = np.asarray(real.data if isinstance(real, Tensor) else real, dtype=float)
    fake = np.asarray(fake.data if isinstance(fake, Tensor) else fake, dtype=float)
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch {real.shape} vs {fake.shape}")
    if weights is None:
        weights = rng.uniform(0.0, 1.0, size=real.shape[0])
    i = np.asarray(weights, dtype=float).reshape((real.shape[0],) + (1,) * (real.ndim - 1))
    return i * real + (1.0 - i) * fake


def gradient_penalty(critic: Callable[[Tensor], Tensor], points) -> Tensor:
    """Mean over samples of (||d critic / d x||_2 - 1)^2, differentiable in the critic's parameters."""
    arr = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=float)
    x = Tensor(arr, requires_grad=True)
    scores = critic(x)
    (gx,) = grad(ops.sum(scores), [x], create_graph=True)
    if not np.isfinite(gx.data).all():
        raise NonFiniteError("non-finite input gradient in gradient penalty")
    norms = ops.l2_norm(gx, axis=tuple(range(1, gx.ndim)))
    dev = norms - 1.0
    return ops.mean(dev * dev)


def _pair_distance(out1, out2, variant: str) -> Tensor:
    (d1, f1), (d2, f2) = out1, out2
    dist = ops.abs(d1 - d2)
    if variant == "full":
        dist = dist + ops.l2_norm(f1 - f2, axis=1) * 0.1
    return dist


def consistency_term(
    D: Discriminator, H, p: float, seeds, variant: str = "adopted", margin: float = 0.2, pair=None
) -> Tensor:
    """Mean over the batch of max(0, |D1(H)-D2(H)| [+ 0.1||D1'(H)-D2'(H)||] - margin).

    ``pair`` may carry the two already-computed dropout passes (score, features).
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if pair is None:
        pair = (D(H, p, seeds[0]), D(H, p, seeds[1]))
    dist = _pair_distance(pair[0], pair[1], variant)
    return ops.mean(ops.relu(dist - margin))


@dataclass
class CriticTerms:
    loss: Tensor
    real_mean: float
    fake_mean: float
    penalty: float = 0.0
    consistency: float = 0.0


def _draw_seeds(rng: np.random.Generator, n: int) -> list[int]:
    return [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=n)]


def discriminator_loss(
    D: Discriminator,
    G,
    H,
    z,
    config: GanConfig,
    variant: str | None = None,
    rng: np.random.Generator | None = None,
    weights=None,
    seeds=None,
) -> CriticTerms:
    """mean D(G(z)) - mean D(H) + lambda1*GP + lambda2*CT.

    ``G`` may be a generator or an already generated (constant) fake batch.
    All randomness (dropout masks, interpolation weights) comes from ``rng``
    unless ``seeds``/``weights`` are given explicitly.
    """
    variant = variant or config.variant
    rng = rng if rng is not None else np.random.default_rng(0)
    H = H if isinstance(H, Tensor) else Tensor(H)
    if isinstance(G, Module):
        with no_grad():
            fake = G(z).detach()
    else:
        fake = G if isinstance(G, Tensor) else Tensor(G)
    if seeds is None:
        seeds = _draw_seeds(rng, 4)
    p = config.dropout
    d_fake, _ = D(fake, p, seeds[0])
    out1 = D(H, p, seeds[1])
    real_mean = ops.mean(out1[0])
    fake_mean = ops.mean(d_fake)
    loss = fake_mean - real_mean
    terms = CriticTerms(loss, float(real_mean.data), float(fake_mean.data))
    if config.lambda1 > 0:
        hat = interpolate_hat(H, fake, rng, weights)
        gp = gradient_penalty(lambda x: D(x, p, seeds[3])[0], hat)
        loss = loss + gp * config.lambda1
        terms.penalty = float(gp.data)
    if config.lambda2 > 0:
        out2 = D(H, p, seeds[2])
        ct = consistency_term(D, H, p, None, variant, config.margin, pair=(out1, out2))
        loss = loss + ct * config.lambda2
        terms.consistency = float(ct.data)
    terms.loss = loss
    return terms


def graph_size(D, G, H, z, config: GanConfig, variant: str, seed: int = 0) -> int:
    """Number of tape nodes recorded while building one critic loss."""
    with Tape() as tape:
        discriminator_loss(D, G, H, z, config, variant, np.random.default_rng(seed))
    return len(tape.nodes)


# ---------------------------------------------------------------- training


@dataclass
class GanHistory:
    d_loss: list[float] = field(default_factory=list)
    g_loss: list[float] = field(default_factory=list)
    critic_gap: list[float] = field(default_factory=list)


class GanTrainer:
    """Alternating critic/generator training that can be resumed in chunks.

    Training ``a`` epochs then ``b`` epochs is identical to training ``a+b``
    at once: the RNG stream, optimiser moments and the critic-step counter
    all persist on the instance.
    """

    def __init__(self, G: Generator, D: Discriminator, data, config: GanConfig, seed):
        data = np.asarray(data, dtype=float)
        if data.ndim != 4 or len(data) == 0:
            raise ValueError("training data must be a non-empty (N, 2, H, W) array")
        if len(data) < 2:
            raise ValueError("need at least two training samples for batch statistics")
        self.G, self.D, self.data, self.config = G, D, data, config
        self.rng = np.random.default_rng(seed)
        self.opt_g = Adam(G.parameters(), lr=config.lr)
        self.opt_d = Adam(D.parameters(), lr=config.lr)
        self.d_steps = 0
        self.epochs_done = 0
        self.history = GanHistory()

    def _batches(self):
        n = len(self.data)
        bs = min(self.config.batch_size, n)
        perm = self.rng.permutation(n)
        for lo in range(0, n, bs):
            idx = perm[lo : lo + bs]
            if len(idx) >= 2:
                yield self.data[idx]

    def _latent(self, n: int) -> np.ndarray:
        return self.rng.standard_normal((n, self.config.latent_dim, 1, 1))

    def _critic_step(self, real: np.ndarray) -> CriticTerms:
        z = self._latent(len(real))
        terms = discriminator_loss(self.D, self.G, real, z, self.config, rng=self.rng)
        grads = grad(terms.loss, self.D.parameters())
        self.opt_d.step(grads)
        return terms

    def _generator_step(self, n: int) -> float:
        z = self._latent(n)
        seed = _draw_seeds(self.rng, 1)[0]
        loss = generator_loss(self.D, self.G, z, self.config.dropout, seed)
        self.opt_g.step(grad(loss, self.G.parameters()))
        return float(loss.data)

    def train_epochs(self, n_epochs: int) -> GanHistory:
        self.G.train()
        self.D.train()
        for _ in range(n_epochs):
            d_losses, g_losses, gaps = [], [], []
            try:
                for real in self._batches():
                    terms = self._critic_step(real)
                    d_losses.append(float(terms.loss.data))
                    gaps.append(terms.real_mean - terms.fake_mean)
                    self.d_steps += 1
                    if self.d_steps % self.config.n_critic == 0:
                        g_losses.append(self._generator_step(len(real)))
            except NonFiniteError:
                raise TrainingDiverged(self.epochs_done + 1) from None
            self.epochs_done += 1
            self.history.d_loss.append(float(np.mean(d_losses)) if d_losses else math.nan)
            self.history.g_loss.append(float(np.mean(g_losses)) if g_losses else math.nan)
            self.history.critic_gap.append(float(np.mean(gaps)) if gaps else math.nan)
            if not math.isfinite(self.history.d_loss[-1]):
                raise TrainingDiverged(self.epochs_done)
        return self.history

    def states(self) -> tuple[ParamVector, ParamVector]:
        return self.G.state(), self.D.state()

    def load_states(self, g_state: ParamVector, d_state: ParamVector) -> None:
        self.G.load_state(g_state)
        self.D.load_state(d_state)


def train_gan(G: Generator, D: Discriminator, data, config: GanConfig, seed) -> tuple[Generator, Discriminator, GanHistory]:
    trainer = GanTrainer(G, D, data, config, seed)
    trainer.train_epochs(config.epochs)
    return G, D, trainer.history


def sample_fake(G: Generator, count: int, seed, chunk: int = 500) -> np.ndarray:
    """Draw ``count`` synthetic CSI tensors from G in evaluation mode."""
    rng = np.random.default_rng(seed)
    was_training = G.training
    G.eval()
    out = []
    with no_grad():
        left = count
        while left > 0:
            n = min(chunk, left)
            z = rng.standard_normal((n, G.latent_dim, 1, 1))
            out.append(G(z).data)
            left -= n
    G.train(was_training)
    if not out:
        return np.zeros((0, 2, *G.size))
    return np.concatenate(out)
