"""CsiNet-style autoencoder for CSI feedback, its training loop and the NMSE metric."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Protocol, runtime_checkable

import numpy as np

from .autodiff import NonFiniteError, Tensor, grad, no_grad, ops
from .gan import TrainingDiverged
from .nn import Adam, BatchNorm2d, Conv2d, Linear, Module, ParamVector

LEAK = 0.3
PERFECT = "perfect"


def _as_fraction(gamma) -> Fraction:
    if isinstance(gamma, str):
        return Fraction(gamma)
    return Fraction(gamma).limit_denominator(1 << 20)


@dataclass
class DaeConfig:
    n_t: int = 32
    n_c: int = 32
    gamma: float = 1 / 16
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 100
    width_scale: float = 1.0

    def __post_init__(self):
        if self.n_t < 1 or self.n_c < 1:
            raise ValueError("n_t and n_c must be >= 1")
        frac = _as_fraction(self.gamma)
        v = frac * 2 * self.n_t * self.n_c
        if v.denominator != 1 or v < 1:
            raise ValueError(f"codeword size 2*{self.n_t}*{self.n_c}*{self.gamma} is not a positive integer")
        self.gamma = float(frac)
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")

    @property
    def codeword_size(self) -> int:
        return int(_as_fraction(self.gamma) * 2 * self.n_t * self.n_c)

    @property
    def input_size(self) -> int:
        return 2 * self.n_t * self.n_c

    def widths(self) -> tuple[int, int]:
        return max(1, round(8 * self.width_scale)), max(1, round(16 * self.width_scale))

    def to_dict(self) -> dict:
        return asdict(self)


@runtime_checkable
class CsiAutoencoder(Protocol):
    """What the pipeline needs from an autoencoder; alternates plug in here."""

    def encode(self, x: np.ndarray) -> np.ndarray: ...

    def decode(self, s: np.ndarray) -> np.ndarray: ...

    def fit(self, data: np.ndarray, seed) -> list[float]: ...


def _lrelu(x):
    return ops.leaky_relu(x, LEAK)


class RefineBlock(Module):
    """2 -> w1 -> w2 -> 2 convolutions with batch norm and a residual add."""

    def __init__(self, w1: int, w2: int, rng):
        self.conv1 = Conv2d(2, w1, 3, rng, padding=1)
        self.bn1 = BatchNorm2d(w1)
        self.conv2 = Conv2d(w1, w2, 3, rng, padding=1)
        self.bn2 = BatchNorm2d(w2)
        self.conv3 = Conv2d(w2, 2, 3, rng, padding=1)
        self.bn3 = BatchNorm2d(2)

    def forward(self, x):
        h = _lrelu(self.bn1(self.conv1(x)))
        h = _lrelu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        return _lrelu(h + x)


class Encoder(Module):
    def __init__(self, config: DaeConfig, rng):
        self.conv = Conv2d(2, 2, 3, rng, padding=1)
        self.bn = BatchNorm2d(2)
        self.fc = Linear(config.input_size, config.codeword_size, rng)

    def forward(self, x):
        h = _lrelu(self.bn(self.conv(x)))
        return self.fc(ops.reshape(h, (x.shape[0], -1)))


class Decoder(Module):
    def __init__(self, config: DaeConfig, rng):
        self.shape = (2, config.n_t, config.n_c)
        self.fc = Linear(config.codeword_size, config.input_size, rng)
        w1, w2 = config.widths()
        self.refine = [RefineBlock(w1, w2, rng) for _ in range(3)]
        self.conv = Conv2d(2, 2, 3, rng, padding=1)

    def forward(self, s):
        h = ops.reshape(self.fc(s), (s.shape[0], *self.shape))
        for block in self.refine:
            h = block(h)
        return ops.tanh(self.conv(h))


@dataclass
class DaeParams:
    encoder: ParamVector
    decoder: ParamVector


class Dae(Module):
    """Encoder f_enc and decoder f_dec trained jointly on the reconstruction loss."""

    def __init__(self, config: DaeConfig, rng):
        self.config = config
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)

    def forward(self, x):
        return self.decoder(self.encoder(x))

    def params(self) -> DaeParams:
        return DaeParams(self.encoder.state(), self.decoder.state())

    def load_params(self, params: DaeParams) -> None:
        self.encoder.load_state(params.encoder)
        self.decoder.load_state(params.decoder)

    # CsiAutoencoder interface
    def encode(self, x) -> np.ndarray:
        return encode(self, x)

    def decode(self, s) -> np.ndarray:
        return decode(self, s)

    def reconstruct(self, x) -> np.ndarray:
        return decode(self, encode(self, x))

    def fit(self, data, seed) -> list[float]:
        return train_dae(self, data, self.config, seed)[1]


def build_dae(config: DaeConfig, init_seed) -> Dae:
    return Dae(config, np.random.default_rng(init_seed))


def _eval_forward(module: Module, x: np.ndarray) -> np.ndarray:
    was = module.training
    module.eval()
    try:
        with no_grad():
            return module(Tensor(x)).data
    finally:
        module.train(was)


def encode(model: Dae, H) -> np.ndarray:
    """Codeword(s) for one (2, N_t, N_c) tensor or a batch of them."""
    H = np.asarray(H, dtype=float)
    shape = (2, model.config.n_t, model.config.n_c)
    single = H.shape == shape
    if not single and (H.ndim != 4 or H.shape[1:] != shape):
        raise ValueError(f"encoder input must be {shape} or (N, *{shape}), got {H.shape}")
    out = _eval_forward(model.encoder, H[None] if single else H)
    return out[0] if single else out


def decode(model: Dae, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    v = model.config.codeword_size
    single = s.ndim == 1
    if s.shape[-1] != v or s.ndim not in (1, 2):
        raise ValueError(f"codeword length must be {v}, got shape {s.shape}")
    out = _eval_forward(model.decoder, s[None] if single else s)
    return out[0] if single else out


def mse_loss(H, H_hat):
    """(1/N_s) * sum_i ||H_i - H_hat_i||^2; differentiable when given tensors."""
    if isinstance(H, Tensor) or isinstance(H_hat, Tensor):
        if tuple(H.shape) != tuple(H_hat.shape):
            raise ValueError("shape mismatch")
        if H.shape[0] == 0:
            raise ValueError("empty batch")
        d = ops.sub(H_hat, H)
        return ops.sum(d * d) * (1.0 / H.shape[0])
    H, H_hat = np.asarray(H, dtype=float), np.asarray(H_hat, dtype=float)
    if H.shape != H_hat.shape:
        raise ValueError("shape mismatch")
    if len(H) == 0:
        raise ValueError("empty batch")
    return float(np.sum((H - H_hat) ** 2) / len(H))


@dataclass
class DaeHistory:
    loss: list[float] = field(default_factory=list)


def train_dae(model: Dae, data, config: DaeConfig | None = None, seed=0) -> tuple[Dae, list[float]]:
    """Minimise the reconstruction MSE with Adam; returns the per-epoch mean batch loss."""
    config = config or model.config
    data = np.asarray(data, dtype=float)
    if data.ndim != 4 or len(data) == 0:
        raise ValueError("training data must be a non-empty (N, 2, N_t, N_c) array")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    bs = min(config.batch_size, len(data))
    history = []
    model.train()
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(data))
        losses = []
        try:
            for lo in range(0, len(data), bs):
                idx = perm[lo : lo + bs]
                if len(idx) < 2 and len(data) >= 2:
                    continue  # batch norm needs two samples
                x = Tensor(data[idx])
                loss = mse_loss(x, model(x))
                opt.step(grad(loss, params))
                losses.append(float(loss.data))
        except NonFiniteError:
            raise TrainingDiverged(epoch) from None
        history.append(float(np.mean(losses)))
        if not math.isfinite(history[-1]):
            raise TrainingDiverged(epoch)
    model.eval()
    return model, history


def nmse_db(H, H_hat) -> float:
    """10 log10 of the mean per-sample ||H_hat - H||^2 / ||H||^2; -inf when exact."""
    H, H_hat = np.asarray(H), np.asarray(H_hat)
    if H.shape != H_hat.shape or H.size == 0:
        raise ValueError("need non-empty sets of equal shape")
    axes = tuple(range(1, H.ndim))
    power = np.sum(np.abs(H) ** 2, axis=axes)
    if np.any(power == 0):
        raise ValueError("a reference channel has zero norm")
    ratio = float(np.mean(np.sum(np.abs(H_hat - H) ** 2, axis=axes) / power))
    return -math.inf if ratio == 0.0 else 10.0 * math.log10(ratio)


def format_nmse(value: float) -> str:
    return PERFECT if value == -math.inf else f"{value:.4f}"
