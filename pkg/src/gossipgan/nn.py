"""Layers, named parameter vectors and the Adam optimiser."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import Tensor, ops


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class; parameters, buffers and children are discovered from attributes.

    Attribute insertion order defines parameter order, which in turn defines
    the layout of :class:`ParamVector` and of checkpoints.
    """

    training = True
    _buffers: tuple[str, ...] = ()

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state(self) -> "ParamVector":
        return ParamVector(
            {n: p.data.copy() for n, p in self.named_parameters()},
            {n: b.copy() for n, b in self.named_buffers()},
        )

    def load_state(self, pv: "ParamVector") -> None:
        own = dict(self.named_parameters())
        if list(own) != list(pv.entries):
            raise ValueError("parameter names do not match the module layout")
        for name, p in own.items():
            if p.data.shape != pv.entries[name].shape:
                raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {pv.entries[name].shape}")
            p.data = np.array(pv.entries[name], dtype=np.float64)
        for name, buf in self.named_buffers():
            if name in pv.buffers:
                buf[...] = pv.buffers[name]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


@dataclass
class ParamVector:
    """Ordered named real arrays; the unit of gossip exchange, merging and checkpointing.

    ``entries`` are trainable parameters. ``buffers`` (batch-norm running
    statistics) travel with them but do not count towards the parameter total.
    """

    entries: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def count(self) -> int:
        return int(sum(a.size for a in self.entries.values()))

    def memory_bytes(self) -> int:
        return 4 * self.count()

    def flat(self, with_buffers: bool = False) -> np.ndarray:
        arrays = list(self.entries.values())
        if with_buffers:
            arrays += list(self.buffers.values())
        if not arrays:
            return np.zeros(0)
        return np.concatenate([a.reshape(-1) for a in arrays])

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, a.shape) for n, a in self.entries.items()] + [
            (n, a.shape) for n, a in self.buffers.items()
        ]

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        """Inverse of ``flat(with_buffers=True)`` using this vector's layout."""
        out_e, out_b, pos = {}, {}, 0
        for target, source in ((out_e, self.entries), (out_b, self.buffers)):
            for name, a in source.items():
                target[name] = flat[pos : pos + a.size].reshape(a.shape).copy()
                pos += a.size
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} values, layout needs {pos}")
        return ParamVector(out_e, out_b)

    def copy(self) -> "ParamVector":
        return ParamVector(
            {n: a.copy() for n, a in self.entries.items()},
            {n: a.copy() for n, a in self.buffers.items()},
        )

    def digest(self) -> str:
        return hashlib.sha256(self.flat(with_buffers=True).tobytes()).hexdigest()[:16]

    def __len__(self) -> int:
        return self.count()


def param_count(params) -> int:
    """Number of trainable scalars in a ParamVector or Module."""
    return params.count() if isinstance(params, ParamVector) else params.param_count()


def memory_bytes(params) -> int:
    """Storage cost assuming 4-byte elements."""
    return 4 * param_count(params)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = Parameter(_uniform(rng, (n_out, n_in), n_in))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride=1, padding=0):
        self.weight = Parameter(_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = Parameter(np.zeros(c_out))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride=1, padding=0):
        self.weight = Parameter(_uniform(rng, (c_in, c_out, k, k), c_in))
        self.bias = Parameter(np.zeros(c_out))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return ops.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Adam:
    """Adam with bias correction; updates parameter arrays by replacement."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g.data if isinstance(g, Tensor) else g
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
