"""
Parameter containers and basic layers.

Modules own their parameters as attributes; ``named_parameters`` walks the
attribute tree in definition order. Every parameter is initialised from its
own counter-based stream keyed on (seed, parameter name), so the initial
value of a parameter never depends on which other modules exist.
"""
import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from nearquery.exceptions import ConfigError
from nearquery.numcore import ops
from nearquery.numcore.tensor import Tensor, resolve_dtype
from nearquery.utils.rng import stream

logger = logging.getLogger(__name__)


class Initializer:
    """Creates named parameters from per-name random streams"""

    def __init__(self, seed: int = 0, dtype: str = "f32"):
        self.seed = seed
        self.dtype = resolve_dtype(dtype)
        self._names = set()

    def _claim(self, name: str) -> None:
        if name in self._names:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._names.add(name)

    def _wrap(self, name: str, values: np.ndarray) -> Tensor:
        self._claim(name)
        return Tensor(values.astype(self.dtype), requires_grad=True, name=name)

    def xavier_uniform(self, name: str, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self._wrap(name, stream(self.seed, name).uniform(-bound, bound, size=shape))

    def he_normal(self, name: str, shape: Tuple[int, ...], fan_in: int) -> Tensor:
        std = math.sqrt(2.0 / fan_in)
        return self._wrap(name, stream(self.seed, name).normal(0.0, std, size=shape))

    def normal(self, name: str, shape: Tuple[int, ...], std: float = 1.0) -> Tensor:
        return self._wrap(name, stream(self.seed, name).normal(0.0, std, size=shape))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self._wrap(name, np.zeros(shape))

    def ones(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self._wrap(name, np.ones(shape))


class Module:
    """Base class: parameter discovery and state I/O"""

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        seen = set()
        for name, param in _walk(self):
            if id(param) not in seen:
                seen.add(id(param))
                yield name, param

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _walk(value) -> Iterator[Tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad and value.name:
            yield value.name, value
    elif isinstance(value, Module):
        for attr in vars(value).values():
            yield from _walk(attr)
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _walk(item)


class Linear(Module):
    """y = x @ W + b with W stored as [in, out]"""

    def __init__(
        self,
        init: Initializer,
        name: str,
        d_in: int,
        d_out: int,
        bias: bool = True,
        zero: bool = False,
    ):
        self.d_in = d_in
        self.d_out = d_out
        if zero:
            self.weight = init.zeros(f"{name}.weight", (d_in, d_out))
        else:
            self.weight = init.xavier_uniform(f"{name}.weight", (d_in, d_out), d_in, d_out)
        self.bias = init.zeros(f"{name}.bias", (d_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        init: Initializer,
        name: str,
        c_in: int,
        c_out: int,
        kernel: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        bias: bool = True,
    ):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = c_in * kernel * kernel
        self.weight = init.he_normal(f"{name}.weight", (c_out, c_in, kernel, kernel), fan_in)
        self.bias = init.zeros(f"{name}.bias", (c_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, init: Initializer, name: str, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = init.ones(f"{name}.gamma", (d,))
        self.beta = init.zeros(f"{name}.beta", (d,))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Linear layers with relu between them (none after the last)"""

    def __init__(self, init: Initializer, name: str, dims: Sequence[int]):
        if len(dims) < 2:
            raise ConfigError(f"MLP {name} needs at least input and output widths, got {dims}")
        self.layers = [
            Linear(init, f"{name}.{i}", d_in, d_out)
            for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:]))
        ]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.relu(x)
        return x


def tokens_from_map(fmap: Tensor) -> Tensor:
    """[C,H,W] -> [H*W, C], row-major over (H, W)"""
    c = fmap.shape[0]
    return fmap.reshape(c, -1).transpose(1, 0)


def map_from_tokens(tokens: Tensor, height: int, width: int) -> Tensor:
    """[H*W, C] -> [C,H,W]"""
    return tokens.transpose(1, 0).reshape(tokens.shape[1], height, width)


def sine_position_encoding(height: int, width: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sine/cosine encoding, [H*W, d_model] (half the channels per axis)"""
    half = d_model // 2
    ys = (np.arange(height) + 0.5) / height * 2 * math.pi
    xs = (np.arange(width) + 0.5) / width * 2 * math.pi

    def encode(coords: np.ndarray, n: int) -> np.ndarray:
        q = max((n + 1) // 2, 1)
        freqs = 1.0 / (10000.0 ** (np.arange(q) / q))
        angles = coords[:, None] * freqs[None, :]
        enc = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
        return enc[:, :n]

    enc_y = encode(ys, half)
    enc_x = encode(xs, d_model - half)
    grid_y = np.repeat(enc_y, width, axis=0)
    grid_x = np.tile(enc_x, (height, 1))
    return np.concatenate([grid_y, grid_x], axis=1).astype(dtype)


__all__ = [
    "Initializer",
    "Module",
    "Linear",
    "Conv2d",
    "LayerNorm",
    "MLP",
    "tokens_from_map",
    "map_from_tokens",
    "sine_position_encoding",
]
