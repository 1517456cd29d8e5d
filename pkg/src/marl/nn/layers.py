"""Layer primitives and the sequential network container.

Layers own Parameters and translate to/from declarative LayerSpec entries so a
network can be rebuilt exactly from a checkpoint header. Weights initialize
uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)] from the given generator; biases
start at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DimensionError, StateError
from . import autodiff as ad
from .autodiff import Parameter, Tensor


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    options: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind, "options": dict(self.options)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(kind=d["kind"], options=dict(d["options"]))


def _init_weight(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    lim = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-lim, lim, size=shape).astype(np.float32)


class Layer:
    name: str = "layer"

    def parameters(self) -> list[Parameter]:
        return []

    def spec(self) -> LayerSpec:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None, name: str = "conv"):
        if stride not in (1, 2):
            raise ConfigError(f"{name}: stride must be 1 or 2, got {stride}")
        if kernel < 1:
            raise ConfigError(f"{name}: kernel must be >= 1, got {kernel}")
        if not 0 <= padding <= kernel - 1:
            raise ConfigError(f"{name}: padding must be in [0, kernel-1], got {padding}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.name = name
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.w = Parameter(_init_weight(rng, (out_ch, in_ch, kernel, kernel), fan_in), f"{name}.w")
        self.b = Parameter(np.zeros(out_ch, dtype=np.float32), f"{name}.b")

    def parameters(self):
        return [self.w, self.b]

    def spec(self):
        return LayerSpec("conv2d", {
            "in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": self.kernel,
            "stride": self.stride, "padding": self.padding,
        })

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, self.stride, self.padding, name=self.name)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, name: str = "fc"):
        self.in_features, self.out_features = in_features, out_features
        self.name = name
        rng = rng or np.random.default_rng(0)
        self.w = Parameter(_init_weight(rng, (in_features, out_features), in_features), f"{name}.w")
        self.b = Parameter(np.zeros(out_features, dtype=np.float32), f"{name}.b")

    def parameters(self):
        return [self.w, self.b]

    def spec(self):
        return LayerSpec("linear", {"in_features": self.in_features, "out_features": self.out_features})

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(
                f"{self.name}: expected (batch, {self.in_features}), got {x.shape}")
        return ad.add(ad.matmul(x, self.w), self.b)


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        self.name = name

    def spec(self):
        return LayerSpec("relu", {})

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(x)


class Sigmoid(Layer):
    def __init__(self, name: str = "sigmoid"):
        self.name = name

    def spec(self):
        return LayerSpec("sigmoid", {})

    def __call__(self, x: Tensor) -> Tensor:
        return ad.sigmoid(x)


class UpsampleConv(Layer):
    """Nearest-neighbor 2x upsampling followed by a stride-1 conv."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3,
                 rng: np.random.Generator | None = None, name: str = "up"):
        self.name = name
        self.conv = Conv2d(in_ch, out_ch, kernel, stride=1, padding=(kernel - 1) // 2,
                           rng=rng, name=f"{name}.conv")

    def parameters(self):
        return self.conv.parameters()

    def spec(self):
        return LayerSpec("transposed_upsample2d", {
            "in_ch": self.conv.in_ch, "out_ch": self.conv.out_ch, "kernel": self.conv.kernel,
        })

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(ad.upsample2x(x))


class ResidualBlock(Layer):
    """x + conv_b(relu(conv_a(x))); both convs keep channels and resolution.

    With conv weights and biases at zero the block is the identity map.
    """

    def __init__(self, channels: int, kernel: int = 3,
                 rng: np.random.Generator | None = None, name: str = "res"):
        self.name = name
        self.channels = channels
        pad = (kernel - 1) // 2
        self.conv_a = Conv2d(channels, channels, kernel, 1, pad, rng=rng, name=f"{name}.a")
        self.conv_b = Conv2d(channels, channels, kernel, 1, pad, rng=rng, name=f"{name}.b")

    def parameters(self):
        return self.conv_a.parameters() + self.conv_b.parameters()

    def spec(self):
        return LayerSpec("residual_block", {"channels": self.channels, "kernel": self.conv_a.kernel})

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.conv_b(ad.relu(self.conv_a(x))))


_LAYER_BUILDERS = {
    "conv2d": lambda o, rng, name: Conv2d(o["in_ch"], o["out_ch"], o["kernel"],
                                          o["stride"], o["padding"], rng, name),
    "linear": lambda o, rng, name: Linear(o["in_features"], o["out_features"], rng, name),
    "relu": lambda o, rng, name: ReLU(name),
    "sigmoid": lambda o, rng, name: Sigmoid(name),
    "transposed_upsample2d": lambda o, rng, name: UpsampleConv(o["in_ch"], o["out_ch"],
                                                               o["kernel"], rng, name),
    "residual_block": lambda o, rng, name: ResidualBlock(o["channels"], o["kernel"], rng, name),
}


class Network(Layer):
    """Plain sequential container with an explicit forward/backward pairing."""

    def __init__(self, layers: list[Layer], name: str = "net"):
        self.layers = layers
        self.name = name
        self._last_output: Tensor | None = None

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def specs(self) -> list[LayerSpec]:
        return [layer.spec() for layer in self.layers]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        self._last_output = x
        return x

    def backward(self, upstream) -> None:
        if self._last_output is None:
            raise StateError(f"{self.name}: backward called before forward")
        self._last_output.backward(upstream)
        self._last_output = None

    def reset(self) -> None:
        self._last_output = None

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    @classmethod
    def from_specs(cls, specs: list[LayerSpec], rng: np.random.Generator, name: str = "net") -> "Network":
        layers = []
        for i, spec in enumerate(specs):
            builder = _LAYER_BUILDERS.get(spec.kind)
            if builder is None:
                raise ConfigError(f"unknown layer kind {spec.kind!r}")
            layers.append(builder(spec.options, rng, f"{name}.{i}_{spec.kind}"))
        return cls(layers, name)


def cast_parameters(layer: Layer, dtype) -> None:
    """In-place dtype cast of every parameter (gradient checks run in float64)."""
    for p in layer.parameters():
        p.data = p.data.astype(dtype)
        p.grad = None
