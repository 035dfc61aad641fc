"""Minimal layer containers: parameter registration, buffers, train/eval mode."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    """Base container tracking child modules, parameters, and buffers."""

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            raise KeyError(f"unknown buffer {name!r}")
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for cname, child in self._modules.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield (f"{prefix}{name}", b)
        for cname, child in self._modules.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._modules.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Convert all parameters and buffers in place (e.g. for f64 checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name, buf in list(m._buffers.items()):
                if np.issubdtype(buf.dtype, np.floating):
                    m.set_buffer(name, buf.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    """Sequence of child modules registered by index."""

    def __init__(self, items=()):
        super().__init__()
        self._items: list[Module] = []
        for item in items:
            self.append(item)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def _fan_in_normal(rng: np.random.Generator, shape, fan_in: int, gain: float) -> np.ndarray:
    std = gain / np.sqrt(fan_in)
    return rng.normal(0.0, std, size=shape).astype(np.float32)


class Conv3d(Module):
    """3-D convolution layer; weights use fan-in scaled normal init.

    gain sqrt(2) suits ReLU-followed convs; pass gain=1.0 for convs feeding
    a sigmoid or the logits so fresh pre-activations stay near zero.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel,
        stride=1,
        padding=0,
        bias: bool = True,
        *,
        rng: np.random.Generator,
        gain: float = float(np.sqrt(2.0)),
    ):
        super().__init__()
        kernel = ops._triple(kernel, "kernel")
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel[0] * kernel[1] * kernel[2]
        self.weight = Parameter(
            _fan_in_normal(rng, (out_channels, in_channels) + kernel, fan_in, gain)
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor, method: str = "im2col") -> Tensor:
        return ops.conv3d(
            x, self.weight, self.bias, stride=self.stride, padding=self.padding, method=method
        )


class BatchNorm3d(Module):
    """Per-channel batchnorm (eps 1e-5, EMA momentum 0.1).

    Running buffers hold the biased batch statistics EMA; the steps buffer
    counts updates so eval before any update (and before a checkpoint load,
    which restores steps) fails loudly instead of normalizing with the
    untouched init values. Setting update_running=False freezes the buffers
    while still normalizing with batch statistics.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))
        self.register_buffer("steps", np.zeros(1, dtype=np.float32))
        self.update_running = True

    @property
    def stats_ready(self) -> bool:
        return float(self.steps[0]) > 0

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            out = ops.batchnorm3d(
                x,
                self.gamma,
                self.beta,
                self.running_mean,
                self.running_var,
                training=True,
                momentum=self.momentum,
                eps=self.eps,
                update_running=self.update_running,
            )
            if self.update_running:
                self.steps[0] += 1
            return out
        if not self.stats_ready:
            raise RuntimeError(
                "batchnorm eval requested before any running-stat update; "
                "train first or load statistics from a checkpoint"
            )
        return ops.batchnorm3d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=False,
            momentum=self.momentum,
            eps=self.eps,
        )


class Linear(Module):
    """Fully connected layer over (N, D) rows."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        *,
        rng: np.random.Generator,
        gain: float = float(np.sqrt(2.0)),
    ):
        super().__init__()
        self.weight = Parameter(_fan_in_normal(rng, (out_features, in_features), in_features, gain))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


def stamp_parameter_names(root: Module, prefix: str = "") -> None:
    """Assign dotted-path names to every parameter under root."""
    for name, p in root.named_parameters(prefix):
        p.name = name


def set_role(module: Module, role: str) -> None:
    """Tag every parameter under module with a branch role."""
    for _, p in module.named_parameters():
        p.role = role
