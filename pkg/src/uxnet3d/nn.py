"""Parameter-holding layers built on :mod:`uxnet3d.functional`."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .functional import Conv3dSpec, NormSpec
from .rng import Rng
from .tensor import Parameter, Tensor, add

LN_EPS = 1e-6
IN_EPS = 1e-5
DECODER_SLOPE = 0.01


class Module:
    """Minimal container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                val.name = name
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Conv3d(Module):
    def __init__(self, spec: Conv3dSpec, rng: Rng, dtype=np.float32, std: float = 0.02):
        self.spec = spec
        self.weight = Parameter(rng.trunc_normal(spec.weight_shape, std=std, dtype=dtype))
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=dtype)) if spec.bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.spec, self.weight, self.bias)


class ConvTranspose3d(Module):
    def __init__(self, spec: Conv3dSpec, rng: Rng, dtype=np.float32, std: float = 0.02):
        self.spec = spec
        self.weight = Parameter(rng.trunc_normal(spec.transpose_weight_shape, std=std, dtype=dtype))
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=dtype)) if spec.bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose3d(x, self.spec, self.weight, self.bias)


class Norm(Module):
    def __init__(self, spec: NormSpec, dtype=np.float32):
        self.spec = spec
        self.weight = Parameter(np.ones(spec.num_channels, dtype=dtype))
        self.bias = Parameter(np.zeros(spec.num_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if self.spec.kind == "layer_norm_channel":
            return F.layer_norm_channel(x, self.spec, self.weight, self.bias)
        return F.instance_norm(x, self.spec, self.weight, self.bias)


def layer_norm(channels: int, dtype=np.float32) -> Norm:
    return Norm(NormSpec("layer_norm_channel", channels, LN_EPS), dtype)


def instance_norm(channels: int, dtype=np.float32) -> Norm:
    return Norm(NormSpec("instance_norm", channels, IN_EPS), dtype)


class ResBlock(Module):
    """Two post-normalized 3x3x3 convs with instance norm and a residual path.

    conv -> IN -> leaky_relu -> conv -> IN, plus the input (through a 1x1x1
    conv + IN when the width changes), then leaky_relu.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: Rng, dtype=np.float32, slope: float = DECODER_SLOPE):
        self.in_ch, self.out_ch, self.slope = in_ch, out_ch, slope
        self.conv1 = Conv3d(Conv3dSpec(in_ch, out_ch, 3, 1, 1, bias=False), rng, dtype)
        self.norm1 = instance_norm(out_ch, dtype)
        self.conv2 = Conv3d(Conv3dSpec(out_ch, out_ch, 3, 1, 1, bias=False), rng, dtype)
        self.norm2 = instance_norm(out_ch, dtype)
        if in_ch != out_ch:
            self.proj = Conv3d(Conv3dSpec(in_ch, out_ch, 1, 1, 0, bias=False), rng, dtype)
            self.proj_norm = instance_norm(out_ch, dtype)
        else:
            self.proj = None
            self.proj_norm = None

    def forward(self, x: Tensor) -> Tensor:
        h = F.leaky_relu(self.norm1(self.conv1(x)), self.slope)
        h = self.norm2(self.conv2(h))
        skip = x if self.proj is None else self.proj_norm(self.proj(x))
        return F.leaky_relu(add(h, skip), self.slope)
