"""Differentiable 3D convolution, normalization and activation primitives.

Convolutions are cross-correlations.  Dense convs with small inputs go through
im2col and one matmul; depthwise convs and anything whose column buffer would
exceed ``IM2COL_LIMIT`` use shift-and-accumulate over kernel offsets, which
keeps memory at one input-sized buffer (large depthwise kernels would
otherwise blow up ``k**3``-fold).
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, _check_dtypes, as_tensor, is_grad_enabled, make_result


def _triple(v) -> tuple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(e) for e in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


@dataclass(frozen=True)
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        self.validate()

    def validate(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ValueError(f"channel and group counts must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must both be divisible by groups={self.groups}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid kernel/stride/padding in {self}")

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def transpose_weight_shape(self) -> tuple:
        return (self.in_channels, self.out_channels // self.groups, *self.kernel)

    def output_extent(self, spatial) -> tuple:
        out = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(spatial, self.padding, self.kernel, self.stride))
        if min(out) < 1:
            raise ShapeError(f"non-positive output extent {out} for input {tuple(spatial)} with {self}")
        return out

    def transpose_output_extent(self, spatial) -> tuple:
        out = tuple((n - 1) * s - 2 * p + k for n, p, k, s in zip(spatial, self.padding, self.kernel, self.stride))
        if min(out) < 1:
            raise ShapeError(f"non-positive transpose output extent {out} for {self}")
        return out


@dataclass(frozen=True)
class NormSpec:
    kind: str  # "layer_norm_channel" | "instance_norm"
    num_channels: int
    eps: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("layer_norm_channel", "instance_norm"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


# ---------------------------------------------------------------------------
# Convolution kernels (plain numpy; no graph recording)
# ---------------------------------------------------------------------------

def _offsets(kernel):
    return itertools.product(range(kernel[0]), range(kernel[1]), range(kernel[2]))


def _window(xp, off, stride, out_sp):
    a, b, c = off
    sa, sb, sc = stride
    return xp[:, :, a:a + sa * (out_sp[0] - 1) + 1:sa, b:b + sb * (out_sp[1] - 1) + 1:sb, c:c + sc * (out_sp[2] - 1) + 1:sc]


# im2col buffers above this many bytes fall back to shift-and-accumulate
IM2COL_LIMIT = 256 * 2**20


def _use_im2col(xp, w, out_sp) -> bool:
    cin_g = w.shape[1]
    k = int(np.prod(w.shape[2:]))
    if cin_g == 1 or k == 1:
        return False
    n, cin = xp.shape[:2]
    return n * cin * k * int(np.prod(out_sp)) * xp.itemsize <= IM2COL_LIMIT


def _im2col(xp, kernel, stride, out_sp, groups) -> np.ndarray:
    """Columns shaped ``(N, g, Cin_g * K, S)``; one contiguous copy."""
    n, cin = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=(2, 3, 4))
    win = win[:, :, ::stride[0], ::stride[1], ::stride[2]][:, :, :out_sp[0], :out_sp[1], :out_sp[2]]
    # (N, C, Ho, Wo, Do, kh, kw, kd) -> (N, C, kh, kw, kd, Ho, Wo, Do)
    win = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    k = int(np.prod(kernel))
    return np.ascontiguousarray(win).reshape(n, groups, (cin // groups) * k, int(np.prod(out_sp)))


def _col2im(cols, xp_shape, kernel, stride, out_sp) -> np.ndarray:
    n, cin = xp_shape[:2]
    cols = cols.reshape(n, cin, *kernel, *out_sp)
    gxp = np.zeros(xp_shape, dtype=cols.dtype)
    for off in _offsets(kernel):
        _window(gxp, off, stride, out_sp)[...] += cols[(slice(None), slice(None)) + off]
    return gxp


def conv_forward_raw(xp: np.ndarray, w: np.ndarray, stride, out_sp, cols=None) -> np.ndarray:
    n, cin = xp.shape[:2]
    cout, cin_g = w.shape[:2]
    g = cin // cin_g
    cout_g = cout // g
    s = int(np.prod(out_sp))
    if cols is not None or _use_im2col(xp, w, out_sp):
        if cols is None:
            cols = _im2col(xp, w.shape[2:], stride, out_sp, g)
        out = np.matmul(w.reshape(g, cout_g, -1), cols)
        return out.reshape(n, cout, *out_sp)
    out = np.zeros((n, g, cout_g, s), dtype=xp.dtype)
    for off in _offsets(w.shape[2:]):
        xs = _window(xp, off, stride, out_sp).reshape(n, g, cin_g, s)
        wo = w[(slice(None), slice(None)) + off].reshape(g, cout_g, cin_g)
        if cin_g == 1:
            out += wo[None, :, :, 0:1] * xs
        else:
            out += np.matmul(wo, xs)
    return out.reshape(n, cout, *out_sp)


def conv_backward_input_raw(gout: np.ndarray, w: np.ndarray, stride, xp_shape) -> np.ndarray:
    n, cout = gout.shape[:2]
    out_sp = gout.shape[2:]
    cin_g = w.shape[1]
    cin = xp_shape[1]
    g = cin // cin_g
    cout_g = cout // g
    s = int(np.prod(out_sp))
    go = gout.reshape(n, g, cout_g, s)
    k = int(np.prod(w.shape[2:]))
    if cin_g > 1 and k > 1 and n * cin * k * s * gout.itemsize <= IM2COL_LIMIT:
        wt = w.reshape(g, cout_g, cin_g * k).transpose(0, 2, 1)
        cols = np.matmul(wt, go)  # (n, g, cin_g * k, s)
        return _col2im(cols, xp_shape, w.shape[2:], stride, out_sp)
    gxp = np.zeros(xp_shape, dtype=gout.dtype)
    for off in _offsets(w.shape[2:]):
        wo = w[(slice(None), slice(None)) + off].reshape(g, cout_g, cin_g)
        if cout_g == 1:
            contrib = wo[None, :, 0, :, None] * go  # (n, g, cin_g, s)
        elif cin_g == 1:
            contrib = (wo[None, :, :, 0, None] * go).sum(axis=2, keepdims=True)
        else:
            contrib = np.matmul(wo.transpose(0, 2, 1), go)
        _window(gxp, off, stride, out_sp)[...] += contrib.reshape(n, cin, *out_sp)
    return gxp


def conv_backward_weight_raw(gout: np.ndarray, xp: np.ndarray, w_shape, stride, cols=None) -> np.ndarray:
    n, cout = gout.shape[:2]
    out_sp = gout.shape[2:]
    cin_g = w_shape[1]
    cin = xp.shape[1]
    g = cin // cin_g
    cout_g = cout // g
    s = int(np.prod(out_sp))
    go = gout.reshape(n, g, cout_g, s)
    if cols is not None:
        gw = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0)
        return gw.reshape(w_shape)
    gw = np.zeros(w_shape, dtype=gout.dtype)
    for off in _offsets(w_shape[2:]):
        xs = _window(xp, off, stride, out_sp).reshape(n, g, cin_g, s)
        if cin_g == 1:
            val = (go * xs).sum(axis=(0, 3))[:, :, None]
        else:
            val = np.matmul(go, xs.transpose(0, 1, 3, 2)).sum(axis=0)
        gw[(slice(None), slice(None)) + off] = val.reshape(cout, cin_g)
    return gw


def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))


def _unpad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    pa, pb, pc = padding
    h, w, d = x.shape[2:]
    return x[:, :, pa:h - pa, pb:w - pb, pc:d - pc]


# ---------------------------------------------------------------------------
# Differentiable convolutions
# ---------------------------------------------------------------------------

_TRACE: list | None = None


@contextlib.contextmanager
def trace_convs():
    """Record ``(op, spec, in_shape, out_shape)`` for every conv run inside the block."""
    global _TRACE
    prev, _TRACE = _TRACE, []
    try:
        yield _TRACE
    finally:
        _TRACE = prev


def _trace(op, spec, x_shape, out_shape):
    if _TRACE is not None:
        _TRACE.append((op, spec, tuple(x_shape), tuple(out_shape)))


def _check_conv_inputs(x: Tensor, spec: Conv3dSpec, weight: Tensor, bias, wshape) -> None:
    if x.ndim != 5:
        raise ShapeError(f"expected (N, C, H, W, D) input, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(weight.shape) != tuple(wshape):
        raise ShapeError(f"weight shape {weight.shape} does not match expected {tuple(wshape)}")
    if spec.bias and bias is None:
        raise ValueError("spec requests a bias but none was given")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")


def conv3d(x, spec: Conv3dSpec, weight, bias=None) -> Tensor:
    """Zero-padded 3D cross-correlation with optional groups and bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv_inputs(x, spec, weight, bias, spec.weight_shape)
    inputs = [x, weight] + ([as_tensor(bias)] if bias is not None else [])
    _check_dtypes(*inputs)
    out_sp = spec.output_extent(x.shape[2:])
    xp = _pad(x.data, spec.padding)
    w = weight.data
    cols = None
    if _use_im2col(xp, w, out_sp):
        cols = _im2col(xp, spec.kernel, spec.stride, out_sp, spec.groups)
    out = conv_forward_raw(xp, w, spec.stride, out_sp, cols)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    if not (is_grad_enabled() and weight.requires_grad):
        cols = None
    _trace("conv3d", spec, x.shape, out.shape)

    def rule(g):
        gx = _unpad(conv_backward_input_raw(g, w, spec.stride, xp.shape), spec.padding) if x.requires_grad else None
        gw = conv_backward_weight_raw(g, xp, w.shape, spec.stride, cols) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return make_result(out, "conv3d", inputs, rule)


def conv3d_depthwise_multiplier(x, multiplier: int, weight, bias=None) -> Tensor:
    """1x1x1 per-channel expansion: output ``c*M + m`` reads input channel ``c`` only."""
    x = as_tensor(x)
    c = x.shape[1]
    expected = (c * multiplier, 1, 1, 1, 1)
    if tuple(weight.shape) != expected:
        raise ShapeError(f"depthwise multiplier weight must be {expected}, got {tuple(weight.shape)}")
    spec = Conv3dSpec(c, c * multiplier, kernel=1, groups=c, bias=bias is not None)
    return conv3d(x, spec, weight, bias)


def conv_transpose3d(x, spec: Conv3dSpec, weight, bias=None) -> Tensor:
    """Adjoint of :func:`conv3d` for the same weight array.

    ``weight`` has shape ``(in_channels, out_channels // groups, k, k, k)``;
    output extent per axis is ``(n - 1) * s - 2 * p + k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv_inputs(x, spec, weight, bias, spec.transpose_weight_shape)
    inputs = [x, weight] + ([as_tensor(bias)] if bias is not None else [])
    _check_dtypes(*inputs)
    out_sp = spec.transpose_output_extent(x.shape[2:])
    full_sp = tuple(o + 2 * p for o, p in zip(out_sp, spec.padding))
    w = weight.data
    n = x.shape[0]
    full = conv_backward_input_raw(x.data, w, spec.stride, (n, spec.out_channels, *full_sp))
    out = _unpad(full, spec.padding)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    elif out is not full:
        out = np.ascontiguousarray(out)
    _trace("conv_transpose3d", spec, x.shape, out.shape)

    def rule(g):
        gp = _pad(g, spec.padding)
        gx = conv_forward_raw(gp, w, spec.stride, x.shape[2:]) if x.requires_grad else None
        gw = conv_backward_weight_raw(x.data, gp, w.shape, spec.stride) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return make_result(out, "conv_transpose3d", inputs, rule)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _affine_shape(x: Tensor) -> tuple:
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def _normalize(x, spec: NormSpec, gamma, beta, axes: tuple, op: str) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.shape[1] != spec.num_channels:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels, norm expects {spec.num_channels}")
    _check_dtypes(x, gamma, beta)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(spec.eps))
    xhat = xc * inv
    shp = _affine_shape(x)
    gm = gamma.data.reshape(shp)
    out = xhat * gm + beta.data.reshape(shp)
    count = int(np.prod([xd.shape[a] for a in axes]))
    param_axes = tuple(a for a in range(xd.ndim) if a != 1)

    def rule(g):
        gx = None
        if x.requires_grad:
            gh = g * gm
            s1 = gh.sum(axis=axes, keepdims=True)
            s2 = (gh * xhat).sum(axis=axes, keepdims=True)
            gx = inv * (gh - s1 / count - xhat * (s2 / count))
        gg = (g * xhat).sum(axis=param_axes) if gamma.requires_grad else None
        gb = g.sum(axis=param_axes) if beta.requires_grad else None
        return gx, gg, gb

    return make_result(out, op, (x, gamma, beta), rule)


def layer_norm_channel(x, spec: NormSpec, gamma, beta) -> Tensor:
    """Normalize the channel vector at every voxel, then apply per-channel affine."""
    return _normalize(x, spec, gamma, beta, (1,), "layer_norm_channel")


def instance_norm(x, spec: NormSpec, gamma, beta) -> Tensor:
    """Normalize over spatial axes per (sample, channel), then affine."""
    x = as_tensor(x)
    return _normalize(x, spec, gamma, beta, tuple(range(2, x.ndim)), "instance_norm")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x) -> Tensor:
    """Exact GELU ``x * Phi(x)`` with Phi from erf."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def rule(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_result(out, "gelu", (x,), rule)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    slope = xd.dtype.type(slope)
    pos = xd >= 0
    out = np.where(pos, xd, slope * xd)

    def rule(g):
        return (np.where(pos, g, slope * g),)

    return make_result(out, "leaky_relu", (x,), rule)
