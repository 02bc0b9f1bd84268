"""Large-kernel depthwise encoder with a residual U-shaped decoder.

Encoder block (two residual branches, nothing applied after either sum)::

    z_hat = DWC(LN(z)) + z
    z_out = DCS(LN(z_hat)) + z_hat

DCS expands every channel to 4 by a per-channel 1x1x1 conv, applies GELU and
compresses each group of 4 back to one channel, so channels never mix inside
the encoder blocks.  Channel mixing happens only in the stride-2 downsampling
convs.

Decoder topology (documented because the params/FLOPs depend on it):

* every encoder output ``f_s`` gets a skip refinement ``ResBlock(C_s -> W_s)``;
* the deepest feature is refined into the decoder seed: with a bottleneck,
  ``f4`` is downsampled to ``bottleneck_channels`` at 1/32 and reduced by
  ``ResBlock(768 -> 768 // 4)``; without one, ``ResBlock(C4 -> W4)`` on ``f4``;
* each shallower level upsamples with a k=2, s=2 transpose conv to ``W_s``,
  concatenates the refined skip and fuses with ``ResBlock(2 W_s -> W_s)``;
* at full resolution the upsampled features are concatenated with an
  input-level ``ResBlock(in -> R0)`` and fused by ``ResBlock(W0 + R0 -> W0)``;
  a 1x1x1 conv emits logits.

Default decoder widths are ``(C1, C1, C2, C4, C4)`` for levels 1/1..1/16 and
``R0 = 2 * C1 // 3``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import functional as F
from .functional import Conv3dSpec
from .nn import Conv3d, ConvTranspose3d, Module, ResBlock, layer_norm
from .rng import Rng
from .tensor import Tensor, add, concat_channels, no_grad, softmax_channels, upsample_nearest

SCALING_MODES = ("DCS", "MLP", "NONE")
CONV_MODES = ("DEPTHWISE", "STANDARD")
EXPANSION = 4


class ConfigError(ValueError):
    pass


@dataclass
class UXNetConfig:
    in_channels: int = 1
    num_classes: int = 5
    stage_channels: tuple = (48, 96, 192, 384)
    stage_depths: tuple = (2, 2, 2, 2)
    kernel_size: int = 7
    scaling_mode: str = "DCS"
    conv_mode: str = "DEPTHWISE"
    bottleneck_channels: int | None = 768
    deep_supervision: bool = False
    patch_size: tuple = (96, 96, 96)
    # None -> follow kernel_size; sweeps pin this to 7
    patch_kernel_size: int | None = None
    decoder_channels: tuple | None = None
    input_skip_channels: int | None = None

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.decoder_channels is not None:
            self.decoder_channels = tuple(int(c) for c in self.decoder_channels)

    # -- derived -----------------------------------------------------------
    @property
    def embed_kernel(self) -> int:
        return self.patch_kernel_size if self.patch_kernel_size is not None else self.kernel_size

    @property
    def decoder_widths(self) -> tuple:
        if self.decoder_channels is not None:
            return self.decoder_channels
        c1, c2, _, c4 = self.stage_channels
        return (c1, c1, c2, c4, c4)

    @property
    def input_skip_width(self) -> int:
        if self.input_skip_channels is not None:
            return self.input_skip_channels
        return max(1, 2 * self.stage_channels[0] // 3)

    @property
    def bottleneck_out(self) -> int:
        return max(1, self.bottleneck_channels // EXPANSION)

    @property
    def divisor(self) -> int:
        return 32 if self.bottleneck_channels else 16

    def violations(self) -> list[str]:
        errs = []
        if self.in_channels < 1 or self.num_classes < 1:
            errs.append("in_channels and num_classes must be >= 1")
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            errs.append("stage_channels and stage_depths need exactly 4 entries")
        if any(c < 1 for c in self.stage_channels) or any(d < 0 for d in self.stage_depths):
            errs.append("stage channels must be >= 1 and depths >= 0")
        for name, k in (("kernel_size", self.kernel_size), ("patch_kernel_size", self.embed_kernel)):
            if k < 1 or k % 2 == 0:
                errs.append(f"{name} must be odd and positive, got {k}")
        if self.scaling_mode not in SCALING_MODES:
            errs.append(f"scaling_mode must be one of {SCALING_MODES}")
        if self.conv_mode not in CONV_MODES:
            errs.append(f"conv_mode must be one of {CONV_MODES}")
        if self.bottleneck_channels is not None and self.bottleneck_channels < 1:
            errs.append("bottleneck_channels must be positive or absent")
        if len(self.patch_size) != 3 or any(p < 1 for p in self.patch_size):
            errs.append(f"patch_size must be 3 positive extents, got {self.patch_size}")
        elif any(p % self.divisor for p in self.patch_size):
            errs.append(f"patch extents {self.patch_size} must be divisible by {self.divisor}")
        if self.decoder_channels is not None and (len(self.decoder_channels) != 5 or min(self.decoder_channels) < 1):
            errs.append("decoder_channels needs 5 positive widths (levels 1/1 .. 1/16)")
        if self.input_skip_channels is not None and self.input_skip_channels < 1:
            errs.append("input_skip_channels must be positive")
        return errs

    def validate(self) -> "UXNetConfig":
        errs = self.violations()
        if errs:
            raise ConfigError("invalid UXNetConfig: " + "; ".join(errs))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UXNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown UXNetConfig keys: {unknown}")
        return cls(**d)

    @classmethod
    def optimized(cls, **kw) -> "UXNetConfig":
        """Stage depths (2, 2, 8, 2), no bottleneck: hidden width stays at C4."""
        base = dict(stage_depths=(2, 2, 8, 2), bottleneck_channels=None)
        base.update(kw)
        return cls(**base)

    @classmethod
    def tiny(cls, **kw) -> "UXNetConfig":
        base = dict(
            stage_channels=(8, 16, 32, 64), bottleneck_channels=None, patch_size=(32, 32, 32), num_classes=3,
        )
        base.update(kw)
        return cls(**base)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

class UXBlock(Module):
    def __init__(self, channels: int, cfg: UXNetConfig, rng: Rng, dtype=np.float32):
        c, k = channels, cfg.kernel_size
        self.channels = c
        self.scaling_mode = cfg.scaling_mode
        groups = c if cfg.conv_mode == "DEPTHWISE" else 1
        self.norm1 = layer_norm(c, dtype)
        self.dwc = Conv3d(Conv3dSpec(c, c, k, 1, (k - 1) // 2, groups=groups), rng, dtype)
        if cfg.scaling_mode != "NONE":
            self.norm2 = layer_norm(c, dtype)
        if cfg.scaling_mode == "DCS":
            self.expand = Conv3d(Conv3dSpec(c, EXPANSION * c, 1, groups=c), rng, dtype)
            self.compress = Conv3d(Conv3dSpec(EXPANSION * c, c, 1, groups=c), rng, dtype)
        elif cfg.scaling_mode == "MLP":
            self.fc1 = Conv3d(Conv3dSpec(c, EXPANSION * c, 1), rng, dtype)
            self.fc2 = Conv3d(Conv3dSpec(EXPANSION * c, c, 1), rng, dtype)

    def forward(self, z: Tensor) -> Tensor:
        z_hat = add(self.dwc(self.norm1(z)), z)
        if self.scaling_mode == "NONE":
            return z_hat
        h = self.norm2(z_hat)
        if self.scaling_mode == "DCS":
            h = F.conv3d_depthwise_multiplier(h, EXPANSION, self.expand.weight, self.expand.bias)
            h = self.compress(F.gelu(h))
        else:
            h = self.fc2(F.gelu(self.fc1(h)))
        return add(h, z_hat)


class Stage(Module):
    def __init__(self, channels: int, depth: int, cfg: UXNetConfig, rng: Rng, dtype=np.float32):
        self.blocks = [UXBlock(channels, cfg, rng, dtype) for _ in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class Encoder(Module):
    def __init__(self, cfg: UXNetConfig, rng: Rng, dtype=np.float32):
        chans = cfg.stage_channels
        k = cfg.embed_kernel
        self.patch_embed = Conv3d(Conv3dSpec(cfg.in_channels, chans[0], k, 2, (k - 1) // 2), rng, dtype)
        self.stages = [Stage(c, d, cfg, rng, dtype) for c, d in zip(chans, cfg.stage_depths)]
        self.downsamples = [Conv3d(Conv3dSpec(chans[i], chans[i + 1], 2, 2, 0), rng, dtype) for i in range(3)]
        if cfg.bottleneck_channels:
            self.downsamples.append(Conv3d(Conv3dSpec(chans[3], cfg.bottleneck_channels, 2, 2, 0), rng, dtype))

    def forward(self, x: Tensor) -> list[Tensor]:
        """Stage outputs at 1/2 .. 1/16, plus the 1/32 bottleneck input if configured."""
        feats = []
        h = self.patch_embed(x)
        for i, stage in enumerate(self.stages):
            h = stage(h)
            feats.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        if len(self.downsamples) == 4:
            feats.append(h)
        return feats


def downsample(model: "UXNet", x: Tensor, stage: int) -> Tensor:
    """Stride-2 k=2 conv after ``stage`` (0-based); stage 3 feeds the bottleneck."""
    if any(e % 2 for e in x.shape[2:]):
        raise F.ShapeError(f"downsample needs even extents, got {x.shape[2:]}")
    return model.encoder.downsamples[stage](x)


# ---------------------------------------------------------------------------
# Decoder + full network
# ---------------------------------------------------------------------------

class DecoderLevel(Module):
    def __init__(self, level: int, enc_ch: int, deep_ch: int, width: int, rng: Rng, dtype=np.float32):
        self._level = level  # output resolution is 1 / 2**level
        self.skip = ResBlock(enc_ch, width, rng, dtype)
        self.up = ConvTranspose3d(Conv3dSpec(deep_ch, width, 2, 2, 0), rng, dtype)
        self.fuse = ResBlock(2 * width, width, rng, dtype)

    def forward(self, deep: Tensor, feat: Tensor) -> Tensor:
        return self.fuse(concat_channels(self.up(deep), self.skip(feat)))


class UXNet(Module):
    def __init__(self, cfg: UXNetConfig, rng: Rng, dtype=np.float32):
        cfg.validate()
        self.config = cfg
        self._dtype = np.dtype(dtype)
        chans = cfg.stage_channels
        widths = cfg.decoder_widths
        self.encoder = Encoder(cfg, rng, dtype)
        if cfg.bottleneck_channels:
            self.seed = ResBlock(cfg.bottleneck_channels, cfg.bottleneck_out, rng, dtype)
            deep, top = cfg.bottleneck_out, 4
        else:
            self.seed = ResBlock(chans[3], widths[4], rng, dtype)
            deep, top = widths[4], 3
        levels = []
        for s in range(top, 0, -1):
            levels.append(DecoderLevel(s, chans[s - 1], deep, widths[s], rng, dtype))
            deep = widths[s]
        # deepest first: levels[0] is the coarsest decoder level
        self.levels = levels
        r0 = cfg.input_skip_width
        self.input_skip = ResBlock(cfg.in_channels, r0, rng, dtype)
        self.up0 = ConvTranspose3d(Conv3dSpec(deep, widths[0], 2, 2, 0), rng, dtype)
        self.fuse0 = ResBlock(widths[0] + r0, widths[0], rng, dtype)
        self.head = Conv3d(Conv3dSpec(widths[0], cfg.num_classes, 1), rng, dtype)
        if cfg.deep_supervision:
            # one aux head per intermediate level at 1/2, 1/4, 1/8
            self.aux_heads = [Conv3d(Conv3dSpec(widths[s], cfg.num_classes, 1), rng, dtype) for s in (1, 2, 3)]
        else:
            self.aux_heads = []

    @property
    def dtype(self):
        return self._dtype

    def check_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise F.ShapeError(f"expected (N, {cfg.in_channels}, H, W, D) input, got {x.shape}")
        if any(e % cfg.divisor for e in x.shape[2:]):
            raise F.ShapeError(f"spatial extents {x.shape[2:]} must be divisible by {cfg.divisor}")

    def patch_embed(self, x: Tensor) -> Tensor:
        if any(e % 2 for e in x.shape[2:]):
            raise F.ShapeError(f"patch embedding needs even extents, got {x.shape[2:]}")
        return self.encoder.patch_embed(x)

    def encode(self, x: Tensor) -> list[Tensor]:
        self.check_input(x)
        return self.encoder(x)

    def forward(self, x: Tensor):
        feats = self.encode(x)
        cfg = self.config
        if cfg.bottleneck_channels:
            d = self.seed(feats[4])
            skips = feats[3::-1]
        else:
            d = self.seed(feats[3])
            skips = feats[2::-1]
        outs = {}
        for lvl, feat in zip(self.levels, skips):
            d = lvl(d, feat)
            outs[lvl._level] = d
        d = self.fuse0(concat_channels(self.up0(d), self.input_skip(x)))
        logits = self.head(d)
        if not cfg.deep_supervision:
            return logits
        aux = []
        for s, head in zip((1, 2, 3), self.aux_heads):
            aux.append(upsample_nearest(head(outs[s]), 2**s))
        return [logits, *aux]


def build(config: UXNetConfig, rng: Rng | int = 0, dtype=np.float32) -> UXNet:
    """Construct a model; conv weights ~ truncated normal(0.02), biases 0, norms (1, 0)."""
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    model = UXNet(config, rng, dtype)
    list(model.named_parameters())  # assigns hierarchical names
    return model


def infer_probs(model: UXNet, x: Tensor) -> np.ndarray:
    """Softmax probabilities of the main head, without graph recording."""
    with no_grad():
        out = model(x)
        logits = out[0] if isinstance(out, list) else out
        return softmax_channels(logits).data


def encoder_block_count(model: UXNet) -> int:
    return sum(len(s.blocks) for s in model.encoder.stages)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"UXCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _manifest(arrays: list[tuple[str, np.ndarray]], start: int) -> tuple[list[dict], int]:
    entries, off = [], start
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": off})
        off += arr.nbytes
    return entries, off


def write_checkpoint(path, config: dict, params: list[tuple[str, np.ndarray]],
                     sections: dict[str, list[tuple[str, np.ndarray]]] | None = None,
                     meta: dict | None = None) -> None:
    """UXCK layout: magic, u32 version, u64 header length, JSON header, raw buffers.

    Offsets in the manifest are relative to the start of the buffer area.
    """
    header = {"config": config, "meta": meta or {}}
    header["params"], off = _manifest(params, 0)
    ordered = list(params)
    header["sections"] = {}
    for key, arrays in (sections or {}).items():
        header["sections"][key], off = _manifest(arrays, off)
        ordered.extend(arrays)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(blob)) + blob)
        for _, arr in ordered:
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_checkpoint(path) -> dict:
    """Parse a UXCK file into ``{config, meta, params, sections}`` with arrays materialized."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a UXCK checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    body = memoryview(raw)[16 + hlen:]

    def load(entries):
        out = {}
        for e in entries:
            dt = np.dtype(e["dtype"]).newbyteorder("<")
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            end = e["offset"] + count * dt.itemsize
            if end > len(body):
                raise CheckpointError(f"{path}: truncated data for {e['name']}")
            arr = np.frombuffer(body, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
            out[e["name"]] = arr.astype(np.dtype(e["dtype"]))
        return out

    result = {"config": header["config"], "meta": header.get("meta", {}), "params": load(header["params"])}
    result["sections"] = {k: load(v) for k, v in header.get("sections", {}).items()}
    return result


def save_weights(model: UXNet, path, sections=None, meta=None) -> None:
    params = [(n, p.data) for n, p in model.named_parameters()]
    write_checkpoint(path, model.config.to_dict(), params, sections, meta)


def assign_weights(model: UXNet, arrays: dict[str, np.ndarray]) -> None:
    """Copy ``arrays`` into the model after checking names and shapes; all-or-nothing."""
    named = dict(model.named_parameters())
    missing = sorted(set(named) - set(arrays))
    extra = sorted(set(arrays) - set(named))
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch; missing={missing[:10]} extra={extra[:10]}"
                              + (f" (+{len(missing) + len(extra) - 20} more)" if len(missing) + len(extra) > 20 else ""))
    bad = [n for n, p in named.items() if tuple(arrays[n].shape) != p.shape]
    if bad:
        raise CheckpointError(f"parameter shape mismatch for {bad[:10]}")
    for n, p in named.items():
        p.data = arrays[n].astype(p.dtype, copy=True)


def load_weights(model: UXNet, path) -> dict:
    ck = read_checkpoint(path)
    assign_weights(model, ck["params"])
    return ck


def load_model(path, dtype=np.float32) -> tuple[UXNet, dict]:
    ck = read_checkpoint(path)
    model = build(UXNetConfig.from_dict(ck["config"]), Rng(0), dtype)
    assign_weights(model, ck["params"])
    return model, ck
