"""Static cost analysis: parameters, FLOPs and receptive fields.

Everything here works from a :class:`UXNetConfig` alone.  The layer plan
mirrors :class:`uxnet3d.model.UXNet` parameter for parameter (same names, same
shapes), so large variants can be costed without allocating them.

FLOP convention: a conv costs ``out_voxels * C_out * C_in / groups * k^3``
multiply-accumulates; a transpose conv costs the same with input voxels.
Reported FLOPs are ``2 * MACs``; the plain MAC count is reported alongside.
Normalization, activation and residual additions are itemized per element and
kept out of the headline total.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .model import EXPANSION, UXNet, UXNetConfig

FLOP_CONVENTION = "FLOPs = 2 x MACs (1 x MACs co-reported); convs only, elementwise ops itemized"
REFERENCE_INPUT = (1, 1, 96, 96, 96)

# per-element cost constants for the itemized (non-headline) ops
ELEMENTWISE_COST = {"norm": 5, "gelu": 8, "leaky_relu": 1, "add": 1}


@dataclass
class Layer:
    name: str
    kind: str  # conv | conv_transpose | norm | gelu | leaky_relu | add | concat
    params: dict = field(default_factory=dict)  # parameter name -> shape
    macs: int = 0
    elements: int = 0
    out_shape: tuple = ()
    kernel: int = 1
    stride: int = 1

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.params.values())


@dataclass
class RFEntry:
    layer: str
    kernel: int
    stride: int
    rf: int
    jump: int


@dataclass
class CostReport:
    groups: dict
    total_params: int
    input_shape: tuple | None = None
    flops_2mac: int | None = None
    flops_1mac: int | None = None
    elementwise: dict = field(default_factory=dict)
    rf_trace: list = field(default_factory=list)
    convention: str = FLOP_CONVENTION

    @property
    def total_flops(self) -> int | None:
        return self.flops_2mac

    def summary(self) -> str:
        lines = [f"params: {self.total_params:,} ({self.total_params / 1e6:.2f}M)"]
        if self.flops_2mac is not None:
            lines.append(f"FLOPs @ {self.input_shape}: {self.flops_2mac / 1e9:.1f}G "
                         f"(MACs {self.flops_1mac / 1e9:.1f}G)  [{self.convention}]")
        for k, v in self.groups.items():
            lines.append(f"  {k:<12} {v:>12,}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def dwc_params(c: int, k: int) -> int:
    return c * k**3 + c


def standard_dwc_params(c: int, k: int) -> int:
    return c * c * k**3 + c


def dcs_params(c: int) -> int:
    # expansion weights + expansion bias + compression weights + compression bias
    return 4 * c + 4 * c + 4 * c + c


def mlp_params(c: int) -> int:
    return (c * 4 * c + 4 * c) + (4 * c * c + c)


# ---------------------------------------------------------------------------
# Layer plan
# ---------------------------------------------------------------------------

class _Planner:
    def __init__(self, n: int):
        self.n = n
        self.layers: list[Layer] = []

    def conv(self, name, cin, cout, sp, k=1, s=1, p=0, groups=1, bias=True) -> tuple:
        out = tuple((e + 2 * p - k) // s + 1 for e in sp)
        params = {f"{name}.weight": (cout, cin // groups, k, k, k)}
        if bias:
            params[f"{name}.bias"] = (cout,)
        macs = self.n * int(np.prod(out)) * cout * (cin // groups) * k**3
        self.layers.append(Layer(name, "conv", params, macs, 0, (self.n, cout, *out), k, s))
        return out

    def conv_t(self, name, cin, cout, sp, k=2, s=2) -> tuple:
        out = tuple((e - 1) * s + k for e in sp)
        params = {f"{name}.weight": (cin, cout, k, k, k), f"{name}.bias": (cout,)}
        macs = self.n * int(np.prod(sp)) * cin * cout * k**3
        self.layers.append(Layer(name, "conv_transpose", params, macs, 0, (self.n, cout, *out), k, s))
        return out

    def elem(self, name, kind, c, sp, params=None):
        elements = self.n * c * int(np.prod(sp))
        self.layers.append(Layer(name, kind, params or {}, 0, elements, (self.n, c, *sp)))

    def norm(self, name, c, sp):
        self.elem(name, "norm", c, sp, {f"{name}.weight": (c,), f"{name}.bias": (c,)})

    def resblock(self, name, cin, cout, sp):
        self.conv(f"{name}.conv1", cin, cout, sp, 3, 1, 1, bias=False)
        self.norm(f"{name}.norm1", cout, sp)
        self.elem(f"{name}.act1", "leaky_relu", cout, sp)
        self.conv(f"{name}.conv2", cout, cout, sp, 3, 1, 1, bias=False)
        self.norm(f"{name}.norm2", cout, sp)
        if cin != cout:
            self.conv(f"{name}.proj", cin, cout, sp, 1, bias=False)
            self.norm(f"{name}.proj_norm", cout, sp)
        self.elem(f"{name}.add", "add", cout, sp)
        self.elem(f"{name}.act2", "leaky_relu", cout, sp)

    def uxblock(self, name, c, sp, cfg: UXNetConfig):
        k = cfg.kernel_size
        groups = c if cfg.conv_mode == "DEPTHWISE" else 1
        self.norm(f"{name}.norm1", c, sp)
        self.conv(f"{name}.dwc", c, c, sp, k, 1, (k - 1) // 2, groups)
        self.elem(f"{name}.add1", "add", c, sp)
        if cfg.scaling_mode == "NONE":
            return
        self.norm(f"{name}.norm2", c, sp)
        h = EXPANSION * c
        if cfg.scaling_mode == "DCS":
            self.conv(f"{name}.expand", c, h, sp, groups=c)
            self.elem(f"{name}.gelu", "gelu", h, sp)
            self.conv(f"{name}.compress", h, c, sp, groups=c)
        else:
            self.conv(f"{name}.fc1", c, h, sp)
            self.elem(f"{name}.gelu", "gelu", h, sp)
            self.conv(f"{name}.fc2", h, c, sp)
        self.elem(f"{name}.add2", "add", c, sp)


def layer_plan(cfg: UXNetConfig, input_shape=None) -> list[Layer]:
    """Every layer of the network in registration order, with shapes at ``input_shape``."""
    cfg.validate()
    if input_shape is None:
        input_shape = (1, cfg.in_channels, *cfg.patch_size)
    n, _, *sp = input_shape
    sp = tuple(sp)
    if any(e % cfg.divisor for e in sp):
        raise ValueError(f"spatial extents {sp} must be divisible by {cfg.divisor}")
    P = _Planner(n)
    chans, widths = cfg.stage_channels, cfg.decoder_widths
    ke = cfg.embed_kernel
    cur = P.conv("encoder.patch_embed", cfg.in_channels, chans[0], sp, ke, 2, (ke - 1) // 2)
    enc_sp = []
    for i, (c, d) in enumerate(zip(chans, cfg.stage_depths)):
        for b in range(d):
            P.uxblock(f"encoder.stages.{i}.blocks.{b}", c, cur, cfg)
        enc_sp.append(cur)
        if i < 3:
            cur = P.conv(f"encoder.downsamples.{i}", c, chans[i + 1], cur, 2, 2)
    if cfg.bottleneck_channels:
        cur = P.conv("encoder.downsamples.3", chans[3], cfg.bottleneck_channels, cur, 2, 2)
        P.resblock("seed", cfg.bottleneck_channels, cfg.bottleneck_out, cur)
        deep, top = cfg.bottleneck_out, 4
    else:
        P.resblock("seed", chans[3], widths[4], cur)
        deep, top = widths[4], 3
    for i, s in enumerate(range(top, 0, -1)):
        w, fsp = widths[s], enc_sp[s - 1]
        P.resblock(f"levels.{i}.skip", chans[s - 1], w, fsp)
        P.conv_t(f"levels.{i}.up", deep, w, cur)
        cur = fsp
        P.elem(f"levels.{i}.concat", "concat", 2 * w, cur)
        P.resblock(f"levels.{i}.fuse", 2 * w, w, cur)
        deep = w
    r0 = cfg.input_skip_width
    P.resblock("input_skip", cfg.in_channels, r0, sp)
    P.conv_t("up0", deep, widths[0], cur)
    P.elem("concat0", "concat", widths[0] + r0, sp)
    P.resblock("fuse0", widths[0] + r0, widths[0], sp)
    P.conv("head", widths[0], cfg.num_classes, sp)
    if cfg.deep_supervision:
        for j, s in enumerate((1, 2, 3)):
            P.conv(f"aux_heads.{j}", widths[s], cfg.num_classes, enc_sp[s - 1])
    return P.layers


def plan_parameters(cfg: UXNetConfig) -> dict:
    """``name -> shape`` for every parameter, in registration order."""
    out = {}
    for layer in layer_plan(cfg):
        out.update(layer.params)
    return out


def _group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "encoder":
        if parts[1] == "stages":
            return f"stage{int(parts[2]) + 1}"
        return parts[1] if parts[1] != "downsamples" else "downsample"
    if parts[0] == "levels":
        return "decoder"
    if parts[0] in ("input_skip", "up0", "fuse0"):
        return "decoder"
    if parts[0] == "aux_heads":
        return "head"
    return parts[0]


def _grouped(named_counts) -> dict:
    groups: dict[str, int] = {}
    for name, count in named_counts:
        g = _group(name)
        groups[g] = groups.get(g, 0) + count
    return groups


# ---------------------------------------------------------------------------
# Public counters
# ---------------------------------------------------------------------------

def count_params(model_or_config) -> CostReport:
    """Exact parameter count from a built model's registry or from a config's plan."""
    if isinstance(model_or_config, UXNet):
        named = [(n, p.size) for n, p in model_or_config.named_parameters()]
    else:
        named = [(n, int(np.prod(s))) for n, s in plan_parameters(model_or_config).items()]
    return CostReport(groups=_grouped(named), total_params=sum(c for _, c in named))


def count_flops(cfg: UXNetConfig, input_shape=REFERENCE_INPUT) -> CostReport:
    layers = layer_plan(cfg, input_shape)
    named = [(n, int(np.prod(s))) for lay in layers for n, s in lay.params.items()]
    macs = sum(lay.macs for lay in layers)
    elementwise: dict[str, int] = {}
    for lay in layers:
        if lay.kind in ELEMENTWISE_COST:
            elementwise[lay.kind] = elementwise.get(lay.kind, 0) + lay.elements * ELEMENTWISE_COST[lay.kind]
    return CostReport(
        groups=_grouped(named), total_params=sum(c for _, c in named), input_shape=tuple(input_shape),
        flops_2mac=2 * macs, flops_1mac=macs, elementwise=elementwise, rf_trace=receptive_field(cfg),
    )


def flops_by_group(cfg: UXNetConfig, input_shape=REFERENCE_INPUT) -> dict:
    out: dict[str, int] = {}
    for lay in layer_plan(cfg, input_shape):
        if lay.macs:
            g = _group(lay.name)
            out[g] = out.get(g, 0) + 2 * lay.macs
    return out


def receptive_field(cfg: UXNetConfig) -> list[RFEntry]:
    """``r <- r + (k - 1) j``, ``j <- j s`` along the encoder path (1x1x1 convs are no-ops)."""
    cfg.validate()
    r, j = 1, 1
    trace = []

    def step(name, k, s):
        nonlocal r, j
        r += (k - 1) * j
        j *= s
        trace.append(RFEntry(name, k, s, r, j))

    step("encoder.patch_embed", cfg.embed_kernel, 2)
    for i, d in enumerate(cfg.stage_depths):
        for b in range(d):
            step(f"encoder.stages.{i}.blocks.{b}.dwc", cfg.kernel_size, 1)
        if i < 3 or cfg.bottleneck_channels:
            step(f"encoder.downsamples.{i}", 2, 2)
    return trace


def rf_exit(cfg: UXNetConfig) -> int:
    """Receptive field of the deepest encoder feature."""
    return receptive_field(cfg)[-1].rf


# ---------------------------------------------------------------------------
# Ablation tables
# ---------------------------------------------------------------------------

TABLE_FIELDS = ("name", "params", "flops_2mac", "flops_1mac", "rf_exit")


def kernel_sweep(base: UXNetConfig, kernels=(3, 5, 7, 9, 11, 13), pin_embed: int | None = 7) -> list:
    """``(name, config)`` rows varying the block kernel; the patch embed stays at ``pin_embed``."""
    rows = []
    for k in kernels:
        d = base.to_dict()
        d.update(kernel_size=k, patch_kernel_size=pin_embed)
        rows.append((f"kernel={k}x{k}x{k}", UXNetConfig.from_dict(d)))
    return rows


def ablation_rows(configs, input_shape=REFERENCE_INPUT) -> list[dict]:
    rows = []
    for name, cfg in configs:
        try:
            rep = count_flops(cfg, input_shape)
            rows.append({"name": name, "params": rep.total_params, "flops_2mac": rep.flops_2mac,
                         "flops_1mac": rep.flops_1mac, "rf_exit": rf_exit(cfg)})
        except Exception as exc:  # noqa: BLE001 - a bad row must not sink the table
            rows.append({"name": name, "params": None, "flops_2mac": None, "flops_1mac": None,
                         "rf_exit": None, "error": str(exc)})
    return rows


def emit_ablation_table(configs, fmt: str = "markdown", input_shape=REFERENCE_INPUT) -> str:
    """Render one row per ``(name, config)``.  JSON keeps exact integers; text formats use M/G."""
    return render_rows(ablation_rows(configs, input_shape), fmt, input_shape)


def render_rows(rows: list[dict], fmt: str = "markdown", input_shape=REFERENCE_INPUT) -> str:
    if fmt == "json":
        return json.dumps({"convention": FLOP_CONVENTION, "input_shape": list(input_shape), "rows": rows}, indent=2)

    def cells(r):
        if r.get("error"):
            return [r["name"], "error", r["error"], "", ""]
        return [r["name"], f"{r['params'] / 1e6:.1f}", f"{r['flops_2mac'] / 1e9:.1f}",
                f"{r['flops_1mac'] / 1e9:.1f}", str(r["rf_exit"])]

    header = ["name", "params_M", "flops_2mac_G", "flops_1mac_G", "rf_exit"]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(cells(r))
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(cells(r)) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {fmt!r}; use markdown, csv or json")


def parse_ablation_json(text: str) -> list[dict]:
    """Load rows emitted with ``fmt='json'``, checking the row schema."""
    doc = json.loads(text)
    rows = doc["rows"] if isinstance(doc, dict) else doc
    for r in rows:
        missing = [k for k in TABLE_FIELDS if k not in r]
        extra = sorted(set(r) - set(TABLE_FIELDS) - {"error"})
        if missing or extra:
            raise ValueError(f"row {r.get('name')!r}: missing {missing}, unexpected {extra}")
        if not r.get("error"):
            for k in TABLE_FIELDS[1:]:
                if not isinstance(r[k], int) or r[k] < 0:
                    raise ValueError(f"row {r['name']!r}: {k} must be a non-negative integer")
    return rows
