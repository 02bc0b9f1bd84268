"""End-to-end acceptance checks, one test (or a few) per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints a
PASS/FAIL line per criterion.  Criteria 5 and 6 train two small networks and
take most of an hour on one CPU core.
"""

import itertools
import json
import time

import numpy as np
import pytest

from oracles import conv3d_direct, encoder_layers, percentile_linear, receptive_field_oracle, uxnet_params
from uxnet3d import analysis as A
from uxnet3d import gradcheck
from uxnet3d import rng as rngmod
from uxnet3d import tensor as T
from uxnet3d.cli import main
from uxnet3d.data import AugmentParams, augment, clip_intensity, percentile_normalize
from uxnet3d.functional import Conv3dSpec
from uxnet3d import functional as F
from uxnet3d.inference import sliding_window_infer
from uxnet3d.model import UXBlock, UXNetConfig, build, infer_probs
from uxnet3d.rng import Rng
from uxnet3d.volumes import LabelVolume, Volume, load_nifti, load_raw, save_nifti, save_raw

pytestmark = pytest.mark.acceptance


def _rel(got, want):
    return abs(got - want) / abs(want)


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

REQUIRED_OPS = {"elementwise", "reduce", "softmax_channels", "conv3d", "conv3d_depthwise_multiplier",
                "conv_transpose3d", "layer_norm_channel", "instance_norm", "gelu", "leaky_relu", "dice_loss",
                "uxnet_block"}


@pytest.mark.criterion(1)
def test_c1_gradient_suite(record_property):
    t0 = time.perf_counter()
    results = gradcheck.run("all")
    elapsed = time.perf_counter() - t0
    worst = max(r.worst for r in results)
    record_property("detail", f"{len(results)} cases, worst rel err {worst:.2e}, {elapsed:.0f}s")
    counts = {op: sum(r.op == op for r in results) for op in REQUIRED_OPS}
    assert min(counts.values()) >= 3, counts
    conv_cases = {r.case for r in results if r.op == "conv3d"}
    assert {"standard", "depthwise", "grouped"} <= conv_cases
    assert all(r.passed for r in results)
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 2. parameter deltas
# ---------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_c2_parameter_deltas(record_property):
    p = {k: A.count_params(cfg).total_params
         for k, (_, cfg) in zip((3, 5, 7, 9, 11, 13), A.kernel_sweep(UXNetConfig()))}
    base = A.count_params(UXNetConfig()).total_params
    standard = A.count_params(UXNetConfig(conv_mode="STANDARD")).total_params - base
    mlp = A.count_params(UXNetConfig(scaling_mode="MLP")).total_params - base
    deltas = {(3, 7): 0.5e6, (7, 9): 0.6e6, (9, 11): 0.8e6, (11, 13): 1.3e6}
    errs = {f"{a}->{b}": _rel(p[b] - p[a], want) for (a, b), want in deltas.items()}
    record_property("detail", "deltas " + ", ".join(f"{k} {p[int(k.split('->')[1])] - p[int(k.split('->')[0])]:,}"
                                                     for k in errs)
                    + f"; STANDARD-DW {standard:,}; MLP-DCS {mlp:,}")
    assert all(e <= 0.10 for e in errs.values()), errs
    assert _rel(standard, 133.9e6) <= 0.10
    assert _rel(mlp, 3.3e6) <= 0.15
    # closed forms agree exactly with the counter
    for kw in ({}, {"conv_mode": "STANDARD"}, {"scaling_mode": "MLP"}, {"scaling_mode": "NONE"}):
        cfg = UXNetConfig(**kw)
        assert A.count_params(cfg).total_params == uxnet_params(
            cfg.stage_channels, cfg.stage_depths, cfg.kernel_size, cfg.scaling_mode, cfg.conv_mode)
    for c in (48, 96, 192, 384):
        assert A.dwc_params(c, 7) == c * 343 + c
        assert A.dcs_params(c) == 13 * c
        assert A.mlp_params(c) == 8 * c * c + 5 * c


# ---------------------------------------------------------------------------
# 3. absolute costs
# ---------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_c3_absolute_costs(record_property):
    default = A.count_flops(UXNetConfig(num_classes=5), (1, 1, 96, 96, 96))
    optimized = A.count_flops(UXNetConfig.optimized(num_classes=5), (1, 1, 96, 96, 96))
    record_property("detail", f"default {default.total_params / 1e6:.2f}M {default.flops_2mac / 1e9:.1f}G; "
                              f"optimized {optimized.total_params / 1e6:.2f}M {optimized.flops_2mac / 1e9:.1f}G "
                              f"({A.FLOP_CONVENTION.split(';')[0]})")
    assert _rel(default.total_params, 53.0e6) <= 0.10
    assert _rel(default.flops_2mac, 639.4e9) <= 0.20
    assert _rel(optimized.total_params, 32.1e6) <= 0.10
    assert _rel(optimized.flops_2mac, 536.8e9) <= 0.20
    # the report states its convention and breaks the count down by group
    assert "2 x MACs" in default.convention
    assert sum(default.groups.values()) == default.total_params
    assert "decoder" in default.groups and "seed" in default.groups


# ---------------------------------------------------------------------------
# 4. structural invariants
# ---------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_c4_structural_invariants(record_property):
    cfg = UXNetConfig()
    blk = UXBlock(48, cfg, Rng(0))
    for _, prm in blk.named_parameters():
        prm.data = np.zeros_like(prm.data)
    z = np.random.default_rng(0).standard_normal((1, 48, 6, 6, 6)).astype(np.float32)
    with T.no_grad():
        assert np.array_equal(blk(T.Tensor(z)).data, z)

    m = build(cfg, 0)
    x = T.Tensor(np.random.default_rng(1).standard_normal((1, 1, 96, 96, 96)).astype(np.float32))
    with T.no_grad():
        ladder = [f.shape[1:] for f in m.encode(x)]
    assert ladder == [(48, 48, 48, 48), (96, 24, 24, 24), (192, 12, 12, 12), (384, 6, 6, 6), (768, 3, 3, 3)]

    small = build(UXNetConfig(stage_channels=(6, 12, 24, 48), bottleneck_channels=96), 0)
    probs = infer_probs(small, T.Tensor(np.random.default_rng(2).standard_normal((1, 1, 64, 32, 32)).astype(np.float32)))
    err = float(np.abs(probs.sum(axis=1) - 1).max())
    record_property("detail", f"ladder {[s[0] for s in ladder]}, logits {probs.shape}, softmax err {err:.1e}")
    assert probs.shape == (1, 5, 64, 32, 32)
    assert err <= 1e-6


# ---------------------------------------------------------------------------
# 5 and 6. desk-scale training
# ---------------------------------------------------------------------------

TRAIN_STEPS = 500
# the patch embed stays at k=7 in both runs, as in the kernel sweep
TRAIN_CONFIG = {"model": UXNetConfig.tiny(patch_kernel_size=7).to_dict(),
                "train": {"steps": TRAIN_STEPS, "eval_interval": 100}}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Synthetic data plus one k=7 and one k=3 tiny run with matched seeds."""
    root = tmp_path_factory.mktemp("accept")
    data = root / "data"
    assert main(["synth", "--classes", "3", "--volumes", "20", "--extent", "64", "--seed", "7",
                 "--out", str(data)]) == 0
    cfg = root / "train.json"
    cfg.write_text(json.dumps(TRAIN_CONFIG))
    runs = {}
    for k in (7, 3):
        out = root / f"k{k}"
        t0 = time.perf_counter()
        code = main(["--config", str(cfg), "--seed", "1", "train", "--kernel", str(k),
                     "--manifest", str(data / "manifest.json"), "--out", str(out)])
        minutes = (time.perf_counter() - t0) / 60
        assert code == 0
        last = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
        runs[k] = {"dice": last["mean_dice"], "minutes": minutes, "step": last["step"]}
    return runs


@pytest.mark.slow
@pytest.mark.criterion(5)
def test_c5_desk_scale_dice(trained, record_property):
    r = trained[7]
    record_property("detail", f"k=7 val foreground Dice {r['dice']:.3f} after {r['step']} steps in "
                              f"{r['minutes']:.1f} min")
    assert r["step"] <= 500
    assert r["dice"] >= 0.80
    assert r["minutes"] <= 30


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_c6_kernel_direction(trained, record_property):
    d7, d3 = trained[7]["dice"], trained[3]["dice"]
    record_property("detail", f"k=7 {d7:.3f} vs k=3 {d3:.3f}")
    assert d7 >= d3 - 0.02


# ---------------------------------------------------------------------------
# 7. exhaustive conv oracle
# ---------------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_c7_conv_oracle_exhaustive(record_property):
    rng = np.random.default_rng(0)
    settings = [(2, 2, 1), (2, 4, 2), (3, 3, 3), (4, 2, 2), (2, 6, 2), (4, 4, 4)]
    geoms = [((1, 1, 1), (1, 1, 1), (0, 0, 0)), ((3, 3, 3), (1, 1, 1), (1, 1, 1)),
             ((2, 2, 2), (2, 2, 2), (0, 0, 0)), ((3, 2, 1), (2, 1, 2), (1, 0, 1))]
    checked = 0
    for (cin, cout, groups), extents, (kernel, stride, padding) in itertools.product(
            settings, itertools.product(range(1, 7), repeat=3), geoms):
        if any((e + 2 * p - k) // s + 1 < 1 for e, p, k, s in zip(extents, padding, kernel, stride)):
            continue
        # integer data keeps every float64 partial sum exact
        x = rng.integers(-3, 4, (1, cin, *extents)).astype(np.float64)
        w = rng.integers(-3, 4, (cout, cin // groups, *kernel)).astype(np.float64)
        b = rng.integers(-3, 4, cout).astype(np.float64)
        spec = Conv3dSpec(cin, cout, kernel, stride, padding, groups)
        got = F.conv3d(T.Tensor(x), spec, T.Tensor(w), T.Tensor(b)).data
        assert np.array_equal(got, conv3d_direct(x, w, b, stride, padding, groups)), (cin, cout, groups, extents)
        checked += 1
    record_property("detail", f"{checked} shape/group/geometry combinations, all bitwise equal")


# ---------------------------------------------------------------------------
# 8. determinism
# ---------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_c8_deterministic_runs_and_resume(tmp_path, record_property):
    data = tmp_path / "data"
    assert main(["synth", "--volumes", "6", "--extent", "32", "--seed", "3", "--out", str(data)]) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"steps": 50, "eval_interval": 25, "checkpoint_interval": 25}}))

    def run(out, *extra):
        return main(["--config", str(cfg), "--deterministic", "--seed", "1", "train", "--variant", "tiny",
                     "--manifest", str(data / "manifest.json"), "--out", str(out), *extra])

    try:
        assert run(tmp_path / "a") == 0
        assert run(tmp_path / "b") == 0
        log_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        same = log_a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
        resumed = tmp_path / "r"
        resumed.mkdir()
        (resumed / "metrics.jsonl").write_bytes(b"".join(log_a.splitlines(keepends=True)[:25]))
        assert run(resumed, "--resume", str(tmp_path / "a" / "step000025.uxck")) == 0
        tail_a = log_a.splitlines()[25:]
        tail_r = (resumed / "metrics.jsonl").read_bytes().splitlines()[25:]
    finally:
        rngmod.set_deterministic(False)
    record_property("detail", f"two 50-step logs identical: {same}; resumed steps 26-50 identical: "
                              f"{tail_a == tail_r}")
    assert len(log_a.splitlines()) == 50
    assert same
    assert len(tail_a) == 25 and tail_a == tail_r


# ---------------------------------------------------------------------------
# 9. pipeline contracts
# ---------------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_c9_pipeline_contracts(tmp_path, record_property):
    model = build(UXNetConfig.tiny(stage_channels=(4, 8, 16, 32), patch_size=(16, 16, 16)), 0)
    vol = np.random.default_rng(0).standard_normal((16, 16, 16)).astype(np.float32)
    sw_err = float(np.abs(sliding_window_infer(model, vol) - infer_probs(model, T.Tensor(vol[None, None]))[0]).max())
    assert sw_err <= 1e-6

    assert clip_intensity(np.array([300.0, -200.0, 0.0])).tolist() == [250.0, -175.0, 0.0]
    ramp = np.arange(101, dtype=np.float64).reshape(101, 1, 1)
    assert (percentile_linear(ramp, 1), percentile_linear(ramp, 99)) == (1.0, 99.0)
    assert percentile_normalize(ramp)[50, 0, 0] == pytest.approx(49 / 98)
    x = np.random.default_rng(1).gamma(2.0, size=(7, 9, 11))
    lo, hi = percentile_linear(x, 1), percentile_linear(x, 99)
    assert np.allclose(percentile_normalize(x), np.clip((x - lo) / (hi - lo), 0, 1), atol=1e-6)

    img = np.random.default_rng(2).standard_normal((8, 8, 8)).astype(np.float32)
    lab = (img > 0).astype(np.int32)
    ident = AugmentParams(rotation_deg=0, scale=0, offset=0, p_rotate=1, p_scale=1, p_offset=1)
    a, b = augment(img, lab, ident, Rng(0))
    assert np.array_equal(a, img) and np.array_equal(b, lab)

    data = np.random.default_rng(3).standard_normal((5, 6, 7)).astype(np.float32)
    save_raw(Volume(data, (1.0, 2.0, 0.5)), tmp_path / "v.uxv")
    back = load_raw(tmp_path / "v.uxv")
    save_raw(LabelVolume(lab, 2), tmp_path / "l.uxv")
    save_nifti(Volume(data, (1.0, 2.0, 0.5)), tmp_path / "v.nii")
    nii = load_nifti(tmp_path / "v.nii")
    exact = (np.array_equal(back.data, data) and np.array_equal(load_raw(tmp_path / "l.uxv").data, lab)
             and np.array_equal(nii.data, data) and tuple(nii.spacing) == (1.0, 2.0, 0.5))
    record_property("detail", f"sliding window vs direct {sw_err:.1e}; raw/NIfTI round-trip exact: {exact}")
    assert exact


# ---------------------------------------------------------------------------
# 10. receptive field
# ---------------------------------------------------------------------------

@pytest.mark.criterion(10)
def test_c10_receptive_field(record_property):
    exits = {}
    for name, cfg in A.kernel_sweep(UXNetConfig()):
        trace = A.receptive_field(cfg)
        assert [(e.rf, e.jump) for e in trace] == receptive_field_oracle(encoder_layers(cfg.kernel_size))
        exits[cfg.kernel_size] = A.rf_exit(cfg)
    stage1 = [e.rf for e in A.receptive_field(UXNetConfig())[:3]]
    record_property("detail", f"k=7 stage 1 {stage1}; exits {exits}")
    assert stage1 == [7, 19, 31]
