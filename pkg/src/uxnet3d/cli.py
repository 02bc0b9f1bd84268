"""Command-line entry point: ``uxnet3d {synth,train,eval,infer,analyze,gradcheck}``.

Every subcommand reads one strict JSON config (``--config``) whose sections
mirror the library dataclasses; flags override individual fields.  Exit codes:
0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, gradcheck
from .data import DatasetManifest, synth_generate
from .inference import predict_labels
from .model import CheckpointError, ConfigError, UXNetConfig, build, load_model, load_weights
from .rng import set_deterministic
from .training import TrainConfig, TrainingError, evaluate, train
from .volumes import LabelVolume, VolumeError, load_nifti, load_raw, save_raw

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

SYNTH_DEFAULTS = {"num_volumes": 20, "extent": 64, "num_classes": 3, "shapes_per_class": 2, "noise": 0.05}
DATA_DEFAULTS = {"manifest": None, "out_dir": "runs/uxnet3d", "synth": SYNTH_DEFAULTS}


class UsageError(Exception):
    pass


def default_config() -> dict:
    return {
        "model": UXNetConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "data": json.loads(json.dumps(DATA_DEFAULTS)),
        "seed": 0,
        "deterministic": False,
    }


def _strict_merge(base: dict, override: dict, where: str) -> dict:
    unknown = sorted(set(override) - set(base))
    if unknown:
        raise UsageError(f"unknown key(s) in {where}: {unknown}")
    out = dict(base)
    for k, v in override.items():
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "model":
            out[k] = _strict_merge(base[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


def parse_config(doc: dict) -> dict:
    """Merge ``doc`` onto the defaults, rejecting unknown keys at every level."""
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    cfg = default_config()
    cfg = _strict_merge(cfg, {k: v for k, v in doc.items() if k != "model"}, "config")
    if "model" in doc:
        try:
            UXNetConfig.from_dict(doc["model"])  # strict key check only
        except (ConfigError, TypeError) as exc:
            raise UsageError(str(exc)) from None
        cfg["model"] = {**cfg["model"], **doc["model"]}
    return cfg


def model_config(cfg: dict) -> UXNetConfig:
    try:
        return UXNetConfig.from_dict(cfg["model"]).validate()
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"]).validate()
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser) -> None:
    # SUPPRESS lets the flags appear before or after the subcommand
    p.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="strict JSON config")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS,
                   help="single-threaded BLAS and timing-free logs")
    p.add_argument("--print-config", action="store_true", default=argparse.SUPPRESS,
                   help="print the merged config as JSON and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uxnet3d", description="large-kernel volumetric segmentation toolkit")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _global_flags(p)
    p.add_argument("--out", help="output directory (default: data.out_dir/synth)")
    p.add_argument("--classes", type=int)
    p.add_argument("--volumes", type=int)
    p.add_argument("--extent", type=int)
    p.add_argument("--shapes-per-class", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", help="train a model")
    _global_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--kernel", type=int, help="override model.kernel_size")
    p.add_argument("--variant", choices=["default", "optimized", "tiny"])
    p.add_argument("--resume", help="checkpoint written by an earlier run")

    p = sub.add_parser("eval", help="Dice on a dataset split")
    _global_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--overlap", type=float, default=0.5)

    p = sub.add_parser("infer", help="predict a label volume")
    _global_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".uxv raw volume or .nii")
    p.add_argument("--output", required=True, help="output .uxv label volume")
    p.add_argument("--overlap", type=float, default=0.5)

    p = sub.add_parser("analyze", help="params / FLOPs / receptive-field table")
    _global_flags(p)
    p.add_argument("configs", nargs="*", help="extra JSON configs, one row each")
    p.add_argument("--sweep-kernel", help="comma-separated kernel sizes, e.g. 3,5,7,9,11,13")
    p.add_argument("--no-pin-embed", action="store_true", help="let the patch embed follow the swept kernel")
    p.add_argument("--variant", choices=["default", "optimized", "both"])
    p.add_argument("--format", default="markdown", choices=["markdown", "csv", "json"])
    p.add_argument("--input-shape", default="1,1,96,96,96")
    p.add_argument("--output", help="write the table here instead of stdout")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _global_flags(p)
    p.add_argument("scope", nargs="?", default="all", help=f"'all' or one of: {', '.join(gradcheck.SUITE)}")
    return parser


def _variant(name: str, base: dict) -> dict:
    if name == "optimized":
        return UXNetConfig.optimized(**{k: v for k, v in base.items()
                                        if k not in ("stage_depths", "bottleneck_channels")}).to_dict()
    if name == "tiny":
        return UXNetConfig.tiny().to_dict()
    return UXNetConfig().to_dict()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    s = cfg["data"]["synth"]
    out = args.out or str(Path(cfg["data"]["out_dir"]) / "synth")
    try:
        path = synth_generate(out, s["num_volumes"], s["extent"], s["num_classes"], s["shapes_per_class"],
                              s["noise"], cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(path)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    manifest_path = cfg["data"]["manifest"]
    if not manifest_path:
        raise UsageError("no manifest given (--manifest or data.manifest)")
    manifest = DatasetManifest.load(manifest_path)
    model = build(mcfg, cfg["seed"])
    out = args.out or cfg["data"]["out_dir"]
    result = train(model, manifest, tcfg, out, seed=cfg["seed"], resume=args.resume)
    print(json.dumps(result))
    return EXIT_OK


def _checkpoint_model(path, cfg, explicit_model: bool):
    """Model from the checkpoint's own config, or from ``--config`` when it sets one.

    The second form is how a config/checkpoint mismatch surfaces: the weight
    assignment reports every missing or unexpected parameter name.
    """
    if not explicit_model:
        return load_model(path)[0]
    model = build(model_config(cfg), cfg["seed"])
    load_weights(model, path)
    return model


def cmd_eval(args, cfg) -> int:
    manifest_path = cfg["data"]["manifest"]
    if not manifest_path:
        raise UsageError("no manifest given (--manifest or data.manifest)")
    manifest = DatasetManifest.load(manifest_path)
    model = _checkpoint_model(args.checkpoint, cfg, args.explicit_model)
    pairs = manifest.load_pairs(args.split)
    result = evaluate(model, pairs, manifest.num_classes, args.overlap)
    print(json.dumps(result))
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    model = _checkpoint_model(args.checkpoint, cfg, args.explicit_model)
    src = Path(args.input)
    vol = load_nifti(src) if src.suffix == ".nii" else load_raw(src)
    if isinstance(vol, LabelVolume):
        raise UsageError(f"{src} is a label volume, expected an image")
    pred = predict_labels(model, vol.data, overlap=args.overlap)
    save_raw(LabelVolume(pred, model.config.num_classes, vol.spacing), args.output)
    print(args.output)
    return EXIT_OK


def cmd_analyze(args, cfg) -> int:
    try:
        shape = tuple(int(v) for v in args.input_shape.split(","))
    except ValueError:
        raise UsageError(f"bad --input-shape {args.input_shape!r}") from None
    if len(shape) != 5:
        raise UsageError("--input-shape needs 5 comma-separated extents (N,C,H,W,D)")
    rows = []
    base_dict = cfg["model"]
    if args.variant in ("default", "both"):
        rows.append(("default", UXNetConfig.from_dict(_variant("default", base_dict))))
    if args.variant in ("optimized", "both"):
        rows.append(("optimized", UXNetConfig.from_dict(_variant("optimized", base_dict))))
    for path in args.configs:
        try:
            doc = parse_config(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"{path}: {exc}") from None
        try:
            rows.append((Path(path).stem, UXNetConfig.from_dict(doc["model"])))
        except (ConfigError, TypeError) as exc:
            raise UsageError(f"{path}: {exc}") from None
    if args.sweep_kernel:
        try:
            kernels = [int(k) for k in args.sweep_kernel.split(",")]
        except ValueError:
            raise UsageError(f"bad --sweep-kernel {args.sweep_kernel!r}") from None
        base = UXNetConfig.from_dict(base_dict)
        rows.extend(analysis.kernel_sweep(base, kernels, None if args.no_pin_embed else 7))
    if not rows:
        rows.append(("config", UXNetConfig.from_dict(base_dict)))
    results = analysis.ablation_rows(rows, shape)
    table = analysis.render_rows(results, args.format, shape)
    if args.output:
        Path(args.output).write_text(table)
    else:
        sys.stdout.write(table if table.endswith("\n") else table + "\n")
    if args.format != "json":
        print(f"# {analysis.FLOP_CONVENTION}; input {shape}")
    failed = [r["name"] for r in results if r.get("error")]
    for name in failed:
        print(f"uxnet3d: row {name!r} failed", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    try:
        results = gradcheck.run(args.scope, seed=cfg["seed"])
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    for op, worst in gradcheck.worst_by_op(results).items():
        status = "ok" if worst < gradcheck.TOLERANCE else "FAIL"
        print(f"{op:<30} worst rel err {worst:.3e}  {status}")
    bad = [r for r in results if not r.passed]
    for r in bad:
        print(f"  failed: {r.op} [{r.case}] rel err {r.worst:.3e}")
    print(f"{len(results) - len(bad)}/{len(results)} cases passed (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_RUNTIME if bad else EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "analyze": cmd_analyze, "gradcheck": cmd_gradcheck}


def _apply_overrides(args, cfg: dict) -> dict:
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg["seed"] = seed
    if getattr(args, "deterministic", False):
        cfg["deterministic"] = True
    cmd = args.command
    data, train_sec, synth = cfg["data"], cfg["train"], cfg["data"]["synth"]
    if cmd == "synth":
        for flag, key in (("classes", "num_classes"), ("volumes", "num_volumes"), ("extent", "extent"),
                          ("shapes_per_class", "shapes_per_class"), ("noise", "noise")):
            if getattr(args, flag) is not None:
                synth[key] = getattr(args, flag)
    if cmd in ("train", "eval") and getattr(args, "manifest", None):
        data["manifest"] = args.manifest
    if cmd == "train":
        if args.variant:
            cfg["model"] = _variant(args.variant, cfg["model"])
        if args.kernel is not None:
            cfg["model"]["kernel_size"] = args.kernel
        for flag, key in (("steps", "steps"), ("eval_interval", "eval_interval"),
                          ("checkpoint_interval", "checkpoint_interval")):
            if getattr(args, flag) is not None:
                train_sec[key] = getattr(args, flag)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        doc = {}
        if getattr(args, "config", None):
            try:
                doc = json.loads(Path(args.config).read_text())
            except OSError as exc:
                raise UsageError(f"cannot read config: {exc}") from None
            except json.JSONDecodeError as exc:
                raise UsageError(f"config is not valid JSON: {exc}") from None
        cfg = _apply_overrides(args, parse_config(doc))
        explicit_model = "model" in doc
        if getattr(args, "print_config", False):
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if cfg["deterministic"]:
            set_deterministic(True)
        args.explicit_model = explicit_model
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"uxnet3d: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, CheckpointError, VolumeError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"uxnet3d: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
