"""Command-line pipelines: synth, distort, undistort, pretrain, adapt, eval,
export-attn.

Every subcommand is deterministic given its inputs (all randomness comes
from explicit seeds), prints machine-parseable ``key=value`` lines to
stdout, and keeps human prose on stderr.  Exit codes: 0 success, 2
config/parse error, 3 I/O error, 4 numeric-domain error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model, load_tokens
from .datagen import SceneDataset, SceneSpec, default_pinhole, generate_split
from .errors import (
    DimensionMismatchError,
    EmptyMaskError,
    InvalidConfigError,
    NonMonotoneError,
    OutOfRangeError,
    SamplingExhaustedError,
    ShapeMismatchError,
)
from .geometry import FisheyeCalibration, PinholeIntrinsics
from .images import read_depth, read_ppm, write_depth, write_pgm, write_ppm
from .metrics import evaluate
from .model import forward
from .objective import (
    TrainConfig,
    default_pretrain_config,
    eval_distortion_seed,
    pretrain_fmde,
    train_tokens,
)
from .remap import TO_FISHEYE, TO_PERSPECTIVE, apply_warp, apply_warp_depth, build_warp_field, coverage_loss

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (
    json.JSONDecodeError,
    KeyError,
    ValueError,
    TypeError,
    FileNotFoundError,
    IsADirectoryError,
    DimensionMismatchError,
    ShapeMismatchError,
    InvalidConfigError,
    EmptyMaskError,
)
_NUMERIC_ERRORS = (NonMonotoneError, OutOfRangeError, SamplingExhaustedError)


def _load_json(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_synth(args: argparse.Namespace) -> int:
    spec_dict = _load_json(args.spec)
    pin = (
        PinholeIntrinsics.from_json_dict(spec_dict["pin"])
        if "pin" in spec_dict
        else default_pinhole()
    )
    spec = SceneSpec(
        seed=int(spec_dict.get("seed", 0)),
        pin=pin,
        depth_range=tuple(spec_dict.get("depth_range", (0.6, 9.0))),
        sphere_count=tuple(spec_dict.get("sphere_count", (3, 8))),
        plane_count=tuple(spec_dict.get("plane_count", (1, 2))),
        texture_freq=tuple(spec_dict.get("texture_freq", (1.1, 1.7))),
    )
    n_train = int(spec_dict["n_train"])
    n_val = int(spec_dict["n_val"])
    n_test = int(spec_dict["n_test"])
    manifest = generate_split(spec, args.out, n_train, n_val, n_test)
    print(f"manifest={Path(args.out) / 'manifest.json'}")
    print(f"scenes={len(manifest['scenes'])}")
    return EXIT_OK


def _warp_command(args: argparse.Namespace, direction: str) -> int:
    pin = PinholeIntrinsics.from_json_dict(_load_json(args.pin))
    fe = FisheyeCalibration.from_json_dict(_load_json(args.fe))
    img = read_ppm(args.image)
    warp = build_warp_field(direction, pin, fe)
    out_img, mask = apply_warp(img, warp, "bilinear")
    out_path = Path(args.out)
    write_ppm(out_img, out_path)
    write_pgm((mask * np.uint8(255)).astype(np.uint8), out_path.with_suffix(".mask.pgm"))
    if args.depth is not None:
        depth = read_depth(args.depth)
        out_depth = apply_warp_depth(depth, warp)
        write_depth(out_depth, out_path.with_name(out_path.stem + "_depth.pfm"))
    print(f"coverage_loss={coverage_loss(warp)}")
    return EXIT_OK


def cmd_distort(args: argparse.Namespace) -> int:
    return _warp_command(args, TO_FISHEYE)


def cmd_undistort(args: argparse.Namespace) -> int:
    return _warp_command(args, TO_PERSPECTIVE)


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = TrainConfig.from_json_dict(_load_json(args.config), base=default_pretrain_config())
    dataset = SceneDataset(args.data)
    _say(f"pretraining for {cfg.iterations} iterations ...")
    model, log = pretrain_fmde(dataset, cfg, cfg.seed, out_path=args.out)
    with open(str(args.out) + ".val.json") as f:
        val = json.load(f)
    print(f"checkpoint={args.out}")
    print(f"final_loss={log[-1][1]}")
    print(f"val_rmse={val['rmse']}")
    print(f"val_delta1={val['delta1']}")
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    cfg = TrainConfig.from_json_dict(_load_json(args.config))
    model = load_model(args.model)
    if cfg.model != model.cfg:
        cfg = TrainConfig.from_json_dict(
            {"model": model.cfg.to_json_dict()}, base=cfg
        )
    dataset = SceneDataset(args.data)
    _say(f"adapting {cfg.token_mode} tokens for {cfg.iterations} iterations ...")
    tokens, log = train_tokens(model, dataset, cfg, cfg.seed, out_path=args.out)
    print(f"tokens={args.out}")
    print(f"final_loss={log[-1][1]}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    tokens = load_tokens(args.tokens) if args.tokens else None
    dataset = SceneDataset(args.data)
    records = dataset.split(args.split)
    if args.mode == "fisheye":
        seeds = [eval_distortion_seed(args.seed, i) for i in range(len(records))]
        report = evaluate(
            model, tokens, dataset, split=args.split,
            distortion_seeds=seeds, errmap_dir=Path(args.out).parent,
        )
    else:
        report = evaluate(
            model, None, dataset, split=args.split, errmap_dir=Path(args.out).parent
        )
    report.write_json(args.out)
    report.write_csv(Path(args.out).with_suffix(".csv"))
    print(f"report={args.out}")
    print(f"rmse={report.rmse}")
    print(f"delta1={report.delta1}")
    print(f"n_pixels={report.n_pixels}")
    return EXIT_OK


def cmd_export_attn(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    tokens = load_tokens(args.tokens)
    img = read_ppm(args.image)
    _, record = forward(model, img, tokens, record_attention=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = record.grid
    for l, layer in enumerate(record.layers):
        amap = layer.token_to_patch().reshape(g, g)
        lo, hi = float(amap.min()), float(amap.max())
        norm = (amap - lo) / (hi - lo) if hi > lo else np.zeros_like(amap)
        write_pgm(norm, out / f"attn_layer_{l}.pgm")
        with open(out / f"attn_layer_{l}.json", "w") as f:
            json.dump({"min": lo, "max": hi}, f, indent=2, sort_keys=True)
            f.write("\n")
    print(f"layers={len(record.layers)}")
    print(f"out_dir={out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caltok",
        description="Fisheye adaptation of a frozen depth transformer "
        "via trainable calibration tokens.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a procedural scene dataset")
    p.add_argument("--spec", required=True, help="dataset spec JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("distort", help="warp a perspective image to fisheye")
    p.add_argument("--image", required=True, help="input PPM")
    p.add_argument("--pin", required=True, help="pinhole intrinsics JSON")
    p.add_argument("--fe", required=True, help="fisheye calibration JSON")
    p.add_argument("--out", required=True, help="output PPM")
    p.add_argument("--depth", help="optional input depth PFM to warp alongside")
    p.set_defaults(func=cmd_distort)

    p = sub.add_parser("undistort", help="warp a fisheye image back to perspective")
    p.add_argument("--image", required=True, help="input PPM")
    p.add_argument("--fe", required=True, help="fisheye calibration JSON")
    p.add_argument("--pin", required=True, help="pinhole intrinsics JSON")
    p.add_argument("--out", required=True, help="output PPM")
    p.add_argument("--depth", help="optional input depth PFM to warp alongside")
    p.set_defaults(func=cmd_undistort)

    p = sub.add_parser("pretrain", help="train the backbone on perspective scenes")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="train calibration tokens on a frozen backbone")
    p.add_argument("--model", required=True, help="backbone checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--out", required=True, help="output token checkpoint path")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--model", required=True, help="backbone checkpoint")
    p.add_argument("--tokens", help="token checkpoint (fisheye mode)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mode", choices=("perspective", "fisheye"), required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0, help="held-out distortion seed base")
    p.add_argument("--out", required=True, help="output report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-attn", help="write per-layer token attention maps")
    p.add_argument("--model", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_attn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as exc:
        _say(f"error: {exc}")
        return EXIT_NUMERIC
    except _CONFIG_ERRORS as exc:
        _say(f"error: {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        _say(f"i/o error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
