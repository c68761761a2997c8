"""Command-line entry point: train, enhance, eval, valuemap, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import Config, ConfigError, load_config, override
from .core.tensor import NumericError, Tensor, no_grad
from .imageio import ImageFormatError, read_image, to_float, to_uint8, write_image
from .metrics import metrics
from .net import N_STAGES, STAGE_NAMES, UIENet, build_unet
from .scan import argsort_desc, argsort_reversed
from .train import TrainingAborted, serial_reductions, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

VARIANTS: dict[str, dict] = {
    "full": {},
    "scan-only": {"mixer": "scan"},
    "conv-only": {"mixer": "conv"},
    "no-cfb": {"cfb": False},
    "static-conv": {"dynamic_conv": False},
    "four-way": {"scan_order": "four_way"},
    "reversed": {"scan_order": "reversed"},
    "k1": {"k": 1},
    "k2": {"k": 2},
    "k3": {"k": 3},
    "guide-a": {"guidance": "a"},
    "guide-b": {"guidance": "b"},
    "guide-c": {"guidance": "c"},
    "guide-d": {"guidance": "d"},
}
COMPARISON_FILE = "comparison.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _echo(cfg: Config) -> None:
    print(f"# seed = {cfg.seed}")
    print("# resolved config")
    for line in cfg.resolved().to_text().splitlines():
        print(f"#   {line}")


def _load_cfg(path: str | None, seed: int | None = None, prior: str | None = None) -> Config:
    cfg = load_config(path) if path else Config()
    values = {}
    if seed is not None:
        values["seed"] = seed
    if prior is not None:
        values["prior"] = prior
    return override(cfg, values) if values else cfg


def load_model(ckpt_dir) -> tuple[UIENet, Config]:
    """Network in eval mode with checkpoint weights; optimizer state is ignored."""
    ckpt = load_checkpoint(ckpt_dir)
    cfg = ckpt.config
    model = build_unet(cfg.net_config(), cfg.seed, cfg.np_dtype)
    model.load_state_dict(ckpt.model_state())
    return model.eval(), cfg


def pad_to_multiple(img: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad a (3, H, W) image on the bottom/right to multiples of ``multiple``."""
    h, w = img.shape[1:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    return img, (h, w)


def enhance_array(model: UIENet, img: np.ndarray, dtype) -> np.ndarray:
    """Inference on one (3, H, W) image in [0, 1]; no prior is constructed or consulted."""
    padded, (h, w) = pad_to_multiple(img, model.multiple)
    with no_grad():
        out, _ = model(Tensor(padded[None].astype(dtype)))
    return out.data[0, :, :h, :w].astype(np.float64)


# -- commands -------------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = _load_cfg(args.config, args.seed, args.prior)
    _echo(cfg)
    model_params = build_unet(cfg.net_config(), cfg.seed, cfg.np_dtype).num_parameters()
    print(f"# parameters = {model_params}")
    try:
        result = train(cfg, args.out, resume=args.resume)
    except TrainingAborted as exc:
        print(f"error: {exc}; last good checkpoint kept in {args.out}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {result.steps} iterations -> {result.out_dir}")
    _print_eval(result.eval_metrics, result.input_metrics)
    return EXIT_OK


def _print_eval(model_m: dict, input_m: dict) -> None:
    if model_m:
        print("held-out  " + "  ".join(f"{k}={v:.4f}" for k, v in model_m.items()))
        print("degraded  " + "  ".join(f"{k}={v:.4f}" for k, v in input_m.items()))


def cmd_enhance(args) -> int:
    model, cfg = load_model(args.ckpt)
    _echo(cfg)
    img = to_float(read_image(args.input))
    with serial_reductions():
        start = time.perf_counter()
        out = enhance_array(model, img, cfg.np_dtype)
        elapsed = time.perf_counter() - start
    write_image(args.out, to_uint8(out))
    print(f"{args.input}: {img.shape[2]}x{img.shape[1]} enhanced in {elapsed:.3f}s -> {args.out}")
    return EXIT_OK


def find_pairs(directory) -> tuple[list[tuple[str, Path, Path]], list[Path]]:
    """Sorted ``{name}.in.ppm`` / ``{name}.ref.ppm`` pairs plus the unmatched files."""
    directory = Path(directory)
    ins = {p.name[:-len(".in.ppm")]: p for p in directory.glob("*.in.ppm")}
    refs = {p.name[:-len(".ref.ppm")]: p for p in directory.glob("*.ref.ppm")}
    pairs = [(n, ins[n], refs[n]) for n in sorted(ins.keys() & refs.keys())]
    orphans = sorted([ins[n] for n in ins.keys() - refs.keys()] + [refs[n] for n in refs.keys() - ins.keys()])
    return pairs, orphans


def cmd_eval(args) -> int:
    model, cfg = load_model(args.ckpt)
    _echo(cfg)
    if not Path(args.pairs).is_dir():
        raise ConfigError(f"pairs directory {args.pairs} does not exist")
    pairs, orphans = find_pairs(args.pairs)
    for path in orphans:
        print(f"warning: skipping unmatched file {path}", file=sys.stderr)
    if not pairs:
        print(f"error: no '<name>.in.ppm' / '<name>.ref.ppm' pairs in {args.pairs}", file=sys.stderr)
        return EXIT_USAGE
    rows = []
    print(f"{'name':<24}{'psnr':>10}{'ssim':>10}{'mse':>12}{'uciqe':>10}")
    with serial_reductions():
        for name, p_in, p_ref in pairs:
            # score the 8-bit image enhance would write, not the float activations
            out = to_float(to_uint8(enhance_array(model, to_float(read_image(p_in)), cfg.np_dtype)))
            m = metrics(out, to_float(read_image(p_ref)))
            rows.append(m)
            print(f"{name:<24}{m['psnr']:>10.4f}{m['ssim']:>10.4f}{m['mse']:>12.4f}{m['uciqe']:>10.4f}")
            print("METRIC " + json.dumps({"name": name, **m}, sort_keys=True))
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    print(f"{'mean':<24}{mean['psnr']:>10.4f}{mean['ssim']:>10.4f}{mean['mse']:>12.4f}{mean['uciqe']:>10.4f}")
    print("METRIC " + json.dumps({"name": "mean", **mean}, sort_keys=True))
    print(f"warnings = {len(orphans)}")
    return EXIT_OK


def normalize_map(value: np.ndarray) -> np.ndarray:
    """Min-max scale to 8 bits; a constant map becomes uniform 128."""
    lo, hi = float(value.min()), float(value.max())
    if hi - lo <= 0:
        return np.full(value.shape, 128, dtype=np.uint8)
    return np.round((value - lo) / (hi - lo) * 255.0).astype(np.uint8)


def cmd_valuemap(args) -> int:
    model, cfg = load_model(args.ckpt)
    _echo(cfg)
    if not 0 <= args.stage < N_STAGES:
        raise ConfigError(f"stage {args.stage} out of range 0..{N_STAGES - 1}")
    img = to_float(read_image(args.input))
    with serial_reductions():
        enhance_array(model, img, cfg.np_dtype)
    maps = model.value_maps()
    if args.stage not in maps:
        raise ConfigError(f"stage {args.stage} ({STAGE_NAMES[args.stage]}) has no value-ordered scan "
                          f"under this config")
    value = np.asarray(maps[args.stage])[0]
    write_image(args.out, normalize_map(value))
    order = argsort_reversed(value.reshape(-1)) if cfg.scan_order == "reversed" else argsort_desc(value.reshape(-1))
    count = max(1, math.ceil(0.01 * value.size))
    sidecar = Path(str(args.out) + ".idx.txt")
    sidecar.write_text(f"# stage {args.stage} ({STAGE_NAMES[args.stage]}) extent {value.shape[0]}x{value.shape[1]}"
                       f" first {count} of {value.size} scan positions (flat raster index)\n"
                       + "\n".join(str(int(i)) for i in order.forward[:count]) + "\n")
    print(f"stage {args.stage} value map {value.shape[0]}x{value.shape[1]} -> {args.out} (+ {sidecar.name})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.variant not in VARIANTS:
        print(f"error: unknown variant {args.variant!r}; valid: {', '.join(VARIANTS)}", file=sys.stderr)
        return EXIT_USAGE
    cfg = override(_load_cfg(args.config, args.seed), VARIANTS[args.variant])
    _echo(cfg)
    out = Path(args.out)
    run_dir = out / args.variant
    try:
        result = train(cfg, run_dir)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _print_eval(result.eval_metrics, result.input_metrics)
    table = out / COMPARISON_FILE
    if not table.exists():
        table.write_text("variant psnr ssim mse uciqe params\n")
    m = result.eval_metrics
    with open(table, "a") as fh:
        fh.write(f"{args.variant} {m['psnr']:.4f} {m['ssim']:.4f} {m['mse']:.4f} {m['uciqe']:.4f} "
                 f"{result.params}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vrs-uie", description="Value-reordered scanning image enhancement.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on seeded synthetic pairs")
    p.add_argument("--config", help="key = value config file (defaults if omitted)")
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--prior", help="'auto', a VRST prior file, or a comma list with one entry per stage")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one PPM image")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--in", dest="input", required=True, help="input P6 image")
    p.add_argument("--out", required=True, help="output P6 image")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="metrics over a directory of <name>.in.ppm / <name>.ref.ppm pairs")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--pairs", required=True, help="directory of image pairs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("valuemap", help="export one stage's value map as PGM")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--in", dest="input", required=True, help="input P6 image")
    p.add_argument("--stage", type=int, required=True, help=f"stage index 0..{N_STAGES - 1}")
    p.add_argument("--out", required=True, help="output P5 image; '<out>.idx.txt' gets the scan head")
    p.set_defaults(func=cmd_valuemap)

    p = sub.add_parser("ablate", help="train one ablation variant and append to comparison.txt")
    p.add_argument("--variant", required=True, help=f"one of: {', '.join(VARIANTS)}")
    p.add_argument("--config", help="base config file")
    p.add_argument("--out", required=True, help="directory holding variant runs and comparison.txt")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"error: {exc}{key}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ImageFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
