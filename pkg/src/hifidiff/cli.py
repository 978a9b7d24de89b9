"""Command-line front end.

Exit codes: 0 success, 1 numerical fault, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, load_run_config
from .data import (
    crop_to_ratio,
    denormalize_volume,
    downsample_volume,
    export_slice_pgm,
    make_phantom_volume,
    normalize_volume,
    pad_to_multiple,
    read_volume,
    trilinear_interpolate,
    write_volume,
)
from .errors import HiFiDiffError, NumericalFault
from .metrics import SCORING_NOTE, MetricsReport, evaluate, format_table
from .sampler import super_resolve_volume
from .schedule import make_linear_schedule
from .trainer import load_checkpoint, train_loop

log = logging.getLogger("hifidiff")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(HiFiDiffError):
    pass


def _parse_size(text: str) -> tuple:
    try:
        size = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be D,H,W integers, got {text!r}")
    if len(size) != 3:
        raise argparse.ArgumentTypeError(f"size must have three entries, got {text!r}")
    return size


def _header(cfg: RunConfig, command: str) -> None:
    log.info("hifidiff %s %s, root seed %d", __version__, command, cfg.seed)
    for line in cfg.dump().splitlines():
        log.info("  %s", line)


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, {"count": args.count, "size": args.size, "seed": args.seed})
    _header(cfg, "gen-data")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stride = 2 ** (cfg.levels - 1)
    D, H, W = cfg.size
    entries = []
    for i in range(cfg.count):
        seed = cfg.seed + i
        vol, pad = pad_to_multiple(make_phantom_volume(seed, D, H, W), stride)
        name = f"phantom_{i:04d}.isdv"
        write_volume(out / name, vol)
        entries.append({"path": name, "seed": seed, "shape": list(vol.shape), "padding_hw": list(pad)})
    manifest = {"root_seed": cfg.seed, "size": [D, H, W], "stride": stride, "volumes": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    log.info("wrote %d volumes to %s", cfg.count, out)
    return EXIT_OK


def _load_dataset(data_dir: Path) -> list:
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    manifest = data_dir / MANIFEST
    if manifest.exists():
        paths = [data_dir / e["path"] for e in json.loads(manifest.read_text())["volumes"]]
    else:
        paths = sorted(data_dir.glob("*.isdv"))
    if not paths:
        raise UsageError(f"no volumes found in {data_dir}")
    return [normalize_volume(read_volume(p)) for p in paths]


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, {"iterations": args.iterations, "seed": args.seed})
    _header(cfg, "train")
    dataset = _load_dataset(Path(args.data))
    model_config = cfg.model_config(ablation=args.ablate)
    log_path = args.log or f"{args.out}.log"
    Path(log_path).write_text(
        "".join(f"# {line}\n" for line in cfg.dump().splitlines())
        + f"# ablation = {args.ablate}\n# config_hash = {model_config.hash()}\n",
        encoding="utf-8",
    )
    state = None
    if args.resume:
        state = load_checkpoint(args.resume, expected=model_config)
    torch.set_num_threads(max(1, cfg.jobs))
    state = train_loop(cfg.train_config(), dataset, model_config, args.out, log_path, state=state)
    log.info("finished at step %d, checkpoint %s", state.step, args.out)
    return EXIT_OK


def _reslice_pgms(vol, prefix: Path) -> None:
    """Axial- and coronal-style cuts through the slice axis, for visual inspection."""
    v = vol.voxels
    export_slice_pgm(v[:, v.shape[1] // 2, :], f"{prefix}_cut_h.pgm")
    export_slice_pgm(v[:, :, v.shape[2] // 2], f"{prefix}_cut_w.pgm")


def cmd_sample(args) -> int:
    cfg = load_run_config(
        args.config,
        {"sampler": args.sampler, "steps": args.steps, "seed": args.seed, "jobs": args.jobs},
    )
    if cfg.sampler == "ddpm" and args.steps is not None:
        log.warning("--steps is ignored with --sampler ddpm; DDPM always runs all T=%d steps", cfg.T)
    _header(cfg, "sample")
    if args.ratio < 2:
        raise UsageError(f"--ratio must be >= 2, got {args.ratio}")
    state = load_checkpoint(args.ckpt)
    model = state.model.eval()
    tc = state.train_config
    sched = make_linear_schedule(tc.T, tc.beta_start, tc.beta_end)
    src = read_volume(args.inp)
    norm = src if src.range_tag == "normalized" else normalize_volume(src)
    sr = super_resolve_volume(norm, args.ratio, model, sched, cfg.sampler_config())
    if src.range_tag == "raw":
        sr = denormalize_volume(sr, norm.source_range)
        # the normalize/denormalize round trip is not bit-exact; restore acquired slices
        sr.voxels[:: args.ratio] = src.voxels
    write_volume(args.out, sr)
    if args.pgm_dir:
        Path(args.pgm_dir).mkdir(parents=True, exist_ok=True)
        shown = sr if sr.range_tag == "normalized" else normalize_volume(sr)
        _reslice_pgms(shown, Path(args.pgm_dir) / Path(args.out).stem)
    log.info("wrote %s with %d slices (ratio %d)", args.out, sr.depth, args.ratio)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = read_volume(args.pred)
    gt = read_volume(args.gt)
    R = args.ratio
    if pred.depth != gt.depth:
        gt = crop_to_ratio(gt, R)
    if pred.shape != gt.shape:
        raise UsageError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    reports = [evaluate(pred, gt, args.label, R)]
    if args.baseline_interp:
        interp = trilinear_interpolate(downsample_volume(gt, R), R)
        reports.append(evaluate(interp, gt, "interpolation", R))
    lines = [f"# {SCORING_NOTE}", MetricsReport.HEADER] + [r.row() for r in reports]
    print("\n".join(lines))
    print(format_table(reports), file=sys.stderr)
    if args.report:
        with open(args.report, "a", encoding="utf-8") as fh:
            fh.write("\n".join(r.row() for r in reports) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hifidiff", description="Arbitrary-ratio slice synthesis with conditional diffusion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic phantom volumes")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--size", type=_parse_size, help="D,H,W")
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a directory of volumes")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--ablate", action="store_true", help="concatenation conditioning instead of HiFE")
    t.add_argument("--log", help="loss log (default: <out>.log)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="super-resolve a low-resolution volume")
    s.add_argument("--config")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--ratio", type=int, required=True)
    s.add_argument("--sampler", choices=["ddim", "ddpm"])
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--pgm-dir", help="also write re-sliced PGM previews here")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="PSNR/SSIM of a prediction against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--label", default="hifi-diff")
    e.add_argument("--ratio", type=int, required=True)
    e.add_argument("--baseline-interp", action="store_true")
    e.add_argument("--report", help="append rows to this file")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except NumericalFault as exc:
        log.error("numerical fault: %s", exc)
        return EXIT_NUMERICAL
    except (HiFiDiffError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
