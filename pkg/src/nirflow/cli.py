"""Command-line entry point: ``nirflow {flow,gt,eval,entropy,synth}``.

Exit status is 0 on success, 1 when inputs or options fail validation
(nothing is computed), and 2 when a computation fails.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .evalmetrics import (Report, angle_error, compute_stats, endpoint_error, accumulate_sequence,
                          render_error_map, render_flow, write_report)
from .flowsolver import SolverParams, compute_flow, load_params, parse_mode
from .gtpipeline import GtConfig, joint_entropy, run_gt
from .imagecore import (load_image, load_multispectral, read_flow, write_flow, write_pnm,
                        MultispectralImage)
from .synth import SceneConfig, generate, max_displacement, parse_motion

log = logging.getLogger("nirflow")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2


class ValidationError(Exception):
    pass


class ComputationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_provenance(out: Path, command: str, args: argparse.Namespace, extra: dict,
                      inputs: list) -> None:
    record = {
        "tool": "nirflow",
        "version": __version__,
        "command": command,
        "seed": args.seed,
        "options": {k: v for k, v in sorted(vars(args).items())
                    if k not in ("func",) and not callable(v)},
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
    }
    record.update(extra)
    with open(out / "provenance.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _require_files(paths, what):
    for p in paths:
        if not os.path.isfile(p):
            raise ValidationError(f"{what} file not found: {p}")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {out}: {exc}") from None
    return out


def _read_kv_config(path, section):
    """``key = value`` file, either headerless or with a ``[section]`` block."""
    with open(path) as fh:
        text = fh.read()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not text.lstrip().startswith("["):
        text = f"[{section}]\n" + text
    cp.read_string(text)
    return dict(cp[section]) if cp.has_section(section) else {}


def _solver_params(args) -> SolverParams:
    overrides = {}
    if args.mode is not None:
        overrides.update(parse_mode(args.mode))
    if args.gamma is not None:
        overrides["gamma"] = args.gamma
    if args.theta is not None:
        overrides["theta"] = args.theta
    if args.config:
        _require_files([args.config], "config")
        return load_params(args.config, **overrides)
    return SolverParams(**overrides)


def _gt_config(args) -> GtConfig:
    vals = {}
    if args.config:
        _require_files([args.config], "config")
        kinds = {f.name: f.type for f in fields(GtConfig)}
        for k, raw in _read_kv_config(args.config, "gt").items():
            if k not in kinds:
                continue
            if raw.strip().lower() == "none":
                vals[k] = None
            elif "int" in kinds[k]:
                vals[k] = int(raw)
            else:
                vals[k] = float(raw)
    if args.mp is not None:
        vals["m_p"] = args.mp
    if args.fb_threshold is not None:
        vals["fb_threshold"] = args.fb_threshold
    return GtConfig(**vals)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_flow(args) -> int:
    params = _solver_params(args)
    vis = list(args.visible)
    nir = list(args.nir or [])
    if len(vis) < 2:
        raise ValidationError("need at least two visible frames")
    if nir and len(nir) != len(vis):
        raise ValidationError(f"{len(vis)} visible frames but {len(nir)} NIR frames")
    if params.needs_nir and not nir:
        raise ValidationError(f"mode {params.mode_label} needs --nir frames")
    _require_files(vis + nir, "input")
    frames = []
    for k, vp in enumerate(vis):
        np_ = nir[k] if nir and params.needs_nir else None
        frames.append(load_multispectral(vp, np_))
    shape = (frames[0].height, frames[0].width)
    for f in frames[1:]:
        if (f.height, f.width) != shape:
            raise ValidationError("all frames must share dimensions")
    out = _out_dir(args.out)

    for k in range(len(frames) - 1):
        trace = [] if args.verbose else None
        try:
            flow = compute_flow(frames[k], frames[k + 1], params, trace=trace)
        except Exception as exc:
            raise ComputationError(f"flow for pair {k} failed: {exc}") from exc
        write_flow(flow, out / f"flow_{k:04d}.flo")
        if trace is not None:
            with open(out / f"energy_{k:04d}.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["level", "iteration", "e_visible", "e_nir", "e_smooth", "e_total"])
                for t in trace:
                    e = t.energy
                    wr.writerow([t.level, t.iteration, repr(e.e_visible_weighted),
                                 repr(e.e_nir_weighted), repr(e.e_smooth), repr(e.e_total)])
        log.info("pair %d -> %s", k, out / f"flow_{k:04d}.flo")
    _write_provenance(out, "flow", args, {"solver": params.to_dict()}, vis + nir)
    return EXIT_OK


def cmd_gt(args) -> int:
    cfg = _gt_config(args)
    nir = list(args.nir)
    if len(nir) < 2:
        raise ValidationError("need at least two NIR frames")
    _require_files(nir, "NIR")
    frames = [load_image(p, "nir") for p in nir]
    for f in frames[1:]:
        if f.shape != frames[0].shape:
            raise ValidationError("all NIR frames must share dimensions")
    out = _out_dir(args.out)
    summary = []
    for k in range(len(frames) - 1):
        try:
            res = run_gt(frames[k], frames[k + 1], cfg)
        except Exception as exc:
            raise ComputationError(f"GT for pair {k} failed: {exc}") from exc
        write_flow(res.flow, out / f"gt_{k:04d}.flo")
        write_pnm(out / f"occlusion_{k:04d}.pgm", res.occlusion.astype(np.float64))
        write_pnm(out / f"occlusion_full_{k:04d}.pgm", res.occlusion_full.astype(np.float64))
        summary.append({"pair": k, "invalid_fraction": float(res.occlusion.mean())})
        log.info("pair %d: %.1f%% of GT unknown", k, 100 * res.occlusion.mean())
    _write_provenance(out, "gt", args, {"gt": cfg.to_dict(), "pairs": summary}, nir)
    return EXIT_OK


def cmd_eval(args) -> int:
    gts_paths = list(args.gt)
    _require_files(gts_paths, "GT")
    methods = []
    for entry in args.method:
        name, files = entry[0], entry[1:]
        if not files:
            raise ValidationError(f"method {name!r} has no flow files")
        if len(files) != len(gts_paths):
            raise ValidationError(f"method {name!r}: {len(files)} flow files for "
                                  f"{len(gts_paths)} GT fields")
        _require_files(files, "estimate")
        methods.append((name, files))
    gts = [read_flow(p) for p in gts_paths]
    ests = {name: [read_flow(p) for p in files] for name, files in methods}
    for name, flows in ests.items():
        for k, (g, e) in enumerate(zip(gts, flows)):
            if g.shape != e.shape:
                raise ValidationError(f"method {name!r} frame {k}: {e.width}x{e.height} "
                                      f"vs GT {g.width}x{g.height}")
    out = _out_dir(args.out)
    report = Report(config={"seed": args.seed, "sequence": args.sequence,
                            "error_map_scale": args.scale})
    for name, flows in ests.items():
        ee_stats, ae_stats = [], []
        for k, (g, e) in enumerate(zip(gts, flows)):
            ee = endpoint_error(g, e)
            ae = angle_error(g, e)
            ee_stats.append(compute_stats(ee))
            ae_stats.append(compute_stats(ae))
            write_pnm(out / f"ee_{name}_{k:04d}.pgm", render_error_map(ee, args.scale) / 255.0)
            write_pnm(out / f"flow_{name}_{k:04d}.ppm", render_flow(e) / 255.0)
        report.add(name, args.sequence, accumulate_sequence(ee_stats, ae_stats))
    write_report(report, out / "report.csv", out / "report.json")
    if len(methods) > 1:
        print("rank  method  avg_ee")
        for rank, (m, score) in enumerate(report.ranking(), 1):
            print(f"{rank:4d}  {m}  {score:.6f}")
    _write_provenance(out, "eval", args, {}, gts_paths + [f for _, fs in methods for f in fs])
    return EXIT_OK


CHANNELS = ("R", "G", "B", "Gray", "NIR")


def _channels(img: MultispectralImage) -> dict:
    vis = img.visible
    if vis.shape[2] == 3:
        ch = {"R": vis[..., 0], "G": vis[..., 1], "B": vis[..., 2],
              "Gray": vis @ np.array([0.299, 0.587, 0.114])}
    else:
        ch = {"Gray": vis[..., 0]}
    if img.nir is not None:
        ch["NIR"] = img.nir
    return ch


def cmd_entropy(args) -> int:
    _require_files([args.visible] + ([args.nir] if args.nir else []), "input")
    img = load_multispectral(args.visible, args.nir)
    chans = _channels(img)
    if args.pair:
        pairs = []
        for p in args.pair:
            a, _, b = p.partition(",")
            if a not in chans or b not in chans:
                raise ValidationError(f"pair {p!r} names a missing channel; have {sorted(chans)}")
            pairs.append((a, b))
    else:
        missing = [c for c in CHANNELS if c not in chans]
        if missing:
            raise ValidationError(f"input lacks channels {missing}")
        pairs = list(itertools.combinations(CHANNELS, 2))
    out = _out_dir(args.out)
    with open(out / "entropy.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["pair", "bins", "n_patches", "seed", "H_bits"])
        for a, b in pairs:
            h = joint_entropy(chans[a], chans[b], args.patches, args.patch, args.bins, args.seed)
            wr.writerow([f"{a}-{b}", args.bins, args.patches, args.seed, repr(h)])
    _write_provenance(out, "entropy", args, {}, [args.visible] + ([args.nir] if args.nir else []))
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        motion = parse_motion(args.motion)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    cfg = SceneConfig(width=args.width, height=args.height, motion=motion, n_frames=args.frames,
                      layout=args.layout, speckle_contrast=args.speckle, speckle_sigma=args.speckle_sigma,
                      rgb_blur=args.blur, shadow=args.shadow, noise=args.noise, seed=args.seed)
    if args.frames < 2:
        raise ValidationError("need at least two frames")
    try:
        seq = generate(cfg)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    mp = args.mp if args.mp is not None else 40
    if max_displacement(seq) > mp:
        raise ValidationError(f"warp magnitude {max_displacement(seq):.2f} px exceeds m_p={mp}")
    out = _out_dir(args.out)
    for k, fr in enumerate(seq.frames):
        write_pnm(out / f"frame_{k:04d}_rgb.ppm", fr.visible, bits=16)
        write_pnm(out / f"frame_{k:04d}_nir.pgm", fr.nir, bits=16)
    for k, fl in enumerate(seq.flows):
        write_flow(fl, out / f"gt_{k:04d}.flo")
    _write_provenance(out, "synth", args, {"max_displacement": max_displacement(seq)}, [])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value parameter file")
    common.add_argument("--mode", help="da | fixed:LAMBDA | rgb | nir")
    common.add_argument("--gamma", type=float, help="smoothness weight")
    common.add_argument("--theta", type=float, help="gradient-constancy weight")
    common.add_argument("--mp", type=int, help="max expected motion / search half-window (px)")
    common.add_argument("--fb-threshold", type=float, help="forward-backward intensity threshold")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--verbose", "-v", action="store_true")

    p = _Parser(prog="nirflow", description="RGB-NIR optical flow, GT construction and evaluation")
    p.add_argument("--version", action="version", version=f"nirflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("flow", parents=[common], help="estimate flow for consecutive frame pairs")
    f.add_argument("--visible", nargs="+", required=True, help="visible frames (PGM/PPM) in order")
    f.add_argument("--nir", nargs="+", help="NIR frames (PGM), aligned with --visible")
    f.set_defaults(func=cmd_flow)

    g = sub.add_parser("gt", parents=[common], help="build GT flow from NIR frames")
    g.add_argument("--nir", nargs="+", required=True)
    g.set_defaults(func=cmd_gt)

    e = sub.add_parser("eval", parents=[common], help="score flow estimates against GT")
    e.add_argument("--gt", nargs="+", required=True, help="GT flow files in frame order")
    e.add_argument("--method", nargs="+", action="append", required=True, metavar="NAME FILE",
                   help="method name followed by its flow files; repeat per method")
    e.add_argument("--sequence", default="seq")
    e.add_argument("--scale", type=float, default=2.0, help="EE mapped to white in error maps")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("entropy", parents=[common], help="pairwise joint entropy of channels")
    h.add_argument("--visible", required=True)
    h.add_argument("--nir")
    h.add_argument("--pair", action="append", help="explicit pair A,B (repeatable)")
    h.add_argument("--bins", type=int, default=16)
    h.add_argument("--patches", type=int, default=20000)
    h.add_argument("--patch", type=int, default=3)
    h.set_defaults(func=cmd_entropy)

    s = sub.add_parser("synth", parents=[common], help="synthetic RGB-NIR frames with exact GT")
    s.add_argument("--motion", default="translation:2,0",
                   help="translation:U,V + rotation:DEG + bump:AU,AV[,CX,CY,SIGMA] | identity")
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=192)
    s.add_argument("--frames", type=int, default=2)
    s.add_argument("--layout", choices=("full", "halves"), default="full")
    s.add_argument("--speckle", type=float, default=0.6, help="NIR speckle contrast (0 disables)")
    s.add_argument("--speckle-sigma", type=float, default=1.0)
    s.add_argument("--blur", type=float, default=0.0, help="visible-only Gaussian blur sigma")
    s.add_argument("--shadow", type=float, default=0.0, help="visible-only shadow depth in [0, 1)")
    s.add_argument("--noise", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ComputationError as exc:
        print(f"nirflow {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ValidationError, ValueError, OSError) as exc:
        print(f"nirflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # computation failure
        print(f"nirflow {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
