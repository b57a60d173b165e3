"""Command-line interface (``dodfatlas <command>``).

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .atlas import ncc_matrix, roi_trends
from .dwi import scalar_maps
from .errors import AtlasError, FormatError, NumericalError, ValidationError
from .lme import eval_atlas_at_age, fit_atlas_field
from .phantom import PhantomSpec, crossing_phantom, elbow_phantom, tube_phantom, write_phantom
from .pipeline import PipelineConfig, StageFailure, configure_logging, pipeline_run, session_field
from .qball import QBallConfig, fit_sh_volume, signal_field_to_odf
from .reorient import apply_warp
from .tracking import TrackingParams, whole_brain_track

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
SCALAR_NAMES = ("fa", "md", "rd", "ad", "baseline")

# Flags shared by every command; None means "not given" so a config file can fill it.
COMMON_DEFAULTS = {"threads": 1, "seed": 0, "lmax": 6, "lam": 0.006, "max_angle": 30.0}


def _common(p):
    g = p.add_argument_group("common options")
    g.add_argument("--manifest", help="JSON dataset manifest")
    g.add_argument("--config", help="JSON config; keys mirror the long flags")
    g.add_argument("--mask", help="mask volume (nonzero = inside)")
    g.add_argument("--out", help="output file or directory")
    g.add_argument("--threads", type=int, help="worker threads (default 1)")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--lmax", type=int, help="maximal SH order (default 6)")
    g.add_argument("--lambda", dest="lam", type=float, help="Laplace-Beltrami weight (default 0.006)")
    g.add_argument("--max-angle", dest="max_angle", type=float, help="tracking angle threshold in degrees (default 30)")
    g.add_argument("-v", "--verbose", action="store_true")


def _dwi_args(p, required=True):
    p.add_argument("--dwi", required=required, help="4-D DWI volume")
    p.add_argument("--bval", required=required, help="FSL bval file")
    p.add_argument("--bvec", required=required, help="FSL bvec file")


def build_parser():
    parser = argparse.ArgumentParser(prog="dodfatlas", description="Longitudinal dODF atlas tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _common(p)
        return p

    p = cmd("phantom", "write a synthetic dataset with known ground truth")
    p.add_argument("--kind", choices=("longitudinal", "tube", "elbow", "crossing"), default="longitudinal")
    p.add_argument("--subjects", type=int, default=14)
    p.add_argument("--size", type=int, default=32, help="grid edge length in voxels")
    p.add_argument("--noise", type=float, default=0.02, help="noise sd relative to background S0")
    p.add_argument("--rician", action="store_true")
    p.add_argument("--warp-degrees", type=float, default=0.0, help="max per-session rotation about z")

    p = cmd("fit-sh", "fit signal SH coefficients to a DWI volume")
    _dwi_args(p)

    p = cmd("odf", "compute dODF coefficients from a DWI volume or a signal SH field")
    _dwi_args(p, required=False)
    p.add_argument("--sh", help="signal SH field to transform instead of a DWI volume")

    p = cmd("scalars", "tensor scalar maps (fa, md, rd, ad, baseline)")
    _dwi_args(p)

    p = cmd("warp-apply", "resample and reorient an SH field or DWI volume")
    p.add_argument("--sh", help="SH field to warp")
    _dwi_args(p, required=False)
    p.add_argument("--warp", required=True, help="5-D displacement field on the output grid")
    p.add_argument("--no-reorient", action="store_true")

    cmd("lme-fit", "fit the longitudinal atlas from a manifest")

    p = cmd("atlas-eval", "population or subject dODF field at an age")
    p.add_argument("--atlas", required=True)
    p.add_argument("--age", type=float, required=True, help="months")
    p.add_argument("--subject")
    p.add_argument("--allow-extrapolation", action="store_true")

    p = cmd("gfa-map", "GFA volume of an ODF field or of the atlas at an age")
    p.add_argument("--sh")
    p.add_argument("--atlas")
    p.add_argument("--age", type=float)

    p = cmd("r2-map", "marginal Frobenius R^2 volume of an atlas")
    p.add_argument("--atlas", required=True)

    p = cmd("track", "deterministic whole-field tractography")
    p.add_argument("--sh", required=True, help="ODF field")
    p.add_argument("--gfa", help="GFA volume (default: computed from the field)")
    p.add_argument("--step", type=float, default=1.0, help="step size in mm")
    p.add_argument("--gfa-threshold", type=float, default=0.1)
    p.add_argument("--min-length", type=float, default=10.0, help="mm")
    p.add_argument("--max-length", type=float, default=300.0, help="mm")
    p.add_argument("--seeds-per-voxel", type=int, default=1)
    p.add_argument("--text", help="also write the plain-text export here")

    p = cmd("roi-trends", "population and subject GFA trends per ROI as CSV")
    p.add_argument("--atlas", required=True)
    p.add_argument("--labels", required=True, help="integer label volume")
    p.add_argument("--t-start", type=float, default=3.0)
    p.add_argument("--t-stop", type=float, default=36.0)
    p.add_argument("--t-step", type=float, default=1.0)
    p.add_argument("--no-subjects", action="store_true", help="omit per-subject lines")

    p = cmd("ncc-matrix", "pairwise NCC of scalar volumes")
    p.add_argument("--volume", action="append", default=[], metavar="NAME=PATH")
    p.add_argument("--scalars-dir", help="directory written by 'scalars'")

    cmd("run", "run the whole pipeline from a manifest")
    return parser


def _resolve(args):
    """Fill unset common flags from --config, then from the defaults."""
    cfg = {}
    if args.config:
        path = Path(args.config)
        try:
            cfg = json.loads(path.read_text())
        except OSError as exc:
            raise FormatError(f"{path}: cannot read config ({exc.strerror or exc})") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        if "lambda" in cfg:
            cfg["lam"] = cfg.pop("lambda")
    for key, default in COMMON_DEFAULTS.items():
        if getattr(args, key) is None:
            setattr(args, key, cfg.get(key, default))
    for key in ("manifest", "mask", "out"):
        if getattr(args, key) is None and key in cfg:
            setattr(args, key, str(Path(args.config).parent / cfg[key]))
    args.config_doc = cfg
    if args.threads < 1:
        raise ValidationError("--threads must be >= 1")
    return args


def _need(args, *names):
    missing = [n for n in names if not getattr(args, n, None)]
    if missing:
        raise ValidationError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _qcfg(args):
    return QBallConfig(args.lmax, args.lam)


def _mask(args, dims):
    return io.load_mask(args.mask, dims) if args.mask else None


def _load_dwi(args):
    _need(args, "dwi", "bval", "bvec")
    return io.load_dwi(args.dwi, args.bval, args.bvec)


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_phantom(args):
    _need(args, "out")
    out = Path(args.out)
    if args.kind == "longitudinal":
        spec = PhantomSpec(
            dims=(args.size,) * 3, n_subjects=args.subjects, noise=args.noise, rician=args.rician,
            warp_degrees=args.warp_degrees, seed=args.seed,
        )
        manifest = write_phantom(spec, out)
        _print_json({"manifest": str(manifest)})
        return
    fld, labels = {"tube": tube_phantom, "elbow": elbow_phantom, "crossing": crossing_phantom}[args.kind]()
    out.mkdir(parents=True, exist_ok=True)
    io.save_sh_field(out / "odf.nii.gz", fld)
    io.save_nifti(out / "labels.nii.gz", labels, fld.affine, fld.voxel_size)
    _print_json({"odf": str(out / "odf.nii.gz"), "labels": str(out / "labels.nii.gz")})


def cmd_fit_sh(args, odf=False):
    _need(args, "out")
    dwi = _load_dwi(args)
    fld = fit_sh_volume(dwi, _mask(args, dwi.dims), _qcfg(args), odf=odf, workers=args.threads)
    io.save_sh_field(args.out, fld)


def cmd_odf(args):
    _need(args, "out")
    if args.sh:
        io.save_sh_field(args.out, signal_field_to_odf(io.load_sh_field(args.sh)))
    else:
        cmd_fit_sh(args, odf=True)


def cmd_scalars(args):
    _need(args, "out")
    dwi = _load_dwi(args)
    maps = scalar_maps(dwi, _mask(args, dwi.dims))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in SCALAR_NAMES:
        io.save_scalar(out / f"{name}.nii.gz", maps[name])
    io.save_nifti(out / "valid.nii.gz", maps["valid"].astype(np.uint8), dwi.affine, dwi.voxel_size)


def cmd_warp_apply(args):
    _need(args, "out")
    fld = io.load_displacement(args.warp)
    if args.sh:
        src = io.load_sh_field(args.sh)
    else:
        src = _load_dwi(args)
    warped, mask, flagged = apply_warp(src, fld, reorient=not args.no_reorient, cfg=_qcfg(args), workers=args.threads)
    if args.sh:
        io.save_sh_field(args.out, warped)
    else:
        io.save_nifti(args.out, warped.data, warped.affine, warped.voxel_size)
    _print_json({"voxels": int(mask.sum()), "flagged": int(flagged.sum())})


def _manifest_fields(args):
    _need(args, "manifest")
    manifest = io.parse_manifest(args.manifest)
    cfg = PipelineConfig(lmax=args.lmax, lam=args.lam, threads=args.threads)
    mask = io.load_mask(args.mask) if args.mask else None
    fields = [session_field(s, cfg, mask) for s in manifest.sessions]
    return manifest, fields


def cmd_lme_fit(args):
    _need(args, "out")
    manifest, fields = _manifest_fields(args)
    res = fit_atlas_field(fields, [s.subject for s in manifest.sessions], [s.age for s in manifest.sessions],
                          workers=args.threads)
    io.save_atlas(args.out, res.atlas, res.r2)


def cmd_atlas_eval(args):
    _need(args, "out")
    atlas, _ = io.load_atlas(args.atlas)
    fld = eval_atlas_at_age(atlas, args.age, args.allow_extrapolation, args.subject)
    io.save_sh_field(args.out, fld)


def cmd_gfa_map(args):
    _need(args, "out")
    if args.sh:
        fld = io.load_sh_field(args.sh)
        if fld.kind != "odf":
            raise ValidationError("GFA needs an ODF field")
    elif args.atlas and args.age is not None:
        fld = eval_atlas_at_age(io.load_atlas(args.atlas)[0], args.age)
    else:
        raise ValidationError("give --sh, or --atlas with --age")
    io.save_nifti(args.out, fld.gfa_map(), fld.affine, fld.voxel_size)


def cmd_r2_map(args):
    _need(args, "out")
    atlas, r2 = io.load_atlas(args.atlas)
    if r2 is None:
        raise FormatError(f"{args.atlas}: atlas has no R^2 volume")
    io.save_nifti(args.out, r2, atlas.affine, atlas.voxel_size)


def cmd_track(args):
    _need(args, "out")
    fld = io.load_sh_field(args.sh)
    if args.mask:
        m = io.load_mask(args.mask, fld.dims)
        fld.mask &= m
    gfa = io.load_scalar(args.gfa).data if args.gfa else None
    params = TrackingParams(
        step_size=args.step, max_angle=args.max_angle, gfa_threshold=args.gfa_threshold, max_length=args.max_length,
        seeds_per_voxel=args.seeds_per_voxel, min_length=args.min_length, seed=args.seed,
    )
    sls = whole_brain_track(fld, gfa, params, workers=args.threads)
    io.write_streamlines(args.out, sls, fld.affine)
    if args.text:
        io.write_streamlines_text(args.text, sls)
    _print_json({"streamlines": len(sls)})


def cmd_roi_trends(args):
    _need(args, "out")
    atlas, _ = io.load_atlas(args.atlas)
    labels = io.load_nifti(args.labels)[0].astype(int)
    side = io.sidecar_path(args.labels)
    names = {int(k): v for k, v in json.loads(side.read_text()).items()} if side.exists() else None
    n = int(round((args.t_stop - args.t_start) / args.t_step))
    grid = args.t_start + args.t_step * np.arange(n + 1)
    table = roi_trends(atlas, labels, grid, None if args.no_subjects else True, names)
    table.write_csv(args.out)


def cmd_ncc_matrix(args):
    vols = {}
    if args.scalars_dir:
        for name in SCALAR_NAMES:
            vols[name] = io.load_scalar(Path(args.scalars_dir) / f"{name}.nii.gz")
    for item in args.volume:
        name, sep, path = item.partition("=")
        if not sep:
            raise ValidationError(f"--volume expects NAME=PATH, got {item!r}")
        vols[name] = io.load_scalar(path)
    if not vols:
        raise ValidationError("give --scalars-dir or --volume NAME=PATH")
    dims = next(iter(vols.values())).dims
    rep = ncc_matrix(vols, _mask(args, dims))
    doc = rep.as_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2))
    _print_json(doc)


def cmd_run(args):
    _need(args, "manifest", "out")
    doc = {k: v for k, v in args.config_doc.items() if k not in ("manifest", "out")}
    base = Path(args.config).parent if args.config else None
    cfg = PipelineConfig.from_dict(doc, base)
    cfg.lmax, cfg.lam, cfg.threads, cfg.seed, cfg.max_angle = args.lmax, args.lam, args.threads, args.seed, args.max_angle
    if args.mask:
        cfg.mask = args.mask
    cfg.validate()
    report = pipeline_run(args.manifest, cfg, args.out)
    _print_json({"status": report["status"], "stages": [(s["stage"], "skipped" if s["skipped"] else "ran")
                                                        for s in report["stages"]]})


COMMANDS = {
    "phantom": cmd_phantom,
    "fit-sh": cmd_fit_sh,
    "odf": cmd_odf,
    "scalars": cmd_scalars,
    "warp-apply": cmd_warp_apply,
    "lme-fit": cmd_lme_fit,
    "atlas-eval": cmd_atlas_eval,
    "gfa-map": cmd_gfa_map,
    "r2-map": cmd_r2_map,
    "track": cmd_track,
    "roi-trends": cmd_roi_trends,
    "ncc-matrix": cmd_ncc_matrix,
    "run": cmd_run,
}


def exit_code(exc):
    if isinstance(exc, StageFailure):
        exc = exc.cause
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    return EXIT_VALIDATION


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        _resolve(args)
        COMMANDS[args.command](args)
    except (AtlasError, OSError) as exc:
        print(f"dodfatlas {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
