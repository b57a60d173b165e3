"""End-to-end atlas construction from a manifest.

Stages run in order: ``sh`` (optional warp and reorientation, then Q-ball
fit per session), ``average`` (cross-sectional dODF atlas), ``lme``
(longitudinal atlas and R^2), ``maps`` (GFA at reference ages), ``track``
(optional) and ``trends`` (when a label volume is configured).  Each stage
stores a key derived from its inputs and configuration; a re-run whose key
and output digests match skips the stage.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, fields
from importlib import metadata
from pathlib import Path

import filelock
import numpy as np

from . import io
from .atlas import average_sh_field, roi_trends
from .errors import AtlasError, FormatError, ValidationError
from .lme import REASON_CODES, fit_atlas_field, eval_atlas_at_age
from .qball import QBallConfig, fit_sh_volume, signal_field_to_odf
from .reorient import apply_warp
from .tracking import TrackingParams, whole_brain_track

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    lmax: int = 6
    lam: float = 0.006
    threads: int = 1
    seed: int = 0
    mask: str | None = None
    labels: str | None = None
    label_names: dict | None = None
    subject_average: bool = False
    gfa_ages: tuple = (3.0, 12.0, 24.0, 36.0)
    t_start: float = 3.0
    t_stop: float = 36.0
    t_step: float = 1.0
    track: bool = False
    max_angle: float = 30.0
    step_size: float = 1.0
    gfa_threshold: float = 0.1
    min_length: float = 10.0
    seeds_per_voxel: int = 1
    trend_subjects: bool = True

    @classmethod
    def from_dict(cls, doc, base_dir=None):
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError(f"unknown configuration keys: {', '.join(unknown)}")
        cfg = cls(**doc)
        if base_dir is not None:
            for key in ("mask", "labels"):
                p = getattr(cfg, key)
                if p and not Path(p).is_absolute():
                    setattr(cfg, key, str(Path(base_dir) / p))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise FormatError(f"{path}: cannot read config ({exc.strerror or exc})") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc, path.parent)

    def validate(self):
        QBallConfig(self.lmax, self.lam)
        self.tracking()
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if not self.t_start < self.t_stop or self.t_step <= 0:
            raise ValidationError("need t_start < t_stop and t_step > 0")

    def qball(self):
        return QBallConfig(self.lmax, self.lam)

    def tracking(self):
        return TrackingParams(
            step_size=self.step_size,
            max_angle=self.max_angle,
            gfa_threshold=self.gfa_threshold,
            min_length=self.min_length,
            seeds_per_voxel=self.seeds_per_voxel,
            seed=self.seed,
        )

    def t_grid(self):
        n = int(round((self.t_stop - self.t_start) / self.t_step))
        return self.t_start + self.t_step * np.arange(n + 1)


class StageFailure(AtlasError):
    """Raised by :func:`pipeline_run`; wraps the failing stage's error."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def _digest_json(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def versions():
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "nibabel"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


class _Stage:
    """Bookkeeping of one content-addressed stage."""

    def __init__(self, run, name, key_material):
        self.run = run
        self.name = name
        self.key = _digest_json({"stage": name, **key_material})
        self.record = run.out / "stages" / f"{name}.json"

    def is_current(self):
        if not self.record.exists():
            return False
        try:
            rec = json.loads(self.record.read_text())
        except json.JSONDecodeError:
            return False
        if rec.get("key") != self.key:
            return False
        for rel, digest in rec.get("outputs", {}).items():
            p = self.run.out / rel
            if not p.exists() or io.file_digest(p) != digest:
                return False
        return True

    def commit(self, outputs, extra=None):
        self.record.parent.mkdir(parents=True, exist_ok=True)
        rec = {
            "key": self.key,
            "outputs": {str(Path(p).relative_to(self.run.out)): io.file_digest(p) for p in outputs},
            **(extra or {}),
        }
        self.record.write_text(json.dumps(rec, indent=2, sort_keys=True))

    def outputs_digest(self):
        return json.loads(self.record.read_text())["outputs"]


class _Run:
    def __init__(self, manifest, cfg, out):
        self.manifest = manifest
        self.cfg = cfg
        self.out = Path(out)
        self.report = {
            "versions": versions(),
            "config": asdict(cfg),
            "manifest": str(manifest.root),
            "stages": [],
            "status": "running",
        }

    def stage(self, name, key_material, func):
        st = _Stage(self, name, key_material)
        t0 = time.perf_counter()
        entry = {"stage": name, "key": st.key}
        if st.is_current():
            entry.update(skipped=True, seconds=0.0)
            log.info("stage %s: up to date", name)
            self.report["stages"].append(entry)
            return st
        try:
            outputs, extra = func()
        except AtlasError as exc:
            entry.update(skipped=False, failed=True, error=str(exc), seconds=time.perf_counter() - t0)
            self.report["stages"].append(entry)
            raise StageFailure(name, exc) from exc
        st.commit(outputs, extra)
        entry.update(skipped=False, seconds=round(time.perf_counter() - t0, 3), **(extra or {}))
        self.report["stages"].append(entry)
        log.info("stage %s: done in %.1f s", name, entry["seconds"])
        return st

    def write_report(self):
        (self.out / "run_report.json").write_text(json.dumps(self.report, indent=2, sort_keys=True, default=str))


def _input_digests(manifest):
    out = []
    for s in manifest.sessions:
        item = {"subject": s.subject, "session": s.session, "age": s.age}
        for key in ("dwi", "bval", "bvec", "sh", "warp"):
            p = getattr(s, key)
            if p is not None:
                item[key] = io.file_digest(p)
        out.append(item)
    return out


def session_field(entry, cfg: PipelineConfig, mask=None):
    """Template-space ODF field of one manifest session."""
    if entry.sh is not None:
        fld = io.load_sh_field(entry.sh)
        if entry.warp is not None:
            fld = apply_warp(fld, io.load_displacement(entry.warp), workers=cfg.threads)[0]
        if fld.kind != "odf":
            fld = signal_field_to_odf(fld)
    else:
        dwi = io.load_dwi(entry.dwi, entry.bval, entry.bvec)
        if entry.warp is not None:
            dwi = apply_warp(dwi, io.load_displacement(entry.warp), cfg=cfg.qball(), workers=cfg.threads)[0]
        fld = fit_sh_volume(dwi, None, cfg.qball(), odf=True, workers=cfg.threads)
    if mask is not None:
        if mask.shape != fld.dims:
            raise ValidationError(f"mask grid {mask.shape} does not match session grid {fld.dims}")
        fld.mask &= mask
        fld.coeffs[~fld.mask] = np.nan
    return fld


def pipeline_run(manifest, cfg: PipelineConfig, out_dir):
    """Run every stage into ``out_dir``; returns the run report dict."""
    if not isinstance(manifest, io.Manifest):
        manifest = io.parse_manifest(manifest)
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except filelock.Timeout as exc:
        raise FormatError(f"{out} is locked by another run") from exc
    run = _Run(manifest, cfg, out)
    t_start = time.perf_counter()
    try:
        _stages(run)
        run.report["status"] = "ok"
    except StageFailure as exc:
        run.report["status"] = "failed"
        run.report["failed_stage"] = exc.stage
        raise
    finally:
        run.report["total_seconds"] = round(time.perf_counter() - t_start, 3)
        run.write_report()
        lock.release()
    return run.report


def _stages(run: _Run):
    cfg, manifest, out = run.cfg, run.manifest, run.out
    mask = io.load_mask(cfg.mask) if cfg.mask else None
    inputs = _input_digests(manifest)
    mask_digest = io.file_digest(cfg.mask) if cfg.mask else None
    sh_dir = out / "sh"

    def sh_path(s):
        return sh_dir / f"{s.subject}_{s.session}_odf.nii.gz"

    def do_sh():
        paths = []
        for s in manifest.sessions:
            fld = session_field(s, cfg, mask)
            io.save_sh_field(sh_path(s), fld)
            paths += [sh_path(s), io.sidecar_path(sh_path(s))]
        return paths, {"sessions": len(manifest.sessions)}

    sh_stage = run.stage("sh", {"inputs": inputs, "mask": mask_digest, "lmax": cfg.lmax, "lam": cfg.lam}, do_sh)
    sh_key = sh_stage.outputs_digest()

    def load_fields():
        return [io.load_sh_field(sh_path(s)) for s in manifest.sessions]

    atlas_dir = out / "atlas"

    def do_average():
        fields_ = load_fields()
        if cfg.subject_average:
            groups = {}
            for s, f in zip(manifest.sessions, fields_):
                groups.setdefault(s.subject, []).append(f)
            avg = average_sh_field([average_sh_field(g) for g in groups.values()])
        else:
            avg = average_sh_field(fields_)
        p = atlas_dir / "average_odf.nii.gz"
        io.save_sh_field(p, avg)
        g = out / "maps" / "average_gfa.nii.gz"
        io.save_nifti(g, avg.gfa_map(), avg.affine, avg.voxel_size)
        return [p, io.sidecar_path(p), g], {}

    avg_stage = run.stage("average", {"sh": sh_key, "subject_average": cfg.subject_average}, do_average)

    def do_lme():
        fields_ = load_fields()
        res = fit_atlas_field(
            fields_, [s.subject for s in manifest.sessions], [s.age for s in manifest.sessions], workers=cfg.threads
        )
        atlas = res.atlas
        io.save_atlas(atlas_dir, atlas, res.r2)
        r2p = out / "maps" / "r2.nii.gz"
        io.save_nifti(r2p, res.r2, atlas.affine, atlas.voxel_size)
        reasons = {REASON_CODES[int(k)]: int(v) for k, v in zip(*np.unique(atlas.reasons, return_counts=True))}
        outputs = [atlas_dir / "metadata.json", r2p] + sorted(atlas_dir.glob("[a-z]*.nii.gz"))
        outputs = [p for p in outputs if p.name != "average_odf.nii.gz"]
        return outputs, {"voxels": reasons, "median_r2": float(np.nanmedian(res.r2)) if atlas.mask.any() else None}

    lme_stage = run.stage("lme", {"sh": sh_key}, do_lme)
    lme_key = lme_stage.outputs_digest()

    def do_maps():
        atlas, _ = io.load_atlas(atlas_dir)
        paths = []
        for t in cfg.gfa_ages:
            p = out / "maps" / f"gfa_{t:g}mo.nii.gz"
            io.save_nifti(p, eval_atlas_at_age(atlas, t).gfa_map(), atlas.affine, atlas.voxel_size)
            paths.append(p)
        return paths, {}

    run.stage("maps", {"lme": lme_key, "ages": list(cfg.gfa_ages)}, do_maps)

    if cfg.track:
        def do_track():
            avg = io.load_sh_field(atlas_dir / "average_odf.nii.gz")
            sls = whole_brain_track(avg, None, cfg.tracking(), workers=cfg.threads)
            pb = out / "tracks" / "streamlines.dstl"
            pt = out / "tracks" / "streamlines.txt"
            pb.parent.mkdir(parents=True, exist_ok=True)
            io.write_streamlines(pb, sls, avg.affine)
            io.write_streamlines_text(pt, sls)
            return [pb, pt], {"streamlines": len(sls)}

        run.stage("track", {"average": avg_stage.outputs_digest(), "params": asdict(cfg.tracking())}, do_track)

    if cfg.labels:
        def do_trends():
            atlas, _ = io.load_atlas(atlas_dir)
            labels = io.load_nifti(cfg.labels)[0].astype(int)
            names = {int(k): v for k, v in (cfg.label_names or _sidecar_names(cfg.labels)).items()}
            table = roi_trends(atlas, labels, cfg.t_grid(), True if cfg.trend_subjects else None, names)
            p = out / "trends" / "roi_trends.csv"
            p.parent.mkdir(parents=True, exist_ok=True)
            table.write_csv(p)
            return [p], {"rois": [n for _, n in table.rois]}

        key = {"lme": lme_key, "labels": io.file_digest(cfg.labels), "grid": cfg.t_grid().tolist(),
               "names": cfg.label_names, "subjects": cfg.trend_subjects}
        run.stage("trends", key, do_trends)


def _sidecar_names(labels_path):
    side = io.sidecar_path(labels_path)
    if side.exists():
        return json.loads(side.read_text())
    return {}


def configure_logging(verbose=False):
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
