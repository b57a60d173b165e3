"""On-disk formats: NIfTI-1 volumes, SH fields, displacement fields,
manifests, atlas directories and streamline containers."""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import nibabel as nib
import numpy as np

from .dwi import DWIVolume, ScalarVolume, read_bvals_bvecs, write_bvals_bvecs
from .errors import FormatError, ValidationError
from .lme import LMEAtlas
from .qball import SHField
from .reorient import DisplacementField
from .sphere import lmax_from_ncoeffs

HEADER_SIZE = 348
MAGIC_OFFSET = 344
_MAGICS = (b"n+1\x00", b"ni1\x00")
_MAX_BYTES = 2**62


# ---------------------------------------------------------------------------
# NIfTI


def _raw_bytes(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _check_header(raw, path):
    """Validate the fixed NIfTI-1 header fields before handing bytes to nibabel."""
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(raw)} of {HEADER_SIZE} bytes)")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise FormatError(f"{path}: bad header size field at offset 0")
    magic = raw[MAGIC_OFFSET:MAGIC_OFFSET + 4]
    if magic not in _MAGICS:
        raise FormatError(f"{path}: bad magic {magic!r} at offset {MAGIC_OFFSET}")
    dim = struct.unpack(endian + "8h", raw[40:56])
    if not 1 <= dim[0] <= 7 or any(d < 1 for d in dim[1:dim[0] + 1]):
        raise FormatError(f"{path}: invalid dim field {dim} at offset 40")
    bitpix = struct.unpack(endian + "h", raw[72:74])[0]
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    nbytes = bitpix // 8
    for d in dim[1:dim[0] + 1]:
        nbytes *= d
        if nbytes > _MAX_BYTES:
            raise FormatError(f"{path}: dimension overflow, dims {dim[1:dim[0] + 1]}")
    if magic == _MAGICS[0] and len(raw) < vox_offset + nbytes:
        raise FormatError(
            f"{path}: truncated data, expected {nbytes} bytes at offset {vox_offset}, found {len(raw) - vox_offset}"
        )


def load_nifti(path):
    """Read a single-file NIfTI-1 volume (plain or gzip).

    Returns ``(data, affine, voxel_size)``.  Data keeps its stored dtype;
    nothing is returned if any header or size check fails.
    """
    raw = _raw_bytes(path)
    _check_header(raw, path)
    try:
        img = nib.Nifti1Image.from_bytes(raw)
        data = np.asanyarray(img.dataobj)
    except Exception as exc:
        raise FormatError(f"{path}: {exc}") from exc
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    return np.array(data), img.affine.copy(), zooms


def save_nifti(path, data, affine=None, voxel_size=None, intent=None):
    """Write ``data`` unchanged; the suffix ``.gz`` selects gzip."""
    data = np.asarray(data)
    if data.dtype == bool:
        data = data.astype(np.uint8)
    if affine is None:
        vs = list(voxel_size or (1.0, 1.0, 1.0))
        affine = np.diag(vs + [1.0])
    img = nib.Nifti1Image(data, np.asarray(affine, dtype=float))
    img.header.set_data_dtype(data.dtype)
    if voxel_size is not None:
        zooms = list(img.header.get_zooms())
        zooms[:3] = voxel_size
        img.header.set_zooms(zooms)
    if intent:
        img.header.set_intent(intent)
    img.set_qform(img.affine, code=1)
    img.set_sform(img.affine, code=1)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        nib.save(img, str(path))
    except OSError as exc:
        raise FormatError(f"{path}: cannot write ({exc})") from exc


def load_scalar(path):
    data, affine, zooms = load_nifti(path)
    if data.ndim != 3:
        raise FormatError(f"{path}: expected a 3-D volume, got shape {data.shape}")
    return ScalarVolume(data, zooms, affine)


def save_scalar(path, vol: ScalarVolume):
    save_nifti(path, vol.data, vol.affine, vol.voxel_size)


def load_dwi(path, bvals_path, bvecs_path):
    data, affine, zooms = load_nifti(path)
    scheme = read_bvals_bvecs(bvals_path, bvecs_path)
    if data.ndim != 4:
        raise FormatError(f"{path}: expected a 4-D DWI volume, got shape {data.shape}")
    return DWIVolume(data.astype(float), scheme, zooms, affine)


def save_dwi(path, dwi: DWIVolume, bvals_path, bvecs_path, dtype=np.float32):
    save_nifti(path, dwi.data.astype(dtype), dwi.affine, dwi.voxel_size)
    write_bvals_bvecs(dwi.scheme, bvals_path, bvecs_path)


def load_mask(path, dims=None):
    data, _, _ = load_nifti(path)
    mask = np.asarray(data) != 0
    if dims is not None and mask.shape != tuple(dims):
        raise ValidationError(f"mask shape {mask.shape} does not match grid {tuple(dims)}")
    return mask


# ---------------------------------------------------------------------------
# SH fields and displacement fields


def sidecar_path(path):
    name = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    return Path(path).with_name(name + ".json")


def save_sh_field(path, fld: SHField):
    save_nifti(path, fld.coeffs, fld.affine, fld.voxel_size)
    meta = {"l_max": fld.l_max, "kind": fld.kind, "lambda": fld.lam, "n_coef": int(fld.coeffs.shape[3])}
    sidecar_path(path).write_text(json.dumps(meta, indent=2))


def load_sh_field(path):
    """4-D coefficient volume; voxels with any non-finite coefficient are outside the mask."""
    data, affine, zooms = load_nifti(path)
    if data.ndim != 4:
        raise FormatError(f"{path}: SH field must be 4-D, got shape {data.shape}")
    side = sidecar_path(path)
    meta = {}
    if side.exists():
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{side}: invalid JSON ({exc})") from exc
    l_max = int(meta.get("l_max", lmax_from_ncoeffs(data.shape[3])))
    coeffs = data.astype(float)
    mask = np.all(np.isfinite(coeffs), axis=3)
    coeffs[~mask] = np.nan
    return SHField(coeffs, mask, l_max, meta.get("kind", "odf"), zooms, affine, meta.get("lambda"))


def save_displacement(path, fld: DisplacementField):
    """5-D volume (X, Y, Z, 1, 3) in mm with the vector intent."""
    save_nifti(path, fld.u[:, :, :, None, :], fld.affine, fld.voxel_size, intent="vector")


def load_displacement(path, dims=None):
    data, affine, zooms = load_nifti(path)
    if data.ndim != 5 or data.shape[3] != 1 or data.shape[4] != 3:
        raise FormatError(f"{path}: displacement field must be (X, Y, Z, 1, 3), got shape {data.shape}")
    fld = DisplacementField(data[:, :, :, 0, :].astype(float), zooms, affine)
    if dims is not None and fld.dims != tuple(dims):
        raise ValidationError(f"displacement grid {fld.dims} does not match target grid {tuple(dims)}")
    return fld


# ---------------------------------------------------------------------------
# manifest


class ManifestError(ValidationError):
    """All problems found in one manifest."""

    def __init__(self, findings):
        self.findings = list(findings)
        super().__init__("invalid manifest:\n  " + "\n  ".join(self.findings))


@dataclass(frozen=True)
class SessionEntry:
    subject: str
    session: str
    age: float
    dwi: Path | None = None
    bval: Path | None = None
    bvec: Path | None = None
    sh: Path | None = None
    warp: Path | None = None


@dataclass
class Manifest:
    sessions: list
    root: Path = field(default_factory=Path)

    @property
    def subjects(self):
        return sorted({s.subject for s in self.sessions})

    def by_subject(self):
        out = {}
        for s in self.sessions:
            out.setdefault(s.subject, []).append(s)
        return out


_PATH_KEYS = ("dwi", "bval", "bvec", "sh", "warp")


def parse_manifest(path):
    """Load and validate a JSON manifest.

    Layout::

        {"subjects": [{"id": "s01", "sessions": [
            {"id": "ses1", "age_months": 6.0,
             "dwi": "s01_ses1.nii.gz", "bval": "dwi.bval", "bvec": "dwi.bvec",
             "warp": "s01_ses1_warp.nii.gz"}]}]}

    A session gives either ``dwi``/``bval``/``bvec`` or a registered ``sh``
    field; ``warp`` is optional.  Relative paths resolve against the
    manifest's directory.  Every problem is collected and raised together.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc.strerror or exc})") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    root = path.parent
    findings, sessions, seen = [], [], set()
    subjects = doc.get("subjects") if isinstance(doc, dict) else None
    if not isinstance(subjects, list):
        raise ManifestError(["top-level 'subjects' list is missing"])
    for si, subj in enumerate(subjects):
        sid = subj.get("id") if isinstance(subj, dict) else None
        if sid in (None, ""):
            findings.append(f"subject #{si}: missing id")
            continue
        sid = str(sid)
        for ses in subj.get("sessions") or []:
            sesid = str(ses.get("id", ""))
            where = f"session ({sid}, {sesid})"
            if not sesid:
                findings.append(f"subject {sid}: session without id")
                continue
            if (sid, sesid) in seen:
                findings.append(f"duplicate {where}")
                continue
            seen.add((sid, sesid))
            before = len(findings)
            age = ses.get("age_months")
            if age is None:
                findings.append(f"{where}: missing age_months")
            elif not isinstance(age, (int, float)) or isinstance(age, bool) or not np.isfinite(age) or age < 0:
                findings.append(f"{where}: age_months must be a number >= 0, got {age!r}")
            paths = {}
            for key in _PATH_KEYS:
                if ses.get(key):
                    p = Path(ses[key])
                    p = p if p.is_absolute() else root / p
                    if not p.exists():
                        findings.append(f"{where}: {key} file not found: {p}")
                    paths[key] = p
            has_dwi = all(k in paths for k in ("dwi", "bval", "bvec"))
            if not has_dwi and "sh" not in paths:
                findings.append(f"{where}: needs dwi+bval+bvec or sh")
            if len(findings) == before:
                sessions.append(SessionEntry(sid, sesid, float(age), **paths))
    if findings:
        raise ManifestError(findings)
    sessions.sort(key=lambda s: (s.subject, s.session))
    return Manifest(sessions, root)


def write_manifest(path, entries):
    """Write ``entries`` (SessionEntry list) with paths relative to the manifest."""
    path = Path(path)
    subjects = {}
    for e in sorted(entries, key=lambda s: (s.subject, s.session)):
        ses = {"id": e.session, "age_months": e.age}
        for key in _PATH_KEYS:
            p = getattr(e, key)
            if p is not None:
                p = Path(p)
                try:
                    p = p.relative_to(path.parent)
                except ValueError:
                    pass
                ses[key] = str(p)
        subjects.setdefault(e.subject, []).append(ses)
    doc = {"subjects": [{"id": k, "sessions": v} for k, v in subjects.items()]}
    path.write_text(json.dumps(doc, indent=2))


# ---------------------------------------------------------------------------
# atlas directory

_ATLAS_ARRAYS = ("beta0", "beta1", "sigma2", "delta2", "alpha")


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_atlas(directory, atlas: LMEAtlas, r2=None):
    """One NIfTI per parameter plus ``metadata.json`` with file digests."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in _ATLAS_ARRAYS:
        fn = f"{name}.nii.gz"
        save_nifti(d / fn, getattr(atlas, name), atlas.affine, atlas.voxel_size)
        files[name] = fn
    save_nifti(d / "mask.nii.gz", atlas.mask.astype(np.uint8), atlas.affine, atlas.voxel_size)
    files["mask"] = "mask.nii.gz"
    if atlas.reasons is not None:
        save_nifti(d / "reasons.nii.gz", atlas.reasons.astype(np.int16), atlas.affine, atlas.voxel_size)
        files["reasons"] = "reasons.nii.gz"
    if r2 is not None:
        save_nifti(d / "r2.nii.gz", r2, atlas.affine, atlas.voxel_size)
        files["r2"] = "r2.nii.gz"
    meta = {
        "l_max": atlas.l_max,
        "subjects": list(atlas.subjects),
        "voxel_size": list(atlas.voxel_size),
        "meta": atlas.meta,
        "files": files,
        "sha256": {k: file_digest(d / v) for k, v in files.items()},
    }
    (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_atlas(directory, verify=True):
    """Inverse of :func:`save_atlas`; returns ``(atlas, r2 or None)``."""
    d = Path(directory)
    try:
        meta = json.loads((d / "metadata.json").read_text())
    except OSError as exc:
        raise FormatError(f"{d}: not an atlas directory ({exc.strerror or exc})") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / 'metadata.json'}: invalid JSON ({exc})") from exc
    files = meta["files"]
    if verify:
        for key, fn in files.items():
            if file_digest(d / fn) != meta["sha256"][key]:
                raise FormatError(f"{d / fn}: checksum mismatch")
    arrays = {}
    affine = None
    for name in _ATLAS_ARRAYS:
        arrays[name], affine, _ = load_nifti(d / files[name])
    mask = load_nifti(d / files["mask"])[0] != 0
    reasons = load_nifti(d / files["reasons"])[0] if "reasons" in files else None
    r2 = load_nifti(d / files["r2"])[0] if "r2" in files else None
    atlas = LMEAtlas(
        mask=mask,
        subjects=list(meta["subjects"]),
        l_max=int(meta["l_max"]),
        voxel_size=tuple(meta["voxel_size"]),
        affine=affine,
        reasons=reasons,
        meta=dict(meta.get("meta", {})),
        **{k: v.astype(float) for k, v in arrays.items()},
    )
    return atlas, r2


# ---------------------------------------------------------------------------
# streamlines
#
# Binary layout, little-endian throughout:
#   offset 0   4s      magic b"DSTL"
#   offset 4   uint32  format version (1)
#   offset 8   uint32  streamline count
#   offset 12  uint64  total point count
#   offset 20  16 x float64  voxel-to-mm transform, row-major
#   offset 148 body: per streamline, uint32 n followed by n x 3 float32 (mm)

STREAMLINE_MAGIC = b"DSTL"
STREAMLINE_VERSION = 1
_SL_HEADER = struct.Struct("<4sIIQ16d")


def write_streamlines(path, streamlines, affine):
    pts = [np.asarray(getattr(s, "points", s), dtype="<f4").reshape(-1, 3) for s in streamlines]
    total = sum(len(p) for p in pts)
    A = np.asarray(affine, dtype=float).ravel()
    with open(path, "wb") as fh:
        fh.write(_SL_HEADER.pack(STREAMLINE_MAGIC, STREAMLINE_VERSION, len(pts), total, *A))
        for p in pts:
            fh.write(struct.pack("<I", len(p)))
            fh.write(p.tobytes())


def read_streamlines(path):
    """Returns ``(list of (n, 3) float32 arrays, affine)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    if len(raw) < _SL_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} of {_SL_HEADER.size} bytes)")
    magic, version, count, total, *A = _SL_HEADER.unpack_from(raw)
    if magic != STREAMLINE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != STREAMLINE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    off = _SL_HEADER.size
    out = []
    for k in range(count):
        if off + 4 > len(raw):
            raise FormatError(f"{path}: truncated at streamline {k} (offset {off})")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        end = off + 12 * n
        if end > len(raw):
            raise FormatError(f"{path}: truncated at streamline {k} (offset {off})")
        out.append(np.frombuffer(raw, dtype="<f4", count=3 * n, offset=off).reshape(n, 3).copy())
        off = end
    if sum(len(p) for p in out) != total or off != len(raw):
        raise FormatError(f"{path}: point total or body length does not match the header")
    return out, np.array(A).reshape(4, 4)


def write_streamlines_text(path, streamlines):
    """One ``x y z`` line per point; streamlines separated by a blank line."""
    with open(path, "w", encoding="ascii") as fh:
        for k, s in enumerate(streamlines):
            if k:
                fh.write("\n")
            for x, y, z in np.asarray(getattr(s, "points", s), dtype=float):
                fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def read_streamlines_text(path):
    blocks, cur = [], []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if line.strip():
            cur.append([float(v) for v in line.split()])
        elif cur:
            blocks.append(np.array(cur))
            cur = []
    if cur:
        blocks.append(np.array(cur))
    return blocks
