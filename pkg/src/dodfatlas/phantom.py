"""Synthetic data with known ground truth.

The longitudinal phantom mimics an infant corpus callosum: three boxes
(genu, body, splenium) along the y axis with fibers along x, inside an
ellipsoidal brain of isotropic tissue.  Each white-matter voxel mixes an
isotropic compartment and a prolate tensor with the same mean diffusivity;
the anisotropic fraction grows linearly with age, plus a per-subject
offset.  Because the normalized signal is linear in that fraction, the SH
coefficients are exactly linear in age, which is what the mixed model
assumes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dwi import DiffusionTensor, DWIVolume, default_scheme, multi_tensor_signal
from .errors import ValidationError
from .qball import QBallConfig, QBallModel, SHField, gfa_closed_form
from .reorient import DisplacementField, apply_warp
from .sphere import rotation_matrix

FIBER_EVALS = (1.7e-3, 0.2e-3, 0.2e-3)
ISO_DIFFUSIVITY = sum(FIBER_EVALS) / 3.0


@dataclass(frozen=True)
class Region:
    label: int
    name: str
    box: tuple  # ((x0, x1), (y0, y1), (z0, z1)), half-open voxel ranges
    base: float  # anisotropic fraction at age 0
    slope: float  # per month
    s0: float


DEFAULT_REGIONS = (
    Region(1, "genu", ((6, 26), (5, 11), (14, 18)), 0.35, 0.005, 800.0),
    Region(2, "body", ((6, 26), (13, 19), (14, 18)), 0.30, 0.004, 850.0),
    Region(3, "splenium", ((6, 26), (21, 27), (14, 18)), 0.45, 0.005, 900.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    voxel_size: float = 2.0
    n_subjects: int = 14
    sessions: tuple = (2, 3)
    age_range: tuple = (3.0, 36.0)
    bval: float = 2000.0
    n_dirs: int = 64
    n_b0: int = 1
    noise: float = 0.02  # Gaussian sd relative to the background S0
    rician: bool = False
    subject_sd: float = 0.03
    background_s0: float = 1000.0
    regions: tuple = DEFAULT_REGIONS
    warp_degrees: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or min(self.sessions) < 1:
            raise ValidationError("need at least one subject and one session")
        if not 0 <= self.age_range[0] < self.age_range[1]:
            raise ValidationError(f"bad age range {self.age_range}")

    @property
    def scheme(self):
        return default_scheme(self.n_dirs, self.bval, self.n_b0)

    @property
    def affine(self):
        return np.diag([self.voxel_size] * 3 + [1.0])


@dataclass(frozen=True)
class Session:
    subject: str
    session: str
    age: float
    subject_index: int
    session_index: int


def cohort(spec: PhantomSpec):
    """Subjects ``sub-01..`` with 2-3 sorted ages each, drawn from ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, 7])
    lo, hi = spec.age_range
    out = []
    for s in range(spec.n_subjects):
        n = int(rng.integers(min(spec.sessions), max(spec.sessions) + 1))
        ages = np.sort(np.round(rng.uniform(lo, hi, size=n), 1))
        for k, age in enumerate(ages):
            out.append(Session(f"sub-{s + 1:02d}", f"ses-{k + 1}", float(age), s, k))
    return out


def subject_offsets(spec: PhantomSpec):
    """Anisotropic-fraction offset of each subject, shared by all regions."""
    rng = np.random.default_rng([spec.seed, 11])
    return rng.normal(0.0, spec.subject_sd, size=spec.n_subjects)


def brain_mask(spec: PhantomSpec):
    dims = np.array(spec.dims)
    c = (dims - 1) / 2.0
    r = np.array([dims[0] / 2 - 1, dims[1] / 2 - 1, dims[2] / 2 - 2], dtype=float)
    g = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1)
    return np.sum(((g - c) / r) ** 2, axis=-1) <= 1.0


def region_labels(spec: PhantomSpec):
    labels = np.zeros(spec.dims, dtype=np.int16)
    for reg in spec.regions:
        (x0, x1), (y0, y1), (z0, z1) = reg.box
        labels[x0:x1, y0:y1, z0:z1] = reg.label
    labels[~brain_mask(spec)] = 0
    return labels


def fraction_map(spec: PhantomSpec, age, subject_index=None):
    """Anisotropic fraction volume at ``age``; population curve if no subject."""
    labels = region_labels(spec)
    out = np.zeros(spec.dims)
    offs = subject_offsets(spec) if subject_index is not None else None
    for reg in spec.regions:
        f = reg.base + reg.slope * age
        if offs is not None:
            f += offs[subject_index]
        out[labels == reg.label] = f
    if np.any((out < 0) | (out > 1)):
        raise ValidationError("anisotropic fraction left [0, 1]; reduce slope, offsets or age range")
    return out


def s0_map(spec: PhantomSpec):
    labels = region_labels(spec)
    out = np.where(brain_mask(spec), spec.background_s0, 0.0)
    for reg in spec.regions:
        out[labels == reg.label] = reg.s0
    return out


def compartment_signals(scheme, fiber_dir=(1.0, 0.0, 0.0)):
    """Normalized isotropic and fiber signals, each of length ``scheme.n``."""
    iso = multi_tensor_signal([(1.0, np.eye(3) * ISO_DIFFUSIVITY)], scheme)
    fib = multi_tensor_signal([(1.0, DiffusionTensor.from_axis(FIBER_EVALS, fiber_dir))], scheme)
    return iso, fib


def _add_noise(clean, sigma, rician, rng):
    if sigma <= 0:
        return clean
    n1 = rng.normal(0.0, sigma, size=clean.shape)
    if not rician:
        return clean + n1
    n2 = rng.normal(0.0, sigma, size=clean.shape)
    return np.sqrt((clean + n1) ** 2 + n2**2)


def _rigid_field(spec, degrees):
    R = rotation_matrix([0.0, 0.0, 1.0], np.radians(degrees))
    return DisplacementField.affine_map(spec.dims, (spec.voxel_size,) * 3, R)


def session_warp_angle(spec: PhantomSpec, sess: Session):
    if spec.warp_degrees <= 0:
        return 0.0
    rng = np.random.default_rng([spec.seed, 13, sess.subject_index, sess.session_index])
    return float(rng.uniform(-spec.warp_degrees, spec.warp_degrees))


def synthesize_session(spec: PhantomSpec, sess: Session, noise=True):
    """Template-space DWI volume of one session (before any native-space warp)."""
    scheme = spec.scheme
    iso, fib = compartment_signals(scheme)
    f = fraction_map(spec, sess.age, sess.subject_index)
    s0 = s0_map(spec)
    clean = s0[..., None] * ((1.0 - f)[..., None] * iso + f[..., None] * fib)
    data = clean
    if noise:
        rng = np.random.default_rng([spec.seed, 17, sess.subject_index, sess.session_index])
        data = _add_noise(clean, spec.noise * spec.background_s0, spec.rician, rng)
        data[s0 == 0] = 0.0
    vs = (spec.voxel_size,) * 3
    return DWIVolume(data, scheme, vs, spec.affine)


def native_session(spec: PhantomSpec, sess: Session, noise=True):
    """Session in its native space plus the field that maps it back to the template.

    The native volume is the template volume rotated about z through the
    volume center; the returned field is the inverse rotation, to be used
    as a pull-back from template space into native space.
    """
    dwi = synthesize_session(spec, sess, noise)
    angle = session_warp_angle(spec, sess)
    if angle == 0.0:
        return dwi, None
    to_native = _rigid_field(spec, angle)
    warped, mask, _ = apply_warp(dwi, to_native)
    warped.data[~mask] = 0.0
    return warped, _rigid_field(spec, -angle)


@dataclass
class GroundTruth:
    """Noiseless population trajectories per region on ``t_grid``."""

    t_grid: np.ndarray
    gfa: dict  # region name -> population GFA per t
    gfa_slope: dict  # least-squares slope of the GFA trajectory
    gfa_intercept: dict  # GFA at the first grid age
    coef_intercept: dict  # region name -> ODF coefficients at age 0
    coef_slope: dict  # region name -> ODF coefficient slope per month
    labels: dict = field(default_factory=dict)  # region name -> label


def ground_truth(spec: PhantomSpec, t_grid=None, cfg=QBallConfig()):
    t_grid = np.arange(3.0, 37.0, 1.0) if t_grid is None else np.asarray(t_grid, dtype=float)
    scheme = spec.scheme
    model = QBallModel(scheme, cfg)
    iso, fib = compartment_signals(scheme)
    c_iso = model.fit(iso)[0] * model.frt
    c_fib = model.fit(fib)[0] * model.frt
    gt = GroundTruth(t_grid, {}, {}, {}, {}, {})
    for reg in spec.regions:
        f = reg.base + reg.slope * t_grid
        traj = gfa_closed_form((1 - f)[:, None] * c_iso + f[:, None] * c_fib)
        gt.gfa[reg.name] = traj
        gt.gfa_slope[reg.name] = float(np.polyfit(t_grid, traj, 1)[0])
        gt.gfa_intercept[reg.name] = float(traj[0])
        gt.coef_intercept[reg.name] = (1 - reg.base) * c_iso + reg.base * c_fib
        gt.coef_slope[reg.name] = reg.slope * (c_fib - c_iso)
        gt.labels[reg.name] = reg.label
    return gt


def write_phantom(spec: PhantomSpec, out_dir, noise=True):
    """Write the cohort as NIfTI + FSL files with a manifest.

    Layout: ``dwi/<subject>_<session>.nii.gz``, shared ``dwi.bval`` and
    ``dwi.bvec``, optional ``warps/<subject>_<session>_warp.nii.gz``,
    ``mask.nii.gz``, ``labels.nii.gz`` + ``labels.json``, ``truth.json`` and
    ``manifest.json``.
    """
    from . import io

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vs = (spec.voxel_size,) * 3
    io.write_bvals_bvecs(spec.scheme, out / "dwi.bval", out / "dwi.bvec")
    io.save_nifti(out / "mask.nii.gz", brain_mask(spec).astype(np.uint8), spec.affine, vs)
    io.save_nifti(out / "labels.nii.gz", region_labels(spec), spec.affine, vs)
    (out / "labels.json").write_text(json.dumps({str(r.label): r.name for r in spec.regions}, indent=2))
    entries = []
    for sess in cohort(spec):
        dwi, warp = native_session(spec, sess, noise)
        stem = f"{sess.subject}_{sess.session}"
        dwi_path = out / "dwi" / f"{stem}.nii.gz"
        io.save_nifti(dwi_path, dwi.data.astype(np.float32), spec.affine, vs)
        warp_path = None
        if warp is not None:
            warp_path = out / "warps" / f"{stem}_warp.nii.gz"
            io.save_displacement(warp_path, warp)
        entries.append(
            io.SessionEntry(sess.subject, sess.session, sess.age, dwi_path, out / "dwi.bval", out / "dwi.bvec", None, warp_path)
        )
    io.write_manifest(out / "manifest.json", entries)
    gt = ground_truth(spec)
    truth = {
        "spec": {k: v for k, v in asdict(spec).items() if k != "regions"},
        "regions": [asdict(r) for r in spec.regions],
        "t_grid": gt.t_grid.tolist(),
        "gfa_slope": gt.gfa_slope,
        "gfa_intercept": gt.gfa_intercept,
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=2))
    return out / "manifest.json"


# ---------------------------------------------------------------------------
# tractography phantoms


def odf_field_from_labels(labels, table, voxel_size=2.0, cfg=QBallConfig(), bval=2000.0):
    """Noiseless ODF field from a label volume.

    ``table`` maps a label to a list of ``(fraction, fiber direction)``;
    label 0 and unlisted labels are isotropic.  The whole grid is in the mask.
    """
    labels = np.asarray(labels)
    scheme = default_scheme(64, bval)
    model = QBallModel(scheme, cfg)
    iso = multi_tensor_signal([(1.0, np.eye(3) * ISO_DIFFUSIVITY)], scheme)
    coeffs = np.empty(labels.shape + (model.projection.shape[0],))
    coeffs[...] = model.fit(iso)[0] * model.frt
    for lab, comps in table.items():
        sig = multi_tensor_signal([(f, DiffusionTensor.from_axis(FIBER_EVALS, d)) for f, d in comps], scheme)
        coeffs[labels == lab] = model.fit(sig)[0] * model.frt
    vs = (float(voxel_size),) * 3
    return SHField(coeffs, np.ones(labels.shape, dtype=bool), cfg.l_max, "odf", vs, None, cfg.lam)


X_AXIS, Y_AXIS = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)


def tube_phantom(length=28, width=4, voxel_size=2.0):
    """Straight tube along x; returns (field, labels).  Tube voxels carry label 1."""
    dims = (length + 4, width + 8, width + 8)
    labels = np.zeros(dims, dtype=np.int16)
    labels[2:2 + length, 4:4 + width, 4:4 + width] = 1
    return odf_field_from_labels(labels, {1: [(1.0, X_AXIS)]}, voxel_size), labels


def elbow_phantom(arm=16, width=4, voxel_size=2.0):
    """L-shaped tract: label 1 runs along x into a sharp 90 degree corner,
    label 2 runs along y and owns the corner voxels."""
    dims = (arm + width + 6, arm + width + 6, width + 8)
    labels = np.zeros(dims, dtype=np.int16)
    x0, y0, z0 = 2, 4, 4
    labels[x0:x0 + arm, y0:y0 + width, z0:z0 + width] = 1
    labels[x0 + arm:x0 + arm + width, y0:y0 + arm + width, z0:z0 + width] = 2
    table = {1: [(1.0, X_AXIS)], 2: [(1.0, Y_AXIS)]}
    return odf_field_from_labels(labels, table, voxel_size), labels


def crossing_phantom(length=28, width=4, voxel_size=2.0):
    """Two orthogonal tracts (1 along x, 2 along y) crossing at 90 degrees;
    the crossing voxels (label 3) hold an equal two-fiber mixture."""
    n = length + 4
    dims = (n, n, width + 8)
    labels = np.zeros(dims, dtype=np.int16)
    lo = (n - width) // 2
    z = slice(4, 4 + width)
    labels[2:2 + length, lo:lo + width, z] = 1
    b = np.zeros(dims, dtype=bool)
    b[lo:lo + width, 2:2 + length, z] = True
    labels[b & (labels == 1)] = 3
    labels[b & (labels == 0)] = 2
    table = {1: [(1.0, X_AXIS)], 2: [(1.0, Y_AXIS)], 3: [(0.5, X_AXIS), (0.5, Y_AXIS)]}
    return odf_field_from_labels(labels, table, voxel_size), labels
