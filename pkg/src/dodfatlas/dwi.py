"""Diffusion-weighted signal model: gradient schemes, tensors, scalar maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .sphere import half_sphere_directions

UNIT_TOL = 1e-3


@dataclass
class GradientScheme:
    bvals: np.ndarray
    bvecs: np.ndarray
    b0_threshold: float = 0.0

    @property
    def n(self):
        return len(self.bvals)

    @property
    def b0_mask(self):
        return self.bvals <= self.b0_threshold

    @property
    def dwi_mask(self):
        return ~self.b0_mask

    @property
    def dirs(self):
        """Unit directions of the diffusion-weighted entries."""
        return self.bvecs[self.dwi_mask]


def validate_scheme(bvals, bvecs, b0_threshold=0.0):
    """Check and normalize a raw (bvals, bvecs) pair.

    ``bvecs`` may be given as (n, 3) or FSL-style (3, n).  Directions of
    weighted entries within 1e-3 of unit length are renormalized; anything
    further off is rejected.
    """
    bvals = np.asarray(bvals, dtype=float).ravel()
    bvecs = np.asarray(bvecs, dtype=float)
    if bvecs.ndim != 2:
        raise ValidationError(f"bvecs must be 2-D, got shape {bvecs.shape}")
    if bvecs.shape[1] != 3 and bvecs.shape[0] == 3:
        bvecs = bvecs.T
    if bvecs.shape[1] != 3:
        raise ValidationError(f"bvecs must have 3 components, got shape {bvecs.shape}")
    if len(bvals) != len(bvecs):
        raise ValidationError(f"length mismatch: {len(bvals)} bvals vs {len(bvecs)} bvecs")
    if np.any(~np.isfinite(bvals)) or np.any(~np.isfinite(bvecs)):
        raise ValidationError("non-finite entries in gradient scheme")
    if np.any(bvals < 0):
        raise ValidationError("negative b-value")
    b0 = bvals <= b0_threshold
    if not np.any(b0):
        raise ValidationError("scheme has no baseline (b=0) entry")
    norms = np.linalg.norm(bvecs, axis=1)
    bad = (~b0) & (np.abs(norms - 1.0) > UNIT_TOL)
    if np.any(bad):
        idx = np.flatnonzero(bad)
        raise ValidationError(f"non-unit gradient direction at entries {idx.tolist()} (norms {norms[idx].round(4).tolist()})")
    out = bvecs.copy()
    out[~b0] /= norms[~b0, None]
    out[b0] = 0.0
    return GradientScheme(bvals.copy(), out, b0_threshold)


def default_scheme(n_dirs=64, bval=2000.0, n_b0=1):
    """Single-shell protocol: ``n_b0`` baselines then ``n_dirs`` half-sphere directions."""
    dirs = half_sphere_directions(n_dirs)
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_dirs, float(bval))])
    bvecs = np.concatenate([np.zeros((n_b0, 3)), dirs])
    return validate_scheme(bvals, bvecs)


def read_bvals_bvecs(bvals_path, bvecs_path):
    """Read FSL text files (bvals: one row; bvecs: three rows)."""
    try:
        bvals = np.loadtxt(bvals_path, ndmin=1)
        bvecs = np.loadtxt(bvecs_path, ndmin=2)
    except ValueError as exc:
        raise ValidationError(f"unparsable gradient file: {exc}") from exc
    return validate_scheme(bvals, bvecs)


def write_bvals_bvecs(scheme, bvals_path, bvecs_path):
    np.savetxt(bvals_path, scheme.bvals[None, :], fmt="%.6g")
    np.savetxt(bvecs_path, scheme.bvecs.T, fmt="%.17g")


# ---------------------------------------------------------------------------
# tensors


@dataclass
class DiffusionTensor:
    dxx: float
    dyy: float
    dzz: float
    dxy: float = 0.0
    dxz: float = 0.0
    dyz: float = 0.0

    @classmethod
    def from_matrix(cls, D):
        D = np.asarray(D, dtype=float)
        return cls(D[0, 0], D[1, 1], D[2, 2], D[0, 1], D[0, 2], D[1, 2])

    @classmethod
    def from_axis(cls, evals, axis):
        """Axially symmetric tensor with principal eigenvalue along ``axis``.

        ``evals`` is (lambda_par, lambda_perp) or three eigenvalues with the
        first along ``axis``.
        """
        evals = tuple(evals)
        if len(evals) == 2:
            evals = (evals[0], evals[1], evals[1])
        e1 = np.asarray(axis, dtype=float)
        e1 = e1 / np.linalg.norm(e1)
        helper = np.array([1.0, 0, 0]) if abs(e1[0]) < 0.9 else np.array([0, 1.0, 0])
        e2 = np.cross(e1, helper)
        e2 /= np.linalg.norm(e2)
        e3 = np.cross(e1, e2)
        R = np.stack([e1, e2, e3], axis=1)
        return cls.from_matrix(R @ np.diag(evals) @ R.T)

    @property
    def matrix(self):
        return np.array(
            [
                [self.dxx, self.dxy, self.dxz],
                [self.dxy, self.dyy, self.dyz],
                [self.dxz, self.dyz, self.dzz],
            ]
        )

    def rotated(self, R):
        R = np.asarray(R)
        return DiffusionTensor.from_matrix(R @ self.matrix @ R.T)


def multi_tensor_signal(compartments, scheme, s0=1.0):
    """S(g) = s0 * sum_i f_i exp(-b g^T D_i g).

    Parameters
    ----------
    compartments : list of (float, DiffusionTensor or 3x3 array)
        Volume fractions (summing to 1) and their tensors.
    scheme : GradientScheme
    s0 : float
        Signal at b=0.
    """
    fracs = np.array([f for f, _ in compartments], dtype=float)
    if np.any(fracs < 0):
        raise ValidationError("negative compartment fraction")
    if abs(fracs.sum() - 1.0) > 1e-9:
        raise ValidationError(f"compartment fractions sum to {fracs.sum()!r}, expected 1")
    g = scheme.bvecs
    out = np.zeros(scheme.n)
    for f, D in compartments:
        D = D.matrix if isinstance(D, DiffusionTensor) else np.asarray(D, dtype=float)
        adc = np.einsum("ni,ij,nj->n", g, D, g)
        out += f * np.exp(-scheme.bvals * adc)
    return s0 * out


def tensor_design_matrix(scheme):
    """Log-linear design: columns (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz, ln S0)."""
    b, g = scheme.bvals, scheme.bvecs
    return np.column_stack(
        [
            -b * g[:, 0] ** 2,
            -b * g[:, 1] ** 2,
            -b * g[:, 2] ** 2,
            -2 * b * g[:, 0] * g[:, 1],
            -2 * b * g[:, 0] * g[:, 2],
            -2 * b * g[:, 1] * g[:, 2],
            np.ones(scheme.n),
        ]
    )


@dataclass
class TensorFit:
    tensor: DiffusionTensor
    s0: float
    valid: bool = True


def _tensor_pinv(scheme):
    X = tensor_design_matrix(scheme)
    if np.count_nonzero(scheme.dwi_mask) < 6 or np.linalg.matrix_rank(X) < 7:
        raise ValidationError("tensor design is rank-deficient; need >= 6 non-collinear weighted directions")
    return np.linalg.pinv(X)


def _clamp_psd(params):
    """Rebuild (..., 6) tensors with eigenvalues clamped at 0; returns (..., 3, 3)."""
    D = np.empty(params.shape[:-1] + (3, 3))
    D[..., 0, 0], D[..., 1, 1], D[..., 2, 2] = params[..., 0], params[..., 1], params[..., 2]
    D[..., 0, 1] = D[..., 1, 0] = params[..., 3]
    D[..., 0, 2] = D[..., 2, 0] = params[..., 4]
    D[..., 1, 2] = D[..., 2, 1] = params[..., 5]
    w, V = np.linalg.eigh(D)
    if np.any(w < 0):
        w = np.clip(w, 0, None)
        D = np.einsum("...ij,...j,...kj->...ik", V, w, V)
    return D


def fit_tensor(signal, scheme):
    """Log-linear least-squares tensor fit of one voxel.

    Non-positive measurements make the voxel invalid: the returned fit has
    ``valid=False`` and a zero tensor.
    """
    signal = np.asarray(signal, dtype=float)
    if signal.shape != (scheme.n,):
        raise ValidationError(f"signal length {signal.shape} does not match scheme ({scheme.n})")
    P = _tensor_pinv(scheme)
    if np.any(signal <= 0) or np.any(~np.isfinite(signal)):
        return TensorFit(DiffusionTensor(0, 0, 0), 0.0, valid=False)
    params = P @ np.log(signal)
    D = _clamp_psd(params[:6])
    return TensorFit(DiffusionTensor.from_matrix(D), float(np.exp(params[6])), True)


def fit_tensor_volume(data, scheme, mask=None):
    """Voxel-wise tensor fit of a 4D array.

    Returns
    -------
    tensors : ndarray, shape (X, Y, Z, 3, 3)
        Zero outside the valid mask.
    valid : ndarray of bool, shape (X, Y, Z)
    """
    data = np.asarray(data, dtype=float)
    spatial = data.shape[:3]
    if mask is None:
        mask = np.ones(spatial, dtype=bool)
    P = _tensor_pinv(scheme)
    vox = data[mask]
    ok = np.all(vox > 0, axis=1) & np.all(np.isfinite(vox), axis=1)
    tensors = np.zeros(spatial + (3, 3))
    valid = np.zeros(spatial, dtype=bool)
    idx = np.flatnonzero(mask.ravel())[ok]
    if idx.size:
        params = np.log(vox[ok]) @ P.T
        flat = tensors.reshape(-1, 3, 3)
        flat[idx] = _clamp_psd(params[:, :6])
        valid.ravel()[idx] = True
    return tensors, valid


# ---------------------------------------------------------------------------
# scalar indices


def _eigvals(t):
    D = t.matrix if isinstance(t, DiffusionTensor) else np.asarray(t, dtype=float)
    return np.linalg.eigvalsh(D)[..., ::-1]


def scalars_from_evals(evals):
    """(fa, md, rd, ad) from eigenvalues sorted descending on the last axis."""
    evals = np.asarray(evals, dtype=float)
    l1, l2, l3 = evals[..., 0], evals[..., 1], evals[..., 2]
    md = (l1 + l2 + l3) / 3.0
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    den = l1 * l1 + l2 * l2 + l3 * l3
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.where(den > 0, np.sqrt(0.5 * num / np.where(den > 0, den, 1.0)), 0.0)
    return np.clip(fa, 0.0, 1.0), md, (l2 + l3) / 2.0, l1


def tensor_scalars(t):
    """FA, MD, RD, AD of one tensor.  FA of the zero tensor is 0."""
    evals = _eigvals(t)
    if evals[-1] < -1e-12:
        raise ValidationError(f"tensor is not positive semi-definite (eigenvalue {evals[-1]:.3g})")
    evals = np.clip(evals, 0.0, None)
    return tuple(float(v) for v in scalars_from_evals(evals))


@dataclass
class ScalarVolume:
    data: np.ndarray
    voxel_size: tuple = (2.0, 2.0, 2.0)
    affine: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if self.affine is None:
            self.affine = np.diag(list(self.voxel_size) + [1.0])

    @property
    def dims(self):
        return self.data.shape[:3]


@dataclass
class DWIVolume:
    data: np.ndarray
    scheme: GradientScheme
    voxel_size: tuple = (2.0, 2.0, 2.0)
    affine: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if self.affine is None:
            self.affine = np.diag(list(self.voxel_size) + [1.0])
        if self.data.ndim != 4 or self.data.shape[3] != self.scheme.n:
            raise ValidationError(f"DWI data shape {self.data.shape} does not match scheme length {self.scheme.n}")

    @property
    def dims(self):
        return self.data.shape[:3]

    def baseline(self):
        return self.data[..., self.scheme.b0_mask].mean(axis=-1)


def scalar_maps(dwi, mask=None):
    """FA, MD, RD, AD and baseline maps of a DWI volume, as ScalarVolumes.

    Voxels with an invalid tensor fit are 0 in the tensor maps.
    """
    tensors, valid = fit_tensor_volume(dwi.data, dwi.scheme, mask)
    evals = np.zeros(dwi.dims + (3,))
    evals[valid] = np.clip(np.linalg.eigvalsh(tensors[valid])[:, ::-1], 0.0, None)
    fa, md, rd, ad = scalars_from_evals(evals)
    out = {}
    for name, arr in (("fa", fa), ("md", md), ("rd", rd), ("ad", ad)):
        out[name] = ScalarVolume(np.where(valid, arr, 0.0), dwi.voxel_size, dwi.affine)
    out["baseline"] = ScalarVolume(dwi.baseline(), dwi.voxel_size, dwi.affine)
    out["valid"] = valid
    return out


def ncc(a, b, mask=None):
    """Normalized cross-correlation (Pearson) of two volumes over ``mask``."""
    a_data = a.data if isinstance(a, ScalarVolume) else np.asarray(a)
    b_data = b.data if isinstance(b, ScalarVolume) else np.asarray(b)
    if a_data.shape != b_data.shape:
        raise ValidationError(f"volume shapes differ: {a_data.shape} vs {b_data.shape}")
    if mask is None:
        mask = np.ones(a_data.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValidationError("empty mask")
    x = a_data[mask].astype(float)
    y = b_data[mask].astype(float)
    x = x - x.mean()
    y = y - y.mean()
    sx = np.sqrt(np.dot(x, x))
    sy = np.sqrt(np.dot(y, y))
    tol = 1e-12 * np.sqrt(x.size)
    if sx <= tol * max(np.abs(a_data[mask]).max(), 1e-300) or sy <= tol * max(np.abs(b_data[mask]).max(), 1e-300):
        raise NumericalError("correlation undefined: image is constant on the mask")
    return float(np.clip(np.dot(x, y) / (sx * sy), -1.0, 1.0))
