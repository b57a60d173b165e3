"""Warping of SH fields and DWI volumes with angular reorientation.

Displacement fields are pull-back maps: output voxel ``x`` (mm) takes its
value from source position ``x + u(x)``.  The spatial Jacobian
``J = I + grad u`` therefore maps output-space directions into source
space, and a source fiber direction ``d`` appears along ``J^-1 d`` in the
output.

Angular reorientation decomposes a spherical function into axially
symmetric lobes on fixed directions ``v``, moves every lobe direction
through the local affine and recomposes.  ODF-like functions use peaked
lobes ``exp(-kappa (1 - (g.v)^2))``; diffusion signals use fiber lobes
``exp(-kappa (g.v)^2)``, which are attenuated along their fiber, so that a
lobe direction is a fiber direction in both cases.  Lobe SH coefficients
come from the Funk-Hecke theorem, so a lobe at any direction is available
in closed form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.optimize

from .dwi import DWIVolume
from .errors import ValidationError
from .parallel import map_blocks
from .qball import QBallConfig, QBallModel, SHCoefficients, SHField
from .sphere import (
    cart2sphere,
    n_coeffs,
    normalize_dirs,
    order_array,
    real_sh,
    tessellate_sphere,
)

RESIDUAL_WARN = 0.25


@dataclass
class DisplacementField:
    """Per-voxel displacement in mm, shape (X, Y, Z, 3)."""

    u: np.ndarray
    voxel_size: tuple = (2.0, 2.0, 2.0)
    affine: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if self.affine is None:
            self.affine = np.diag(list(self.voxel_size) + [1.0])
        if self.u.ndim != 4 or self.u.shape[3] != 3:
            raise ValidationError(f"displacement field must be (X, Y, Z, 3), got {self.u.shape}")
        if not np.all(np.isfinite(self.u)):
            raise ValidationError("displacement field has non-finite entries")

    @property
    def dims(self):
        return self.u.shape[:3]

    @classmethod
    def from_function(cls, dims, voxel_size, func):
        """Sample ``func(points_mm) -> target_points_mm`` on a grid."""
        grid = grid_points_mm(dims, voxel_size)
        target = func(grid.reshape(-1, 3)).reshape(grid.shape)
        return cls(target - grid, voxel_size)

    @classmethod
    def affine_map(cls, dims, voxel_size, matrix, center_mm=None, translation=(0, 0, 0)):
        """x -> M (x - c) + c + t."""
        M = np.asarray(matrix, dtype=float)
        if center_mm is None:
            center_mm = (np.array(dims) - 1) * np.array(voxel_size) / 2.0
        c = np.asarray(center_mm, dtype=float)
        t = np.asarray(translation, dtype=float)
        return cls.from_function(dims, voxel_size, lambda p: (p - c) @ M.T + c + t)


def grid_points_mm(dims, voxel_size):
    idx = np.indices(dims, dtype=float)
    return np.moveaxis(idx, 0, -1) * np.asarray(voxel_size, dtype=float)


def jacobian_field(fld):
    """I + grad u at every voxel, (X, Y, Z, 3, 3).

    Central differences inside, one-sided on the boundary; axes of length 1
    have zero derivative.
    """
    jac = np.zeros(fld.dims + (3, 3))
    for j in range(3):
        if fld.dims[j] < 2:
            continue
        jac[..., :, j] = np.gradient(fld.u, fld.voxel_size[j], axis=j)
    return jac + np.eye(3)


def local_affine_at(fld, ijk):
    """I + grad u at one voxel (same differences as :func:`jacobian_field`)."""
    ijk = tuple(int(i) for i in ijk)
    if len(ijk) != 3 or any(i < 0 or i >= n for i, n in zip(ijk, fld.dims)):
        raise ValidationError(f"voxel {ijk} outside field of dims {fld.dims}")
    a = np.eye(3)
    for j in range(3):
        n = fld.dims[j]
        if n < 2:
            continue
        h = fld.voxel_size[j]
        lo, hi = list(ijk), list(ijk)
        if 0 < ijk[j] < n - 1:
            lo[j] -= 1
            hi[j] += 1
            step = 2 * h
        elif ijk[j] == 0:
            hi[j] += 1
            step = h
        else:
            lo[j] -= 1
            step = h
        a[:, j] += (fld.u[tuple(hi)] - fld.u[tuple(lo)]) / step
    return a


# ---------------------------------------------------------------------------
# lobe decomposition


def lobe_profile(kappa, profile="peak"):
    """Axially symmetric lobe as a function of x = g.v.

    ``peak``: exp(-kappa (1 - x^2)), a bump along v (ODF-like).
    ``fiber``: exp(-kappa x^2), attenuated along v (signal of a fiber along v).
    """
    if profile == "peak":
        return lambda x: np.exp(-kappa * (1.0 - x * x))
    if profile == "fiber":
        return lambda x: np.exp(-kappa * x * x)
    raise ValidationError(f"unknown lobe profile {profile!r}")


def lobe_zonal_coefficients(kappa, l_max, profile="peak", n_points=96):
    """Funk-Hecke eigenvalues 2 pi int f(x) P_l(x) dx of a lobe profile."""
    x, w = np.polynomial.legendre.leggauss(n_points)
    f = lobe_profile(kappa, profile)(x)
    out = {}
    for l in range(0, l_max + 1, 2):
        coef = np.zeros(l + 1)
        coef[l] = 1.0
        out[l] = 2 * np.pi * float(np.sum(w * f * np.polynomial.legendre.legval(x, coef)))
    return out


class DirectionalBasisSet:
    """Fixed lobe directions and the SH images of their lobes."""

    def __init__(self, directions=None, kappa=10.0, l_max=6, profile="peak"):
        if directions is None:
            tess = tessellate_sphere(2)
            directions = tess.vertices[tess.hemisphere()]
        self.directions = normalize_dirs(directions)
        self.kappa = float(kappa)
        self.l_max = l_max
        self.profile = profile
        zonal = lobe_zonal_coefficients(self.kappa, l_max, profile)
        self.scale = np.array([zonal[l] for l in order_array(l_max)])
        self.aniso = order_array(l_max) > 0
        if self.k < (n_coeffs(l_max) - 1):
            raise ValidationError(f"{self.k} lobes cannot span {n_coeffs(l_max) - 1} anisotropic coefficients")

    @classmethod
    def for_kind(cls, kind, l_max=6, kappa=10.0):
        return cls(kappa=kappa, l_max=l_max, profile="fiber" if kind == "signal" else "peak")

    @property
    def k(self):
        return self.directions.shape[0]

    def lobe_coeffs(self, dirs):
        """SH coefficients of unit lobes centered on ``dirs``: (..., n_coef)."""
        dirs = np.asarray(dirs, dtype=float)
        flat = dirs.reshape(-1, 3)
        Y = real_sh(self.l_max, *cart2sphere(flat))
        return (Y * self.scale).reshape(dirs.shape[:-1] + (self.scale.size,))

    @cached_property
    def matrix(self):
        """Anisotropic part of the lobe coefficients, (n_coef - 1, k)."""
        return self.lobe_coeffs(self.directions)[:, self.aniso].T

    @cached_property
    def pinv(self):
        P = np.linalg.pinv(self.matrix)
        if np.linalg.matrix_rank(self.matrix) < self.matrix.shape[0]:
            raise ValidationError("lobe set does not span the anisotropic coefficients")
        return P


@dataclass
class ReorientResult:
    coeffs: SHCoefficients
    flagged: bool = False
    warning: bool = False
    residual: float = 0.0


def _is_similarity(a, tol=1e-10):
    ata = a.T @ a
    s2 = np.trace(ata) / 3.0
    return s2 > 0 and np.abs(ata - s2 * np.eye(3)).max() <= tol * s2


def decompose(c, basis):
    """Nonnegative lobe weights plus a signed correction making the fit exact.

    Returns (weights, relative NNLS residual).
    """
    c_aniso = np.asarray(c, dtype=float)[basis.aniso]
    norm = np.linalg.norm(c_aniso)
    if norm == 0:
        return np.zeros(basis.k), 0.0
    w_nn, rnorm = scipy.optimize.nnls(basis.matrix, c_aniso)
    resid = c_aniso - basis.matrix @ w_nn
    return w_nn + basis.pinv @ resid, rnorm / norm


def _keep_energy(new, old):
    """Rescale anisotropic rows of ``new`` to the energy of ``old``.

    Moving lobes non-rigidly changes how they overlap; only directions are
    meant to change, so the anisotropic energy is restored afterwards.
    """
    n_new = np.linalg.norm(new, axis=-1, keepdims=True)
    n_old = np.linalg.norm(old, axis=-1, keepdims=True)
    return np.where(n_new > 0, new * (n_old / np.where(n_new > 0, n_new, 1.0)), new)


def _move_dirs(a, dirs):
    moved = dirs @ np.asarray(a).T
    return moved / np.linalg.norm(moved, axis=-1, keepdims=True)


def reorient_coeffs(c, a, basis):
    """Core of :func:`reorient_signal` on a raw coefficient vector.

    Returns (new coefficients, flagged, nnls relative residual).
    """
    c = np.asarray(c, dtype=float)
    a = np.asarray(a, dtype=float)
    if not np.linalg.det(a) > 0:
        return c.copy(), True, 0.0
    if _is_similarity(a):
        # any exact decomposition gives the same rotated result
        w = basis.pinv @ c[basis.aniso]
        resid = 0.0
    else:
        w, resid = decompose(c, basis)
    moved = basis.lobe_coeffs(_move_dirs(a, basis.directions))[:, basis.aniso]
    out = c.copy()
    out[basis.aniso] = _keep_energy(w @ moved, c[basis.aniso])
    return out, False, resid


def reorient_signal(c, a, basis=None, scheme_dirs=None):
    """Reorient one SH-represented diffusion profile by a local affine.

    Parameters
    ----------
    c : SHCoefficients
    a : (3, 3) array
        Direction map ``v -> a v / |a v|`` applied to every lobe.
    basis : DirectionalBasisSet, optional
        Defaults to fiber lobes for signal coefficients, peaked lobes for ODFs.
    scheme_dirs : (n, 3) array, optional
        When given, the recomposed profile is evaluated on these directions
        and refitted without regularization.

    Returns
    -------
    ReorientResult
        ``flagged`` when det(a) <= 0 (identity applied); ``warning`` when the
        nonnegative decomposition leaves a large residual.
    """
    if not isinstance(c, SHCoefficients):
        raise ValidationError("reorient_signal expects SHCoefficients")
    basis = basis or DirectionalBasisSet.for_kind(c.kind, c.l_max)
    if basis.l_max != c.l_max:
        raise ValidationError("basis and coefficients differ in l_max")
    out, flagged, resid = reorient_coeffs(c.values, a, basis)
    if scheme_dirs is not None and not flagged:
        B = real_sh(c.l_max, *cart2sphere(normalize_dirs(scheme_dirs)))
        out, *_ = np.linalg.lstsq(B, B @ out, rcond=None)
    warn = resid > RESIDUAL_WARN
    if flagged:
        warnings.warn("non-positive Jacobian determinant; identity reorientation applied", stacklevel=2)
    return ReorientResult(SHCoefficients(out, c.l_max, c.kind), flagged, warn, resid)


def reorient_batch(C, A, basis):
    """Reorient rows of C (V, n_coef) by affines A (V, 3, 3).

    Returns (coefficients, flagged) with flagged rows left unchanged.
    """
    C = np.asarray(C, dtype=float)
    out = C.copy()
    det = np.linalg.det(A) if len(A) else np.zeros(0)
    flagged = ~(det > 0)
    todo = ~flagged & ~np.all(A == np.eye(3), axis=(1, 2))
    ata = np.einsum("vji,vjk->vik", A, A)
    s2 = np.trace(ata, axis1=1, axis2=2) / 3.0
    sim = todo & (np.abs(ata - s2[:, None, None] * np.eye(3)).max(axis=(1, 2)) <= 1e-10 * np.abs(s2))
    if np.any(sim):
        idx = np.flatnonzero(sim)
        W = C[idx][:, basis.aniso] @ basis.pinv.T  # (m, k)
        moved = np.einsum("vij,kj->vki", A[idx], basis.directions)
        moved /= np.linalg.norm(moved, axis=-1, keepdims=True)
        lobes = basis.lobe_coeffs(moved)[..., basis.aniso]  # (m, k, n-1)
        new = np.einsum("vk,vkc->vc", W, lobes)
        out[np.ix_(idx, np.flatnonzero(basis.aniso))] = _keep_energy(new, C[idx][:, basis.aniso])
    for v in np.flatnonzero(todo & ~sim):
        out[v], _, _ = reorient_coeffs(C[v], A[v], basis)
    return out, flagged


# ---------------------------------------------------------------------------
# resampling


def _trilinear(src, src_mask, pos):
    """Interpolate src (X, Y, Z, C) at voxel positions pos (V, 3).

    A point is valid when every corner with nonzero weight is inside the
    grid and the source mask.  Returns (values (V, C), valid (V,)).
    """
    dims = np.array(src.shape[:3])
    base = np.floor(pos).astype(int)
    frac = pos - base
    V = pos.shape[0]
    out = np.zeros((V, src.shape[3]))
    valid = np.ones(V, dtype=bool)
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        idx = base + off
        inb = np.all((idx >= 0) & (idx < dims), axis=1)
        used = w > 0
        ok = inb.copy()
        ci = np.clip(idx, 0, dims - 1)
        ok &= src_mask[ci[:, 0], ci[:, 1], ci[:, 2]]
        valid &= ~used | ok
        vals = src[ci[:, 0], ci[:, 1], ci[:, 2]]
        out += np.where((used & ok)[:, None], w[:, None] * np.where(ok[:, None], vals, 0.0), 0.0)
    return out, valid


def _source_positions(fld, src_voxel_size, idx):
    ijk = np.stack(np.unravel_index(idx, fld.dims), axis=1).astype(float)
    x_mm = ijk * np.asarray(fld.voxel_size)
    return (x_mm + fld.u.reshape(-1, 3)[idx]) / np.asarray(src_voxel_size)


def apply_warp(obj, fld, reorient=True, basis=None, cfg=None, workers=1, block_size=2048):
    """Resample an SHField or DWIVolume onto the field's grid and reorient.

    SH fields are interpolated coefficient-wise.  DWI volumes are
    interpolated per volume; the weighted measurements are then fitted to SH,
    reoriented and re-synthesized on the scheme, baselines are kept as
    interpolated.

    Returns
    -------
    (warped, mask, flagged) : warped object, its validity mask and the mask
    of voxels whose Jacobian determinant was non-positive.
    """
    if isinstance(obj, SHField):
        src, src_mask, l_max = obj.coeffs, obj.mask, obj.l_max
    elif isinstance(obj, DWIVolume):
        src = obj.data
        src_mask = np.all(np.isfinite(src), axis=-1)
        cfg = cfg or QBallConfig()
        l_max = cfg.l_max
        model = QBallModel(obj.scheme, cfg)
    else:
        raise ValidationError(f"cannot warp object of type {type(obj).__name__}")
    kind = obj.kind if isinstance(obj, SHField) else "signal"
    basis = basis or DirectionalBasisSet.for_kind(kind, l_max)
    n_out = int(np.prod(fld.dims))
    jac = jacobian_field(fld).reshape(-1, 3, 3) if reorient else None
    src_clean = np.where(src_mask[..., None], src, 0.0)

    def work(sl):
        idx = np.arange(sl.start, sl.stop)
        vals, ok = _trilinear(src_clean, src_mask, _source_positions(fld, obj.voxel_size, idx))
        flagged = np.zeros(idx.size, dtype=bool)
        if reorient and np.any(ok):
            sel = np.flatnonzero(ok)
            A = np.linalg.inv(jac[idx[sel]]) if sel.size else np.zeros((0, 3, 3))
            bad = ~(np.linalg.det(jac[idx[sel]]) > 0)
            A[bad] = -np.eye(3)  # forces the flagged path
            if isinstance(obj, SHField):
                vals[sel], fl = reorient_batch(vals[sel], A, basis)
            else:
                dw = vals[sel][:, obj.scheme.dwi_mask]
                coeffs = model.fit_normalized(dw)
                new, fl = reorient_batch(coeffs, A, basis)
                resynth = new @ model.basis.entries.T
                vals_sel = vals[sel]
                vals_sel[:, obj.scheme.dwi_mask] = np.where(fl[:, None], dw, resynth)
                vals[sel] = np.clip(vals_sel, 0.0, None)
            flagged[sel] = fl
        return vals, ok, flagged

    parts = map_blocks(work, n_out, workers, block_size)
    vals = np.concatenate([p[0] for p in parts]).reshape(fld.dims + (src.shape[3],))
    ok = np.concatenate([p[1] for p in parts]).reshape(fld.dims)
    flagged = np.concatenate([p[2] for p in parts]).reshape(fld.dims)
    if isinstance(obj, SHField):
        coeffs = np.where(ok[..., None], vals, np.nan)
        out = SHField(coeffs, ok, obj.l_max, obj.kind, fld.voxel_size, fld.affine, obj.lam)
    else:
        out = DWIVolume(np.where(ok[..., None], vals, 0.0), obj.scheme, fld.voxel_size, fld.affine)
    return out, ok, flagged


def apply_warp_dwi(obj, fld, **kwargs):
    """Alias of :func:`apply_warp` returning only the warped object."""
    return apply_warp(obj, fld, **kwargs)[0]
