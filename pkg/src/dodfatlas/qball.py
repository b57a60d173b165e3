"""Analytical Q-ball reconstruction in the real even spherical-harmonic basis.

The normalized signal is fitted with a Laplace-Beltrami regularized least
squares, and the Funk-Radon transform is applied as a diagonal scaling of
the coefficients by 2*pi*P_l(0).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import scipy.linalg

from .dwi import DWIVolume
from .errors import NumericalError, ValidationError
from .parallel import map_blocks
from .sphere import (
    build_basis,
    eval_sh,
    legendre_at_zero,
    lmax_from_ncoeffs,
    n_coeffs,
    order_array,
    real_sh,
    cart2sphere,
    tessellate_sphere,
)

SIGNAL_CLAMP = (0.0, 1.5)


@dataclass(frozen=True)
class QBallConfig:
    l_max: int = 6
    lam: float = 0.006

    def __post_init__(self):
        if self.l_max < 0 or self.l_max % 2:
            raise ValidationError(f"l_max must be even and non-negative, got {self.l_max}")
        if not self.lam >= 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class SHCoefficients:
    values: np.ndarray
    l_max: int
    kind: str = "signal"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in ("signal", "odf"):
            raise ValidationError(f"kind must be 'signal' or 'odf', got {self.kind!r}")
        if self.values.shape[-1] != n_coeffs(self.l_max):
            raise ValidationError(f"{self.values.shape[-1]} coefficients do not match l_max={self.l_max}")


class QBallModel:
    """Regularized SH fit for one gradient scheme.

    The regularized problem is solved as an augmented least-squares system
    ``[B; sqrt(lam) L^(1/2)] c = [s; 0]`` through one QR factorization,
    reused for every voxel.
    """

    def __init__(self, scheme, cfg=QBallConfig()):
        self.scheme = scheme
        self.cfg = cfg
        self.basis = build_basis(scheme.dirs, cfg.l_max)
        B = self.basis.entries
        reg = np.sqrt(cfg.lam * self.basis.lb_diag)
        A = np.vstack([B, np.diag(reg)])
        Q, R = scipy.linalg.qr(A, mode="economic")
        rdiag = np.abs(np.diag(R))
        if rdiag.min() <= 1e-10 * rdiag.max():
            raise NumericalError(
                "normal matrix is singular for this scheme; use lambda > 0 or more directions"
            )
        self.projection = scipy.linalg.solve_triangular(R, Q[: B.shape[0]].T)

    def normalize(self, data):
        """S / mean(S0) on weighted entries; (..., n) -> (..., n_dwi), valid."""
        data = np.asarray(data, dtype=float)
        s0 = data[..., self.scheme.b0_mask].mean(axis=-1)
        valid = (s0 > 0) & np.all(np.isfinite(data), axis=-1)
        safe = np.where(valid, s0, 1.0)
        norm = data[..., self.scheme.dwi_mask] / safe[..., None]
        return np.clip(norm, *SIGNAL_CLAMP), valid

    def fit_normalized(self, signal):
        return np.asarray(signal, dtype=float) @ self.projection.T

    def fit(self, data):
        norm, valid = self.normalize(data)
        return self.fit_normalized(norm), valid

    @cached_property
    def frt(self):
        return frt_factors(self.cfg.l_max)


def frt_factors(l_max):
    """Funk-Radon eigenvalues 2*pi*P_l(0) for each coefficient."""
    return np.array([2 * np.pi * legendre_at_zero(l) for l in order_array(l_max)])


def fit_signal_sh(signal, scheme, cfg=QBallConfig()):
    """Fit one voxel's signal (all scheme entries, baselines included)."""
    signal = np.asarray(signal, dtype=float)
    if signal.shape != (scheme.n,):
        raise ValidationError(f"signal length {signal.shape} does not match scheme ({scheme.n})")
    model = QBallModel(scheme, cfg)
    coeffs, valid = model.fit(signal)
    if not valid:
        raise ValidationError("invalid voxel: baseline signal S0 <= 0")
    return SHCoefficients(coeffs, cfg.l_max, "signal")


def frt_to_odf(c):
    """Signal coefficients -> dODF coefficients."""
    if not isinstance(c, SHCoefficients) or c.kind != "signal":
        raise ValidationError("frt_to_odf expects signal coefficients")
    return SHCoefficients(c.values * frt_factors(c.l_max), c.l_max, "odf")


def gfa_closed_form(coeffs):
    """sqrt(1 - c_1^2 / sum c_j^2) along the last axis; 0 for zero vectors."""
    coeffs = np.asarray(coeffs, dtype=float)
    total = np.sum(coeffs * coeffs, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(total > 0, coeffs[..., 0] ** 2 / np.where(total > 0, total, 1.0), 1.0)
    return np.sqrt(np.clip(1.0 - ratio, 0.0, 1.0))


def gfa_sampled(samples, weights=None):
    """Tuch's GFA of sampled ODF values (last axis); negatives clamped to 0.

    ``sqrt(n * sum (psi - mean)^2 / ((n - 1) * sum psi^2))``.  With
    ``weights`` (quadrature weights of the sampling points) the sums become
    weighted sums, which removes the bias of non-equal-area samplings such
    as icospheres; equal weights give the plain formula.
    """
    psi = np.clip(np.asarray(samples, dtype=float), 0.0, None)
    n = psi.shape[-1]
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
    mean = psi @ w
    dev = psi - mean[..., None]
    num = n * ((dev * dev) @ w)
    den = (n - 1) * ((psi * psi) @ w)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, np.sqrt(np.clip(num, 0.0, None) / np.where(den > 0, den, 1.0)), 0.0)
    return np.clip(out, 0.0, 1.0)


@lru_cache(maxsize=8)
def _sampling_sphere(level, degree):
    tess = tessellate_sphere(level)
    return tess, tess.quadrature_weights(degree)


def gfa(odf, method="closed_form", tess=None):
    """Generalized fractional anisotropy of dODF coefficients.

    Parameters
    ----------
    odf : SHCoefficients (kind='odf') or ndarray (..., n_coef)
    method : {'closed_form', 'sampled'}
    tess : Tessellation, optional
        Sampling sphere for ``method='sampled'``; level 3 by default.  Samples
        are weighted by the tessellation's quadrature weights.
    """
    if isinstance(odf, SHCoefficients):
        if odf.kind != "odf":
            raise ValidationError("gfa expects ODF coefficients")
        values = odf.values
    else:
        values = np.asarray(odf, dtype=float)
    if method == "closed_form":
        out = gfa_closed_form(values)
    elif method == "sampled":
        l_max = lmax_from_ncoeffs(values.shape[-1])
        if tess is None:
            tess, weights = _sampling_sphere(3, 2 * l_max)
        else:
            weights = tess.quadrature_weights(2 * l_max)
        out = gfa_sampled(eval_sh(values, tess.vertices), weights)
    else:
        raise ValidationError(f"unknown GFA method {method!r}")
    return float(out) if np.ndim(out) == 0 else out


def odf_min_max(samples):
    """Min-max normalization of sampled ODFs, for display only."""
    samples = np.clip(np.asarray(samples, dtype=float), 0.0, None)
    lo = samples.min(axis=-1, keepdims=True)
    hi = samples.max(axis=-1, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (samples - lo) / span


# ---------------------------------------------------------------------------
# fields


@dataclass
class SHField:
    """Coefficient volume (X, Y, Z, n_coef); NaN outside ``mask``."""

    coeffs: np.ndarray
    mask: np.ndarray
    l_max: int
    kind: str = "odf"
    voxel_size: tuple = (2.0, 2.0, 2.0)
    affine: np.ndarray = field(default=None, repr=False)
    lam: float | None = None

    def __post_init__(self):
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if self.affine is None:
            self.affine = np.diag(list(self.voxel_size) + [1.0])
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.coeffs.shape[:3] != self.mask.shape:
            raise ValidationError("coefficient and mask grids differ")
        if self.coeffs.shape[3] != n_coeffs(self.l_max):
            raise ValidationError(f"{self.coeffs.shape[3]} coefficients do not match l_max={self.l_max}")

    @property
    def dims(self):
        return self.mask.shape

    @classmethod
    def from_masked(cls, values, mask, l_max, kind, voxel_size, affine=None, lam=None):
        coeffs = np.full(mask.shape + (values.shape[-1],), np.nan)
        coeffs[mask] = values
        return cls(coeffs, mask, l_max, kind, voxel_size, affine, lam)

    def same_grid(self, other):
        return (
            self.dims == other.dims
            and np.allclose(self.voxel_size, other.voxel_size)
            and self.l_max == other.l_max
        )

    def gfa_map(self):
        out = np.zeros(self.dims)
        out[self.mask] = gfa_closed_form(self.coeffs[self.mask])
        return out


def fit_sh_volume(dwi: DWIVolume, mask=None, cfg=QBallConfig(), odf=True, workers=1, block_size=4096):
    """Voxel-wise Q-ball fit of a DWI volume.

    Voxels with S0 <= 0 or non-finite data are dropped from the output mask.
    Output is identical for any ``workers``.
    """
    if mask is None:
        mask = np.ones(dwi.dims, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != dwi.dims:
        raise ValidationError(f"mask shape {mask.shape} does not match volume {dwi.dims}")
    model = QBallModel(dwi.scheme, cfg)
    vox = dwi.data[mask]
    scale = model.frt if odf else np.ones(n_coeffs(cfg.l_max))

    def work(sl):
        c, ok = model.fit(vox[sl])
        return c * scale, ok

    parts = map_blocks(work, vox.shape[0], workers, block_size)
    if parts:
        values = np.concatenate([p[0] for p in parts])
        ok = np.concatenate([p[1] for p in parts])
    else:
        values = np.zeros((0, n_coeffs(cfg.l_max)))
        ok = np.zeros(0, dtype=bool)
    out_mask = np.zeros(dwi.dims, dtype=bool)
    idx = np.flatnonzero(mask.ravel())[ok]
    out_mask.ravel()[idx] = True
    return SHField.from_masked(
        values[ok], out_mask, cfg.l_max, "odf" if odf else "signal", dwi.voxel_size, dwi.affine, cfg.lam
    )


def signal_field_to_odf(fld):
    if fld.kind != "signal":
        raise ValidationError("field is already an ODF field")
    return SHField(fld.coeffs * frt_factors(fld.l_max), fld.mask, fld.l_max, "odf", fld.voxel_size, fld.affine, fld.lam)


def sample_odf(coeffs, vertices):
    """Evaluate coefficient rows on ``vertices`` (no clamping)."""
    coeffs = np.asarray(coeffs, dtype=float)
    l_max = lmax_from_ncoeffs(coeffs.shape[-1])
    B = real_sh(l_max, *cart2sphere(vertices))
    return coeffs @ B.T
