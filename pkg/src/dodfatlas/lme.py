"""Random-intercept linear mixed-effects models of SH coefficients over age.

For one coefficient series ``y`` observed at ages ``t`` on subjects ``s``::

    y = beta0 + beta1 * t + alpha_s + eps,   alpha ~ N(0, delta2), eps ~ N(0, sigma2)

fitted by maximum likelihood.  With ``rho = delta2 / sigma2`` the covariance
of subject ``s`` is ``sigma2 * (I + rho * 11^T)`` whose inverse is
``(I - w_s 11^T) / sigma2`` with ``w_s = rho / (1 + n_s rho)``.  For fixed
``rho`` the GLS estimate of beta and the ML estimate of sigma2 are closed
form, so only ``rho`` is searched numerically.  Everything below is
expressed in per-subject sums, which lets one design be fitted to many
series at once (all voxels and coefficients share the sessions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDesignError, ValidationError
from .parallel import map_blocks
from .qball import SHField
from .sphere import n_coeffs

RHO_MAX = 1e3
RHO_TOL = 1e-10
_GRID = np.concatenate([[0.0], np.logspace(-5, 3, 49)])
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0

DEFAULT_GUARD = (3.0 - 6.0, 36.0 + 6.0)

REASON_OK = 0
REASON_OUTSIDE = 1
REASON_NONFINITE = 2
REASON_CODES = {REASON_OK: "ok", REASON_OUTSIDE: "outside-input-mask", REASON_NONFINITE: "non-finite-coefficients"}


@dataclass
class LMEFit:
    beta0: float
    beta1: float
    sigma2: float
    delta2: float
    alpha: dict
    loglik: float
    n_obs: int
    n_subjects: int
    se_beta0: float = float("nan")
    se_beta1: float = float("nan")
    rho: float = 0.0
    method: str = "ML"

    def predict(self, t, subject=None):
        return predict(self, t, subject)


class RandomInterceptDesign:
    """Sessions (subject labels and ages) shared by many response series."""

    def __init__(self, subjects, ages):
        subjects = list(subjects)
        ages = np.asarray(ages, dtype=float)
        if len(subjects) != len(ages):
            raise ValidationError(f"{len(subjects)} subject labels for {len(ages)} ages")
        if np.any(~np.isfinite(ages)):
            raise ValidationError("non-finite age")
        if np.any(ages < 0):
            raise ValidationError("negative age")
        labels = sorted(set(subjects), key=str)
        lookup = {s: k for k, s in enumerate(labels)}
        self.labels = labels
        self.codes = np.array([lookup[s] for s in subjects], dtype=int)
        self.ages = ages
        self.N = len(ages)
        self.S = len(labels)
        self.t_mean = float(ages.mean()) if self.N else 0.0
        tc = ages - self.t_mean
        self.tc = tc
        self.G = np.zeros((self.N, self.S))
        self.G[np.arange(self.N), self.codes] = 1.0
        self.n_s = self.G.sum(axis=0)
        self.T_s = tc @ self.G
        self.sum_t2 = float(tc @ tc)
        self.sum_t = float(tc.sum())

    def problems(self):
        out = []
        if self.S < 2:
            out.append(f"need >= 2 subjects, got {self.S}")
        if self.N < 3:
            out.append(f"need >= 3 observations, got {self.N}")
        if len(np.unique(self.ages)) < 2:
            out.append("need >= 2 distinct ages")
        if self.S and self.n_s.max() < 2:
            out.append("every subject has a single observation; variance components are not identifiable")
        return out

    # -- batched core ------------------------------------------------------

    def _stats(self, Y):
        """Centered sufficient statistics of response rows Y (V, N).

        Row-wise reductions only (no BLAS products), so a row's statistics
        are bitwise independent of the other rows in the batch.
        """
        ybar = Y.mean(axis=1)
        Yc = Y - ybar[:, None]
        return {
            "ybar": ybar,
            "Ys": np.stack([Yc[:, self.codes == k].sum(axis=1) for k in range(self.S)], axis=1),
            "sy": Yc.sum(axis=1),
            "sty": np.sum(Yc * self.tc, axis=1),
            "yy": np.einsum("vn,vn->v", Yc, Yc),
        }

    def _profile(self, st, rho):
        """GLS beta (centered), r'Wr and the -2 profiled log-likelihood at rho (V,)."""
        rho = np.asarray(rho, dtype=float)
        w = rho[:, None] / (1.0 + rho[:, None] * self.n_s[None, :])
        n, T, Ys = self.n_s, self.T_s, st["Ys"]
        a00 = self.N - np.sum(w * (n * n), axis=1)
        a01 = self.sum_t - np.sum(w * (n * T), axis=1)
        a11 = self.sum_t2 - np.sum(w * (T * T), axis=1)
        b0 = st["sy"] - np.sum(w * (n * Ys), axis=1)
        b1 = st["sty"] - np.sum(w * (T * Ys), axis=1)
        yWy = st["yy"] - np.sum(w * Ys * Ys, axis=1)
        det = a00 * a11 - a01 * a01
        beta0 = (a11 * b0 - a01 * b1) / det
        beta1 = (a00 * b1 - a01 * b0) / det
        q = yWy - beta0 * b0 - beta1 * b1
        q = np.maximum(q, 0.0)
        sigma2 = q / self.N
        logdet = np.log1p(rho[:, None] * n[None, :]).sum(axis=1)
        obj = self.N * np.log(2 * np.pi * np.maximum(sigma2, 1e-300)) + logdet + self.N
        return {"beta0": beta0, "beta1": beta1, "sigma2": sigma2, "obj": obj, "a": (a00, a01, a11), "w": w}

    def _search(self, st):
        V = st["yy"].shape[0]
        grid_obj = np.stack([self._profile(st, np.full(V, r))["obj"] for r in _GRID], axis=1)
        k = np.argmin(grid_obj, axis=1)
        lo = _GRID[np.maximum(k - 1, 0)]
        hi = _GRID[np.minimum(k + 1, len(_GRID) - 1)]
        x1 = hi - _INVPHI * (hi - lo)
        x2 = lo + _INVPHI * (hi - lo)
        f1 = self._profile(st, x1)["obj"]
        f2 = self._profile(st, x2)["obj"]
        for _ in range(200):
            active = hi - lo > RHO_TOL
            if not active.any():
                break
            # converged rows stay frozen, so a row's result does not depend on its batch
            left = (f1 <= f2) & active
            right = (f1 > f2) & active
            hi = np.where(left, x2, hi)
            lo = np.where(right, x1, lo)
            nx1 = np.where(left, hi - _INVPHI * (hi - lo), np.where(right, x2, x1))
            nx2 = np.where(left, x1, np.where(right, lo + _INVPHI * (hi - lo), x2))
            f_new = self._profile(st, np.where(left, nx1, nx2))["obj"]
            f1, f2 = np.where(left, f_new, np.where(right, f2, f1)), np.where(left, f1, np.where(right, f_new, f2))
            x1, x2 = nx1, nx2
        rho = 0.5 * (lo + hi)
        f = self._profile(st, rho)["obj"]
        # boundaries and the best grid point are always candidates
        cands = [
            (rho, f),
            (_GRID[k], grid_obj[np.arange(V), k]),
            (np.zeros(V), grid_obj[:, 0]),
        ]
        best_rho, best_f = cands[0]
        for r, fr in cands[1:]:
            better = fr <= best_f
            best_rho = np.where(better, r, best_rho)
            best_f = np.where(better, fr, best_f)
        return best_rho

    def fit_batch(self, Y):
        """Fit every row of ``Y`` (V, N).

        Returns a dict of (V,) arrays ``beta0, beta1, sigma2, delta2, rho,
        loglik, se_beta0, se_beta1`` and ``alpha`` (V, S).
        """
        problems = self.problems()
        if problems:
            raise DegenerateDesignError("; ".join(problems))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        st = self._stats(Y)
        rho = self._search(st)
        return self._finish(st, rho)

    def _finish(self, st, rho):
        p = self._profile(st, rho)
        a00, a01, a11 = p["a"]
        det = a00 * a11 - a01 * a01
        sigma2 = p["sigma2"]
        v00 = sigma2 * a11 / det
        v01 = -sigma2 * a01 / det
        v11 = sigma2 * a00 / det
        tm = self.t_mean
        beta1 = p["beta1"]
        beta0 = p["beta0"] + st["ybar"] - beta1 * tm
        # BLUP: w_s * sum of marginal residuals of subject s
        rsum = st["Ys"] - p["beta0"][:, None] * self.n_s[None, :] - beta1[:, None] * self.T_s[None, :]
        alpha = p["w"] * rsum
        return {
            "beta0": beta0,
            "beta1": beta1,
            "sigma2": sigma2,
            "delta2": rho * sigma2,
            "rho": rho,
            "loglik": -0.5 * p["obj"],
            "se_beta0": np.sqrt(np.maximum(v00 - 2 * tm * v01 + tm * tm * v11, 0.0)),
            "se_beta1": np.sqrt(np.maximum(v11, 0.0)),
            "alpha": alpha,
        }

    def ols_batch(self, Y):
        """Ordinary least squares (rho = 0) for every row."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        st = self._stats(Y)
        return self._finish(st, np.zeros(Y.shape[0]))

    def loglik(self, Y, beta0, beta1, sigma2, delta2):
        """Exact Gaussian log-likelihood of rows of Y at given parameters."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        out = np.zeros(Y.shape[0])
        for v in range(Y.shape[0]):
            r = Y[v] - beta0[v] - beta1[v] * self.ages
            total = 0.0
            for s in range(self.S):
                rs = r[self.codes == s]
                cov = sigma2[v] * np.eye(rs.size) + delta2[v] * np.ones((rs.size, rs.size))
                sign, logdet = np.linalg.slogdet(cov)
                total += -0.5 * (rs.size * math.log(2 * math.pi) + logdet + rs @ np.linalg.solve(cov, rs))
            out[v] = total
        return out


def _to_fit(res, design, i=0):
    alpha = {lab: float(res["alpha"][i, k]) for k, lab in enumerate(design.labels)}
    return LMEFit(
        beta0=float(res["beta0"][i]),
        beta1=float(res["beta1"][i]),
        sigma2=float(res["sigma2"][i]),
        delta2=float(res["delta2"][i]),
        alpha=alpha,
        loglik=float(res["loglik"][i]),
        n_obs=design.N,
        n_subjects=design.S,
        se_beta0=float(res["se_beta0"][i]),
        se_beta1=float(res["se_beta1"][i]),
        rho=float(res["rho"][i]),
    )


def fit_lme(samples=None, *, subjects=None, ages=None, values=None):
    """Maximum-likelihood random-intercept fit of one coefficient series.

    Parameters
    ----------
    samples : iterable of (subject_id, age, value), optional
        Alternatively pass ``subjects``, ``ages`` and ``values`` separately.

    Returns
    -------
    LMEFit

    Raises
    ------
    DegenerateDesignError
        Too few subjects, observations or distinct ages, or only one
        observation per subject.  ``err.fallback`` is the OLS fit with
        ``delta2 = 0``.
    """
    if samples is not None:
        samples = list(samples)
        subjects = [s[0] for s in samples]
        ages = [s[1] for s in samples]
        values = [s[2] for s in samples]
    design = RandomInterceptDesign(subjects, ages)
    y = np.asarray(values, dtype=float)[None, :]
    if y.shape[1] != design.N:
        raise ValidationError("values and ages differ in length")
    if np.any(~np.isfinite(y)):
        raise ValidationError("non-finite observation")
    problems = design.problems()
    if problems:
        fallback = None
        if design.N >= 2 and len(np.unique(design.ages)) >= 2:
            fallback = _to_fit(design.ols_batch(y), design)
            fallback.delta2 = 0.0
            fallback.alpha = {lab: 0.0 for lab in design.labels}
            fallback.method = "OLS"
        raise DegenerateDesignError("; ".join(problems), fallback)
    return _to_fit(design.fit_batch(y), design)


def predict(fit, t, subject=None):
    """Population prediction at age ``t``; adds the subject's intercept if given."""
    value = fit.beta0 + fit.beta1 * np.asarray(t, dtype=float)
    if subject is not None:
        if subject not in fit.alpha:
            raise ValidationError(f"unknown subject {subject!r}")
        value = value + fit.alpha[subject]
    return float(value) if np.ndim(value) == 0 else value


def r2_frobenius(observed, fitted):
    """1 - ||C_obs - C_fit||_F^2 / ||C_obs - mean||_F^2 over sessions x coefficients.

    The mean is the per-coefficient grand mean across sessions.  Constant
    observations (0/0) give 0.  Leading batch axes are allowed:
    (..., sessions, n_coef).
    """
    obs = np.asarray(observed, dtype=float)
    fit = np.asarray(fitted, dtype=float)
    if obs.shape != fit.shape:
        raise ValidationError(f"observed {obs.shape} and fitted {fit.shape} differ")
    if obs.ndim < 2 or obs.shape[-2] == 0:
        raise ValidationError("empty session set")
    res = np.sum((obs - fit) ** 2, axis=(-2, -1))
    tot = np.sum((obs - obs.mean(axis=-2, keepdims=True)) ** 2, axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(tot > 0, 1.0 - res / np.where(tot > 0, tot, 1.0), 0.0)
    return float(r2) if r2.ndim == 0 else r2


# ---------------------------------------------------------------------------
# atlas


@dataclass
class LMEAtlas:
    """Per-voxel, per-coefficient fitted parameters; arrays are (X, Y, Z, n_coef)."""

    mask: np.ndarray
    beta0: np.ndarray
    beta1: np.ndarray
    sigma2: np.ndarray
    delta2: np.ndarray
    alpha: np.ndarray  # (X, Y, Z, n_coef, n_subjects)
    subjects: list
    l_max: int
    voxel_size: tuple = (2.0, 2.0, 2.0)
    affine: np.ndarray = field(default=None, repr=False)
    reasons: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if self.affine is None:
            self.affine = np.diag(list(self.voxel_size) + [1.0])
        if self.beta0.shape[-1] != n_coeffs(self.l_max):
            raise ValidationError("fit count per voxel does not match l_max")
        self.meta.setdefault("model", "random-intercept LME, ML (profiled)")
        self.meta.setdefault("guard", list(DEFAULT_GUARD))

    @property
    def dims(self):
        return self.mask.shape

    def fit_at(self, ijk, j):
        """The :class:`LMEFit` of coefficient ``j`` (0-based) at voxel ``ijk``."""
        ijk = tuple(ijk)
        if not self.mask[ijk]:
            raise ValidationError(f"voxel {ijk} is not in the atlas mask")
        return LMEFit(
            beta0=float(self.beta0[ijk][j]),
            beta1=float(self.beta1[ijk][j]),
            sigma2=float(self.sigma2[ijk][j]),
            delta2=float(self.delta2[ijk][j]),
            alpha={s: float(self.alpha[ijk][j, k]) for k, s in enumerate(self.subjects)},
            loglik=float("nan"),
            n_obs=int(self.meta.get("n_obs", 0)),
            n_subjects=len(self.subjects),
        )


@dataclass
class AtlasFitResult:
    atlas: LMEAtlas
    r2: np.ndarray
    se_beta1: np.ndarray = None


def fit_atlas_field(fields, subjects, ages, workers=1, block_size=512, guard=DEFAULT_GUARD):
    """Fit 28 independent LMEs at every voxel of a set of registered ODF fields.

    Parameters
    ----------
    fields : list of SHField
        One per session, all on the same grid with the same ``l_max``.
    subjects, ages : sequences
        Subject label and age (months) of each field.

    Returns
    -------
    AtlasFitResult
        The atlas and the marginal Frobenius R^2 volume (NaN outside mask).
    """
    fields = list(fields)
    if not fields:
        raise ValidationError("no fields to fit")
    if len(fields) != len(subjects) or len(fields) != len(ages):
        raise ValidationError("fields, subjects and ages differ in length")
    ref = fields[0]
    for k, f in enumerate(fields[1:], start=1):
        if not ref.same_grid(f) or f.kind != ref.kind:
            raise ValidationError(f"field {k} is on a different grid, order or kind than field 0")
    design = RandomInterceptDesign(subjects, ages)
    problems = design.problems()
    if problems:
        raise DegenerateDesignError("; ".join(problems))

    inter = np.logical_and.reduce([f.mask for f in fields])
    stack = np.stack([f.coeffs[inter] for f in fields], axis=1)  # (V, N, n_coef)
    finite = np.all(np.isfinite(stack), axis=(1, 2))
    reasons = np.full(ref.dims, REASON_OUTSIDE, dtype=np.int16)
    vox_idx = np.flatnonzero(inter.ravel())
    reasons.ravel()[vox_idx[~finite]] = REASON_NONFINITE
    reasons.ravel()[vox_idx[finite]] = REASON_OK
    mask = reasons == REASON_OK
    data = stack[finite]
    V, N, C = data.shape

    def work(sl):
        block = data[sl]
        series = block.transpose(0, 2, 1).reshape(-1, N)
        res = design.fit_batch(series)
        out = {k: v.reshape(block.shape[0], C, *v.shape[1:]) for k, v in res.items()}
        fitted = out["beta0"][:, None, :] + out["beta1"][:, None, :] * design.ages[None, :, None]
        out["r2"] = np.atleast_1d(r2_frobenius(block, fitted))
        return out

    parts = map_blocks(work, V, workers, block_size)

    def gather(key, extra=()):
        arr = np.full(ref.dims + (C,) + extra, np.nan)
        if parts:
            arr[mask] = np.concatenate([p[key] for p in parts])
        return arr

    r2 = np.full(ref.dims, np.nan)
    if parts:
        r2[mask] = np.concatenate([p["r2"] for p in parts])
    atlas = LMEAtlas(
        mask=mask,
        beta0=gather("beta0"),
        beta1=gather("beta1"),
        sigma2=gather("sigma2"),
        delta2=gather("delta2"),
        alpha=gather("alpha", (design.S,)),
        subjects=list(design.labels),
        l_max=ref.l_max,
        voxel_size=ref.voxel_size,
        affine=ref.affine,
        reasons=reasons,
        meta={
            "model": "random-intercept LME, ML (profiled)",
            "rho_bracket": [0.0, RHO_MAX],
            "rho_tol": RHO_TOL,
            "guard": [float(guard[0]), float(guard[1])],
            "lambda": ref.lam,
            "n_obs": design.N,
            "ages": [float(a) for a in design.ages],
            "session_subjects": [str(s) for s in subjects],
        },
    )
    return AtlasFitResult(atlas, r2, gather("se_beta1"))


def _check_guard(atlas, t, allow_extrapolation):
    lo, hi = atlas.meta.get("guard", DEFAULT_GUARD)
    if not allow_extrapolation and not (lo <= t <= hi):
        raise ValidationError(f"age {t} outside the atlas guard [{lo}, {hi}] months")


def eval_atlas_at_age(atlas, t, allow_extrapolation=False, subject=None):
    """Population (or subject-specific) dODF field at age ``t`` months."""
    t = float(t)
    _check_guard(atlas, t, allow_extrapolation)
    coeffs = atlas.beta0 + atlas.beta1 * t
    if subject is not None:
        if subject not in atlas.subjects:
            raise ValidationError(f"unknown subject {subject!r}")
        coeffs = coeffs + atlas.alpha[..., atlas.subjects.index(subject)]
    coeffs = np.where(atlas.mask[..., None], coeffs, np.nan)
    return SHField(coeffs, atlas.mask.copy(), atlas.l_max, "odf", atlas.voxel_size, atlas.affine, atlas.meta.get("lambda"))
