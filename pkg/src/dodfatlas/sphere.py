"""Real symmetric spherical harmonics and sphere tessellations.

Coefficients use a single linear index ``j`` (1-based in the math,
0-based in arrays) over even orders only::

    j = (l**2 + l + 2) / 2 + m,   l = 0, 2, ..., l_max,  -l <= m <= l

so ``l_max=6`` gives 28 coefficients.  The real basis is

    Y_j = sqrt(2) * Re(Y_l^|m|)                 m < 0
    Y_j = Y_l^0                                 m = 0
    Y_j = sqrt(2) * (-1)**(m+1) * Im(Y_l^m)     m > 0

built from the complex harmonics with the Condon-Shortley phase.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ValidationError

MAX_LMAX = 16


# ---------------------------------------------------------------------------
# coordinates


def normalize_dirs(dirs):
    """Return ``dirs`` as an (n, 3) float array of unit vectors."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    if dirs.shape[-1] != 3:
        raise ValidationError(f"directions must have 3 components, got shape {dirs.shape}")
    norms = np.linalg.norm(dirs, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("zero-length direction")
    return dirs / norms


def cart2sphere(dirs):
    """Unit vectors -> (theta, phi); theta in [0, pi], phi in [0, 2 pi).

    At the poles phi is set to 0.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(rho, z)
    phi = np.where(rho == 0, 0.0, np.arctan2(y, x))
    phi = np.where(phi < 0, phi + 2 * np.pi, phi)
    # arctan2 can return exactly 2pi after the shift for tiny negative y
    phi = np.where(phi >= 2 * np.pi, 0.0, phi)
    return theta, phi


def sphere2cart(theta, phi):
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


# ---------------------------------------------------------------------------
# Legendre functions


def _legendre_table(l_max, x):
    """All P_l^m(x) for 0 <= m <= l <= l_max, shape (l_max+1, l_max+1, n).

    Recurrence in m along the diagonal, then upward in l.  Includes the
    Condon-Shortley phase.
    """
    x = np.asarray(x, dtype=float).ravel()
    table = np.zeros((l_max + 1, l_max + 1, x.size))
    somx2 = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    pmm = np.ones_like(x)
    for m in range(l_max + 1):
        if m > 0:
            pmm = -(2 * m - 1) * somx2 * pmm
        table[m, m] = pmm
        if m + 1 <= l_max:
            table[m + 1, m] = x * (2 * m + 1) * pmm
        for l in range(m + 2, l_max + 1):
            table[l, m] = ((2 * l - 1) * x * table[l - 1, m] - (l + m - 1) * table[l - 2, m]) / (l - m)
    return table


def assoc_legendre(l, m, x):
    """Associated Legendre function P_l^m(x) with Condon-Shortley phase.

    Parameters
    ----------
    l, m : int
        Degree and order, ``0 <= m <= l``.
    x : float or array_like
        Argument in [-1, 1].

    Returns
    -------
    float or ndarray
        Same shape as ``x``.
    """
    l, m = int(l), int(m)
    if l < 0 or m < 0 or m > l:
        raise ValidationError(f"need 0 <= m <= l, got l={l}, m={m}")
    xa = np.asarray(x, dtype=float)
    if np.any(np.abs(xa) > 1.0) or np.any(~np.isfinite(xa)):
        raise ValidationError("assoc_legendre argument outside [-1, 1]")
    values = _legendre_table(l, xa)[l, m].reshape(xa.shape)
    return float(values) if values.ndim == 0 else values


def legendre_at_zero(l):
    """P_l(0) for integer l >= 0."""
    if l % 2:
        return 0.0
    k = l // 2
    return (-1) ** k * math.comb(l, k) / 2.0**l


# ---------------------------------------------------------------------------
# indexing


@dataclass(frozen=True)
class SHIndex:
    l: int
    m: int
    j: int  # 1-based


def n_coeffs(l_max):
    return (l_max + 1) * (l_max + 2) // 2


def _check_lmax(l_max):
    if int(l_max) != l_max or l_max < 0 or l_max % 2 or l_max > MAX_LMAX:
        raise ValidationError(f"l_max must be an even integer in [0, {MAX_LMAX}], got {l_max}")
    return int(l_max)


@lru_cache(maxsize=None)
def sh_index_map(l_max):
    """Ordered tuple of :class:`SHIndex` covering every even l <= l_max."""
    l_max = _check_lmax(l_max)
    out = []
    for l in range(0, l_max + 1, 2):
        for m in range(-l, l + 1):
            out.append(SHIndex(l, m, (l * l + l + 2) // 2 + m))
    return tuple(out)


def index_to_lm(j):
    """Invert the 1-based linear index into (l, m)."""
    j = int(j)
    if j < 1:
        raise ValidationError(f"coefficient index must be >= 1, got {j}")
    l = 0
    while n_coeffs(l) < j:
        l += 2
    m = j - (l * l + l + 2) // 2
    return l, m


def order_array(l_max):
    """Order l of every coefficient, as an int array of length n_coeffs."""
    return np.array([ix.l for ix in sh_index_map(l_max)], dtype=int)


def lmax_from_ncoeffs(n):
    l_max = 0
    while n_coeffs(l_max) < n:
        l_max += 2
    if n_coeffs(l_max) != n:
        raise ValidationError(f"{n} is not a valid even-order coefficient count")
    return l_max


# ---------------------------------------------------------------------------
# basis


def real_sh(l_max, theta, phi):
    """Real symmetric basis sampled at (theta, phi); shape (n, n_coeffs)."""
    l_max = _check_lmax(l_max)
    theta = np.asarray(theta, dtype=float).ravel()
    phi = np.asarray(phi, dtype=float).ravel()
    plm = _legendre_table(l_max, np.cos(theta))
    out = np.empty((theta.size, n_coeffs(l_max)))
    sqrt2 = math.sqrt(2.0)
    for col, ix in enumerate(sh_index_map(l_max)):
        l, m = ix.l, ix.m
        am = abs(m)
        norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am))
        p = norm * plm[l, am]
        if m < 0:
            out[:, col] = sqrt2 * p * np.cos(am * phi)
        elif m == 0:
            out[:, col] = p
        else:
            out[:, col] = sqrt2 * (-1) ** (m + 1) * p * np.sin(m * phi)
    return out


def laplace_beltrami_diag(l_max):
    """Penalty l^2 (l+1)^2 per coefficient."""
    l = order_array(l_max)
    return (l * l * (l + 1) * (l + 1)).astype(float)


@dataclass
class BasisMatrix:
    entries: np.ndarray
    dirs: np.ndarray
    l_max: int
    lb_diag: np.ndarray
    condition: float
    rank_deficient: bool = False

    @property
    def n_coef(self):
        return self.entries.shape[1]


def build_basis(dirs, l_max=6):
    """Sample the real basis at ``dirs``.

    Fewer directions than coefficients is allowed (regularized fits still
    work) but flagged with ``rank_deficient`` and a warning.
    """
    dirs = normalize_dirs(dirs)
    theta, phi = cart2sphere(dirs)
    entries = real_sh(l_max, theta, phi)
    rank_deficient = dirs.shape[0] < entries.shape[1]
    if rank_deficient:
        warnings.warn(
            f"{dirs.shape[0]} directions for {entries.shape[1]} coefficients; "
            "unregularized fits will be rank-deficient",
            stacklevel=2,
        )
    cond = float(np.linalg.cond(entries))
    return BasisMatrix(entries, dirs, l_max, laplace_beltrami_diag(l_max), cond, rank_deficient)


def eval_sh(coeffs, dirs, l_max=None):
    """Synthesize sums of basis functions at ``dirs``.

    ``coeffs`` may carry leading batch axes: (..., n_coef) -> (..., n_dirs).
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if l_max is None:
        l_max = lmax_from_ncoeffs(coeffs.shape[-1])
    if coeffs.shape[-1] != n_coeffs(l_max):
        raise ValidationError(f"expected {n_coeffs(l_max)} coefficients for l_max={l_max}, got {coeffs.shape[-1]}")
    dirs = normalize_dirs(dirs)
    B = real_sh(l_max, *cart2sphere(dirs))
    return coeffs @ B.T


# ---------------------------------------------------------------------------
# tessellation

_PHI = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=float,
)
_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


@dataclass
class Tessellation:
    vertices: np.ndarray
    faces: np.ndarray
    neighbors: list = field(repr=False)
    level: int = 0

    @property
    def n(self):
        return self.vertices.shape[0]

    def neighbor_array(self):
        """Neighbors padded to a rectangle with self-indices."""
        width = max(len(nb) for nb in self.neighbors)
        out = np.empty((self.n, width), dtype=int)
        for i, nb in enumerate(self.neighbors):
            out[i, : len(nb)] = nb
            out[i, len(nb):] = i
        return out

    def hemisphere(self):
        """Indices of one vertex from each antipodal pair."""
        return hemisphere_indices(self.vertices)

    def quadrature_weights(self, degree=12):
        return quadrature_weights(self.vertices, degree)


def hemisphere_indices(vertices, tol=1e-9):
    v = np.asarray(vertices)
    keep = (v[:, 2] > tol) | ((np.abs(v[:, 2]) <= tol) & (v[:, 1] > tol)) | (
        (np.abs(v[:, 2]) <= tol) & (np.abs(v[:, 1]) <= tol) & (v[:, 0] > 0)
    )
    return np.flatnonzero(keep)


@lru_cache(maxsize=8)
def _tessellate(level):
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = list(_ICO_FACES)
    for _ in range(level):
        cache = {}
        new_faces = []

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                mid = verts[a] + verts[b]
                verts.append(mid / np.linalg.norm(mid))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    vertices = np.array(verts)
    faces = np.array(faces, dtype=int)
    nbrs = [set() for _ in range(len(vertices))]
    for a, b, c in faces:
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
    neighbors = [np.array(sorted(s), dtype=int) for s in nbrs]
    return vertices, faces, neighbors


def tessellate_sphere(level=3):
    """Subdivided icosahedron with ``10 * 4**level + 2`` unit vertices."""
    if int(level) != level or level < 0 or level > 6:
        raise ValidationError(f"tessellation level must be an integer in [0, 6], got {level}")
    vertices, faces, neighbors = _tessellate(int(level))
    return Tessellation(vertices.copy(), faces.copy(), [n.copy() for n in neighbors], int(level))


def _monomial_sphere_integral(a, b, c):
    # integral of x^a y^b z^c over the unit sphere
    if a % 2 or b % 2 or c % 2:
        return 0.0
    g = math.lgamma
    return 2.0 * math.exp(g((a + 1) / 2) + g((b + 1) / 2) + g((c + 1) / 2) - g((a + b + c + 3) / 2))


def quadrature_weights(vertices, degree=12):
    """Weights integrating every polynomial of total degree <= ``degree``.

    Homogeneous monomials of degree ``degree`` and ``degree - 1`` span all
    harmonics up to ``degree`` without redundancy on the sphere; the weights
    are the minimum-norm correction of uniform weights that integrates each
    of them exactly.
    """
    v = np.asarray(vertices, dtype=float)
    rows, moments = [], []
    for d in (degree, degree - 1):
        if d < 0:
            continue
        for a in range(d + 1):
            for b in range(d - a + 1):
                c = d - a - b
                rows.append(v[:, 0] ** a * v[:, 1] ** b * v[:, 2] ** c)
                moments.append(_monomial_sphere_integral(a, b, c))
    A = np.array(rows)
    m = np.array(moments)
    w0 = np.full(v.shape[0], 4 * np.pi / v.shape[0])
    delta, *_ = np.linalg.lstsq(A, m - A @ w0, rcond=None)
    return w0 + delta


# ---------------------------------------------------------------------------
# acquisition directions


def half_sphere_directions(n):
    """Deterministic, well-spread ``n`` directions on the z >= 0 hemisphere.

    Fibonacci lattice on the half sphere; used as the default single-shell
    HARDI protocol (64 directions).
    """
    i = np.arange(n, dtype=float)
    z = 1.0 - (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    golden = np.pi * (3.0 - math.sqrt(5.0))
    phi = i * golden
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def angle_between(u, v, antipodal=True):
    """Angle in degrees between unit vectors (axes if ``antipodal``)."""
    c = np.sum(np.asarray(u) * np.asarray(v), axis=-1)
    if antipodal:
        c = np.abs(c)
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def random_directions(n, rng):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def rotation_matrix(axis, angle):
    """Rodrigues rotation by ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
