"""ODF peak extraction and deterministic peak-following tractography."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError
from .parallel import map_blocks
from .qball import SHCoefficients, SHField
from .sphere import cart2sphere, lmax_from_ncoeffs, real_sh, tessellate_sphere

MAX_PEAKS = 3
TERMINATION_REASONS = ("angle", "mask", "gfa", "length", "boundary")


@dataclass
class Peaks:
    """Peaks of one voxel: unit directions (k, 3) and amplitudes (k,)."""

    directions: np.ndarray
    amplitudes: np.ndarray

    def __len__(self):
        return len(self.amplitudes)


def _tangent_frame(v):
    helper = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(v, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(v, e1)


class PeakFinder:
    """Reusable peak extraction on a fixed tessellation.

    Amplitudes are measured above the ODF minimum, so the relative threshold
    ignores the isotropic floor of Q-ball ODFs.  Each discrete maximum is
    refined by fitting a quadratic over its one-ring in the tangent plane.
    """

    def __init__(self, l_max=6, tess=None, relative_threshold=0.5, min_separation=25.0):
        self.tess = tess if tess is not None else tessellate_sphere(3)
        self.l_max = l_max
        self.relative_threshold = relative_threshold
        self.min_separation = min_separation
        verts = self.tess.vertices
        self.B = real_sh(l_max, *cart2sphere(verts))
        self.nbr = self.tess.neighbor_array()
        self._frames = []
        self._fits = []
        for i, v in enumerate(verts):
            e1, e2 = _tangent_frame(v)
            ring = np.concatenate([[i], self.tess.neighbors[i]])
            p = verts[ring]
            x, y = p @ e1, p @ e2
            M = np.column_stack([np.ones_like(x), x, y, x * x, x * y, y * y])
            self._frames.append((e1, e2, ring, np.max(np.hypot(x, y))))
            self._fits.append(np.linalg.pinv(M))

    def sample(self, coeffs):
        return np.clip(np.asarray(coeffs, dtype=float) @ self.B.T, 0.0, None)

    def _refine(self, i, psi, coeffs):
        e1, e2, ring, radius = self._frames[i]
        a, bx, by, cxx, cxy, cyy = self._fits[i] @ psi[ring]
        H = np.array([[2 * cxx, cxy], [cxy, 2 * cyy]])
        v = self.tess.vertices[i]
        if np.linalg.det(H) > 0 and H[0, 0] < 0:
            step = np.linalg.solve(H, [-bx, -by])
            if np.hypot(*step) <= radius:
                w = v + step[0] * e1 + step[1] * e2
                w /= np.linalg.norm(w)
                amp = float(np.clip(coeffs @ real_sh(self.l_max, *cart2sphere(w[None]))[0], 0.0, None))
                if amp >= psi[i]:
                    return w, amp
        return v.copy(), float(psi[i])

    def find(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        psi = self.sample(coeffs)
        lo, hi = psi.min(), psi.max()
        if hi <= 0 or hi - lo <= 1e-8 * hi:
            return Peaks(np.zeros((0, 3)), np.zeros(0))
        nb = psi[self.nbr]
        is_max = (psi >= nb.max(axis=1)) & (psi > nb.min(axis=1))
        cand = np.flatnonzero(is_max)
        cand = cand[np.argsort(-psi[cand], kind="stable")]
        dirs, amps = [], []
        for i in cand:
            w, amp = self._refine(i, psi, coeffs)
            if amp - lo < self.relative_threshold * (amps[0] - lo if amps else amp - lo):
                continue
            if any(abs(np.dot(w, d)) > math.cos(math.radians(self.min_separation)) for d in dirs):
                continue
            dirs.append(w)
            amps.append(amp)
            if len(dirs) == MAX_PEAKS:
                break
        # canonical hemisphere (axes are sign-free)
        out = np.array(dirs)
        flip = (out[:, 2] < 0) | ((out[:, 2] == 0) & (out[:, 1] < 0))
        out[flip] *= -1
        amps_arr = np.array(amps) - lo
        order = np.argsort(-amps_arr, kind="stable")
        return Peaks(out[order], amps_arr[order])


def find_peaks(odf, tess=None, relative_threshold=0.5, min_separation=25.0):
    """Peaks of one dODF, at most three, sorted by amplitude (descending)."""
    if isinstance(odf, SHCoefficients):
        if odf.kind != "odf":
            raise ValidationError("find_peaks expects ODF coefficients")
        values, l_max = odf.values, odf.l_max
    else:
        values = np.asarray(odf, dtype=float)
        l_max = lmax_from_ncoeffs(values.shape[-1])
    if tess is None:
        finder = _default_finder(l_max, relative_threshold, min_separation)
    else:
        finder = PeakFinder(l_max, tess, relative_threshold, min_separation)
    return finder.find(values)


@lru_cache(maxsize=8)
def _default_finder(l_max, relative_threshold, min_separation):
    return PeakFinder(l_max, None, relative_threshold, min_separation)


# ---------------------------------------------------------------------------
# tracking


@dataclass(frozen=True)
class TrackingParams:
    step_size: float = 1.0
    max_angle: float = 30.0
    gfa_threshold: float = 0.1
    max_length: float = 300.0
    seeds_per_voxel: int = 1
    min_length: float = 10.0
    seed: int = 0
    relative_threshold: float = 0.5
    min_separation: float = 25.0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValidationError(f"step_size must be > 0, got {self.step_size}")
        if not 0 < self.max_angle < 90:
            raise ValidationError(f"max_angle must lie in (0, 90), got {self.max_angle}")
        if self.max_length <= 0 or self.seeds_per_voxel < 1 or self.min_length < 0:
            raise ValidationError("max_length > 0, seeds_per_voxel >= 1 and min_length >= 0 are required")


@dataclass
class Streamline:
    """Points in mm, ordered from the backward end to the forward end.

    ``reasons`` holds the termination reason of the (backward, forward)
    halves; ``reason`` is the forward one.  A rejected seed gives an empty
    streamline with the same reason at both ends.
    """

    points: np.ndarray
    reasons: tuple
    seed_index: int = -1

    @property
    def reason(self):
        return self.reasons[1]

    def __len__(self):
        return len(self.points)

    @property
    def length(self):
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass
class PeakField:
    """Per-voxel peaks of an ODF field, padded to three directions."""

    directions: np.ndarray  # (X, Y, Z, 3, 3)
    counts: np.ndarray  # (X, Y, Z)

    @classmethod
    def from_field(cls, fld: SHField, relative_threshold=0.5, min_separation=25.0, workers=1, block_size=1024):
        if fld.kind != "odf":
            raise ValidationError("tracking needs an ODF field")
        finder = PeakFinder(fld.l_max, None, relative_threshold, min_separation)
        vox = fld.coeffs[fld.mask]

        def work(sl):
            out = np.zeros((sl.stop - sl.start, MAX_PEAKS, 3))
            cnt = np.zeros(sl.stop - sl.start, dtype=np.int8)
            for i, c in enumerate(vox[sl]):
                pk = finder.find(c)
                out[i, : len(pk)] = pk.directions
                cnt[i] = len(pk)
            return out, cnt

        parts = map_blocks(work, vox.shape[0], workers, block_size)
        dirs = np.zeros(fld.dims + (MAX_PEAKS, 3))
        counts = np.zeros(fld.dims, dtype=np.int8)
        if parts:
            dirs[fld.mask] = np.concatenate([p[0] for p in parts])
            counts[fld.mask] = np.concatenate([p[1] for p in parts])
        return cls(dirs, counts)


def _trilinear_scalar(vol, p):
    """Trilinear value of ``vol`` at continuous voxel position ``p`` (edge-clamped)."""
    hi = np.array(vol.shape) - 1
    p = np.clip(p, 0, hi)
    i0 = np.minimum(np.floor(p).astype(int), np.maximum(hi - 1, 0))
    f = p - i0
    i1 = np.minimum(i0 + 1, hi)
    out = 0.0
    for dx in (0, 1):
        wx = f[0] if dx else 1 - f[0]
        x = i1[0] if dx else i0[0]
        for dy in (0, 1):
            wy = f[1] if dy else 1 - f[1]
            y = i1[1] if dy else i0[1]
            for dz in (0, 1):
                wz = f[2] if dz else 1 - f[2]
                if wx * wy * wz:
                    out += wx * wy * wz * vol[x, y, i1[2] if dz else i0[2]]
    return out


class Tracker:
    """Deterministic peak-following integrator on a fixed field.

    Steps are fixed-length Euler steps in mm.  Peaks are looked up in the
    nearest voxel and GFA is interpolated trilinearly; a point is accepted
    only if both its nearest-voxel GFA and its interpolated GFA reach the
    threshold, so no emitted point sits in a sub-threshold voxel.
    """

    def __init__(self, peaks: PeakField, gfa_volume, mask, affine, params: TrackingParams):
        self.peaks = peaks
        self.gfa = np.asarray(gfa_volume, dtype=float)
        self.mask = np.asarray(mask, dtype=bool)
        self.affine = np.asarray(affine, dtype=float)
        self.inv = np.linalg.inv(self.affine)
        self.params = params
        self.cos_max = math.cos(math.radians(params.max_angle))
        self.dims = np.array(self.mask.shape)

    def to_voxel(self, p):
        return self.inv[:3, :3] @ p + self.inv[:3, 3]

    def to_mm(self, ijk):
        return self.affine[:3, :3] @ np.asarray(ijk, dtype=float) + self.affine[:3, 3]

    def _check(self, p):
        """None if the point may be emitted, otherwise a termination reason."""
        q = self.to_voxel(p)
        if np.any(q < -0.5) or np.any(q > self.dims - 0.5):
            return "boundary", None
        v = tuple(np.minimum(np.floor(q + 0.5).astype(int), self.dims - 1))
        if not self.mask[v]:
            return "mask", v
        thr = self.params.gfa_threshold
        if self.gfa[v] < thr or _trilinear_scalar(self.gfa, q) < thr:
            return "gfa", v
        return None, v

    def _direction(self, v, heading):
        n = self.peaks.counts[v]
        if n == 0:
            return None
        cand = self.peaks.directions[v][:n]
        cos = cand @ heading
        k = int(np.argmax(np.abs(cos)))
        d = cand[k] if cos[k] >= 0 else -cand[k]
        return d if float(d @ heading) >= self.cos_max else None

    def _half(self, p, heading, budget):
        pts = []
        length = 0.0
        h = self.params.step_size
        while True:
            if length + h > budget + 1e-9:
                return pts, "length"
            nxt = p + h * heading
            reason, v = self._check(nxt)
            if reason:
                return pts, reason
            d = self._direction(v, heading)
            if d is None:
                return pts, "angle" if self.peaks.counts[v] else "gfa"
            pts.append(nxt)
            length += h
            p, heading = nxt, d

    def track(self, seed_mm, seed_index=-1):
        seed_mm = np.asarray(seed_mm, dtype=float)
        reason, v = self._check(seed_mm)
        if reason:
            return Streamline(np.zeros((0, 3)), (reason, reason), seed_index)
        if self.peaks.counts[v] == 0:
            return Streamline(np.zeros((0, 3)), ("gfa", "gfa"), seed_index)
        d0 = self.peaks.directions[v][0]
        fwd, r_fwd = self._half(seed_mm, d0, self.params.max_length)
        used = self.params.step_size * len(fwd)
        bwd, r_bwd = self._half(seed_mm, -d0, self.params.max_length - used)
        pts = np.array(bwd[::-1] + [seed_mm] + fwd)
        return Streamline(pts, (r_bwd, r_fwd), seed_index)


def _prepare(fld, gfa_volume, params, workers=1):
    if gfa_volume is None:
        gfa_volume = fld.gfa_map()
    gfa_volume = np.asarray(gfa_volume, dtype=float)
    if gfa_volume.shape != fld.dims:
        raise ValidationError("GFA volume and field grids differ")
    peaks = PeakField.from_field(fld, params.relative_threshold, params.min_separation, workers)
    return Tracker(peaks, gfa_volume, fld.mask, fld.affine, params)


def track_streamline(seed_mm, fld: SHField, gfa_volume=None, params=TrackingParams(), tracker=None):
    """Track one bidirectional streamline from ``seed_mm`` (physical mm)."""
    tracker = tracker or _prepare(fld, gfa_volume, params)
    return tracker.track(seed_mm)


def seed_points(fld: SHField, gfa_volume, params: TrackingParams):
    """Seeds in mm for every mask voxel with GFA >= threshold.

    Voxels are visited in C order and each gets ``seeds_per_voxel`` points
    jittered uniformly within the voxel; the offsets are drawn in one call
    from a generator seeded by ``params.seed``.
    """
    ok = fld.mask & (np.asarray(gfa_volume) >= params.gfa_threshold)
    ijk = np.argwhere(ok).astype(float)
    rng = np.random.default_rng(params.seed)
    jitter = rng.uniform(-0.5, 0.5, size=(len(ijk), params.seeds_per_voxel, 3))
    if params.seeds_per_voxel == 1:
        jitter[:] = 0.0
    vox = (ijk[:, None, :] + jitter).reshape(-1, 3)
    A = np.asarray(fld.affine, dtype=float)
    return vox @ A[:3, :3].T + A[:3, 3]


def whole_brain_track(fld: SHField, gfa_volume=None, params=TrackingParams(), workers=1, block_size=256):
    """Deterministic whole-field tractography.

    Returns streamlines ordered by seed index, shorter ones than
    ``params.min_length`` dropped.  The result does not depend on ``workers``.
    """
    tracker = _prepare(fld, gfa_volume, params, workers)
    seeds = seed_points(fld, tracker.gfa, params)

    def work(sl):
        out = []
        for i in range(sl.start, sl.stop):
            s = tracker.track(seeds[i], i)
            if len(s) >= 2 and s.length >= params.min_length:
                out.append(s)
        return out

    return [s for part in map_blocks(work, len(seeds), workers, block_size) for s in part]


def turning_angles(points):
    """Turning angle in degrees at every interior vertex."""
    seg = np.diff(np.asarray(points, dtype=float), axis=0)
    if len(seg) < 2:
        return np.zeros(0)
    seg /= np.linalg.norm(seg, axis=1, keepdims=True)
    cos = np.clip(np.sum(seg[1:] * seg[:-1], axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def satisfies_angle_rule(streamline, max_angle, tol=1e-6):
    return bool(np.all(turning_angles(streamline.points) <= max_angle + tol))


def segment_colors(points):
    """Directional RGB per segment: red left/right, green anterior/posterior, blue dorsal/ventral."""
    seg = np.diff(np.asarray(points, dtype=float), axis=0)
    norm = np.linalg.norm(seg, axis=1, keepdims=True)
    return np.abs(seg) / np.where(norm > 0, norm, 1.0)
