"""Population-level operations: coefficient averaging, modality NCC and ROI trends."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .dwi import ScalarVolume, ncc
from .errors import ValidationError
from .lme import LMEAtlas
from .qball import SHField, gfa_closed_form

DEFAULT_T_GRID = np.arange(3.0, 37.0, 1.0)
DEFAULT_ROI_NAMES = {1: "genu", 2: "body", 3: "splenium"}


def average_sh_field(fields):
    """Voxel-wise mean of coefficient vectors on the intersection of the masks."""
    fields = list(fields)
    if not fields:
        raise ValidationError("nothing to average")
    ref = fields[0]
    for k, f in enumerate(fields[1:], start=1):
        if not ref.same_grid(f) or f.kind != ref.kind:
            raise ValidationError(f"field {k} differs from field 0 in grid, order or kind")
    mask = np.logical_and.reduce([f.mask for f in fields])
    total = np.zeros(ref.coeffs.shape)
    for f in fields:
        total += np.where(mask[..., None], f.coeffs, 0.0)
    coeffs = np.where(mask[..., None], total / len(fields), np.nan)
    return SHField(coeffs, mask, ref.l_max, ref.kind, ref.voxel_size, ref.affine, ref.lam)


@dataclass
class NCCReport:
    names: list
    matrix: np.ndarray
    least_pair: tuple
    least_value: float

    def as_dict(self):
        return {
            "names": list(self.names),
            "matrix": self.matrix.tolist(),
            "least_correlated": {"pair": list(self.least_pair), "ncc": self.least_value},
        }


def ncc_matrix(volumes, mask=None):
    """Pairwise normalized cross-correlation of named scalar volumes.

    ``volumes`` maps a name to a ScalarVolume or array; insertion order is
    kept.  The report names the least-correlated pair.
    """
    names = list(volumes)
    if len(names) < 2:
        raise ValidationError("need at least two volumes")
    arrays = [v.data if isinstance(v, ScalarVolume) else np.asarray(v) for v in volumes.values()]
    shape = arrays[0].shape
    for n, a in zip(names, arrays):
        if a.shape != shape:
            raise ValidationError(f"volume {n!r} has shape {a.shape}, expected {shape}")
    k = len(names)
    M = np.eye(k)
    for i, j in combinations(range(k), 2):
        M[i, j] = M[j, i] = ncc(arrays[i], arrays[j], mask)
    iu = np.triu_indices(k, 1)
    m = int(np.argmin(M[iu]))
    i, j = iu[0][m], iu[1][m]
    return NCCReport(names, M, (names[i], names[j]), float(M[i, j]))


@dataclass
class TrendTable:
    """Population and per-subject GFA trajectories per ROI."""

    rois: list  # (label, name)
    t_grid: np.ndarray
    population: dict  # label -> (n_t,)
    subjects: list = field(default_factory=list)
    per_subject: dict = field(default_factory=dict)  # label -> (n_subjects, n_t)

    def rows(self):
        for label, name in self.rois:
            for k, t in enumerate(self.t_grid):
                extra = [self.per_subject[label][s, k] for s in range(len(self.subjects))]
                yield label, name, float(t), float(self.population[label][k]), extra

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["roi_label", "roi_name", "t_months", "population_gfa"] + [f"gfa_{s}" for s in self.subjects])
            for label, name, t, pop, extra in self.rows():
                w.writerow([label, name, repr(t), repr(pop)] + [repr(float(v)) for v in extra])


def _check_grid(t_grid):
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0 or np.any(np.diff(t) <= 0):
        raise ValidationError("t grid must be a non-empty, strictly increasing sequence")
    return t


def roi_trends(atlas: LMEAtlas, labels, t_grid=None, subjects=None, names=None):
    """GFA trajectories per ROI label.

    The population value at age t is the mean, over ROI voxels inside the
    atlas mask, of the GFA of the atlas dODF at t.  Subject lines add that
    subject's intercept offsets before taking GFA.  ``subjects=True`` selects
    every atlas subject.
    """
    labels = np.asarray(labels)
    if labels.shape != atlas.dims:
        raise ValidationError(f"label grid {labels.shape} does not match atlas grid {atlas.dims}")
    if np.any(labels < 0):
        raise ValidationError("ROI labels must be nonnegative")
    t_grid = _check_grid(DEFAULT_T_GRID if t_grid is None else t_grid)
    names = {**DEFAULT_ROI_NAMES, **(names or {})}
    if subjects is True:
        subjects = list(atlas.subjects)
    subjects = list(subjects or [])
    for s in subjects:
        if s not in atlas.subjects:
            raise ValidationError(f"unknown subject {s!r}")
    rois = [(int(v), names.get(int(v), f"roi{int(v)}")) for v in np.unique(labels) if v > 0]
    sel = {}
    for label, name in rois:
        m = (labels == label) & atlas.mask
        if not m.any():
            raise ValidationError(f"ROI {label} ({name}) has no voxels inside the atlas mask")
        sel[label] = m
    b0 = {label: atlas.beta0[m] for label, m in sel.items()}
    b1 = {label: atlas.beta1[m] for label, m in sel.items()}
    lo, hi = atlas.meta.get("guard", (-np.inf, np.inf))
    if t_grid[0] < lo or t_grid[-1] > hi:
        raise ValidationError(f"t grid [{t_grid[0]}, {t_grid[-1]}] leaves the atlas guard [{lo}, {hi}]")
    pop, per = {}, {}
    for label, _ in rois:
        c = b0[label][None] + t_grid[:, None, None] * b1[label][None]  # (T, V, C)
        pop[label] = gfa_closed_form(c).mean(axis=1)
        per[label] = np.zeros((len(subjects), len(t_grid)))
        for k, s in enumerate(subjects):
            a = atlas.alpha[sel[label]][..., atlas.subjects.index(s)]
            per[label][k] = gfa_closed_form(c + a[None]).mean(axis=1)
    return TrendTable(rois, t_grid, pop, subjects, per)
