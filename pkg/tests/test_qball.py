import math

import numpy as np
import pytest
import scipy.special as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dodfatlas.dwi import DiffusionTensor, DWIVolume, default_scheme, multi_tensor_signal, tensor_scalars
from dodfatlas.errors import NumericalError, ValidationError
from dodfatlas.phantom import PhantomSpec, cohort, region_labels, synthesize_session
from dodfatlas.qball import (
    QBallConfig,
    QBallModel,
    SHCoefficients,
    fit_sh_volume,
    fit_signal_sh,
    frt_factors,
    frt_to_odf,
    gfa,
    gfa_sampled,
    odf_min_max,
    signal_field_to_odf,
)
from dodfatlas.sphere import (
    build_basis,
    order_array,
    random_directions,
    random_rotation,
    tessellate_sphere,
)
from dodfatlas.tracking import PeakFinder, find_peaks

PROLATE = (1.7e-3, 0.2e-3, 0.2e-3)


@pytest.fixture(scope="module")
def scheme():
    return default_scheme(64, 2000.0)


def axis_error_deg(a, b):
    return math.degrees(math.acos(min(1.0, abs(float(np.dot(a, b))))))


def tensor_odf(scheme, axis, cfg=QBallConfig()):
    sig = multi_tensor_signal([(1.0, DiffusionTensor.from_axis(PROLATE, axis))], scheme)
    return frt_to_odf(fit_signal_sh(sig, scheme, cfg))


class TestFit:
    def test_matches_normal_equations(self, scheme, rng):
        # oracle: explicit (B'B + lam L)^-1 B' s
        B = build_basis(scheme.dirs, 6)
        s = rng.uniform(0.1, 1.0, scheme.n)
        s[0] = 1.0
        L = np.diag(B.lb_diag)
        ref = np.linalg.solve(B.entries.T @ B.entries + 0.006 * L, B.entries.T @ s[1:])
        got = fit_signal_sh(s, scheme).values
        assert np.max(np.abs(got - ref)) < 1e-10

    def test_band_limited_round_trip(self, scheme, rng):
        model = QBallModel(scheme, QBallConfig(lam=0.0))
        B = model.basis.entries
        for _ in range(10):
            c = rng.normal(size=28)
            assert np.max(np.abs(model.fit_normalized(B @ c) - c)) < 1e-8

    def test_isotropic_single_coefficient(self, scheme):
        sig = multi_tensor_signal([(1.0, np.eye(3) * 0.7e-3)], scheme)
        c = fit_signal_sh(sig, scheme).values
        assert c[0] == pytest.approx(math.exp(-1.4) * math.sqrt(4 * math.pi), rel=1e-9)
        assert np.max(np.abs(c[1:])) < 1e-9
        odf = frt_to_odf(SHCoefficients(c, 6))
        assert np.max(np.abs(odf.values[1:])) < 1e-8

    def test_regularization_shrinks_l6_energy(self, scheme, rng):
        sig = multi_tensor_signal([(1.0, DiffusionTensor.from_axis(PROLATE, [1, 2, 3]))], scheme)
        noisy = sig + rng.normal(0, 0.03, sig.shape)
        l6 = order_array(6) == 6
        c0 = fit_signal_sh(noisy, scheme, QBallConfig(lam=0.0)).values
        c1 = fit_signal_sh(noisy, scheme, QBallConfig(lam=0.006)).values
        assert np.sum(c1[l6] ** 2) < np.sum(c0[l6] ** 2)

    def test_huge_lambda_keeps_only_mean(self, scheme, rng):
        sig = multi_tensor_signal([(1.0, DiffusionTensor.from_axis(PROLATE, [0, 1, 1]))], scheme)
        c = fit_signal_sh(sig, scheme, QBallConfig(lam=1e9)).values
        assert np.max(np.abs(c[1:])) < 1e-6
        assert c[0] == pytest.approx(np.mean(sig[1:]) * math.sqrt(4 * math.pi), rel=0.02)

    def test_singular_without_regularization(self):
        few = default_scheme(12, 2000.0)
        with pytest.warns(UserWarning):
            with pytest.raises(NumericalError, match="lambda"):
                QBallModel(few, QBallConfig(lam=0.0))
        with pytest.warns(UserWarning):
            QBallModel(few, QBallConfig(lam=0.006))

    def test_nonpositive_baseline(self, scheme):
        s = np.ones(scheme.n)
        s[0] = 0.0
        with pytest.raises(ValidationError):
            fit_signal_sh(s, scheme)

    @pytest.mark.parametrize("bad", [dict(l_max=5), dict(lam=-1.0)])
    def test_config_validation(self, bad):
        with pytest.raises(ValidationError):
            QBallConfig(**bad)


class TestFRT:
    def test_factors_match_scipy_legendre(self):
        ref = np.array([2 * np.pi * sp.eval_legendre(l, 0.0) for l in order_array(8)])
        assert np.max(np.abs(frt_factors(8) - ref)) < 1e-14

    def test_examples(self):
        c = np.arange(1.0, 29.0)
        out = frt_to_odf(SHCoefficients(c, 6)).values
        assert out[0] == pytest.approx(2 * np.pi)
        assert np.allclose(out[1:6], -np.pi * c[1:6])

    def test_kind_mismatch(self):
        with pytest.raises(ValidationError):
            frt_to_odf(SHCoefficients(np.zeros(28), 6, "odf"))
        with pytest.raises(ValidationError):
            SHCoefficients(np.zeros(27), 6)

    def test_commutes_with_rotation(self, scheme, rng):
        # rotating the tensor moves the reconstructed peak by the same rotation
        base = np.array([0.3, -0.5, 0.8])
        base /= np.linalg.norm(base)
        p0 = find_peaks(tensor_odf(scheme, base)).directions[0]
        for _ in range(5):
            R = random_rotation(rng)
            p1 = find_peaks(tensor_odf(scheme, R @ base)).directions[0]
            assert axis_error_deg(p1, R @ p0) < 3.0


class TestGFA:
    def test_isotropic_is_zero(self):
        c = np.zeros(28)
        c[0] = 2.0
        assert gfa(c) < 1e-10 and gfa(c, "sampled") < 1e-10

    def test_zero_vector_degenerate(self):
        assert gfa(np.zeros(28)) == 0.0 and gfa_sampled(np.zeros(10)) == 0.0

    def test_sampled_plain_formula(self):
        psi = np.array([1.0, 2.0, 3.0, 4.0])
        n = 4
        ref = math.sqrt(n * np.sum((psi - psi.mean()) ** 2) / ((n - 1) * np.sum(psi**2)))
        assert gfa_sampled(psi) == pytest.approx(ref, abs=1e-15)

    def test_kind_checked(self):
        with pytest.raises(ValidationError):
            gfa(SHCoefficients(np.ones(28), 6, "signal"))
        with pytest.raises(ValidationError):
            gfa(np.ones(28), "median")

    def test_monotone_in_tensor_fa(self, scheme):
        values, fas = [], []
        for l2 in np.linspace(1.0e-3, 0.1e-3, 10):
            D = DiffusionTensor.from_axis((1.7e-3, l2, l2), [0, 0, 1])
            fas.append(tensor_scalars(D)[0])
            sig = multi_tensor_signal([(1.0, D)], scheme)
            values.append(gfa(frt_to_odf(fit_signal_sh(sig, scheme))))
        assert np.all(np.diff(fas) > 0) and np.all(np.diff(values) > 0)

    def test_agreement_improves_with_level(self, rng):
        # random ODFs lifted to be strictly positive on a fine sphere
        B = build_basis(tessellate_sphere(5).vertices, 6).entries
        c = rng.normal(size=(300, 28))
        c[:, 0] = 0.0
        c[:, 0] = (0.01 - (c @ B.T).min(axis=1)) * math.sqrt(4 * math.pi)
        errs = [np.max(np.abs(gfa(c) - gfa(c, "sampled", tessellate_sphere(k)))) for k in (1, 2, 3, 4)]
        assert all(a > b for a, b in zip(errs, errs[1:]))

    @settings(max_examples=30)
    @given(arrays(float, 27, elements=st.floats(-1, 1)))
    def test_in_unit_interval(self, tail):
        c = np.concatenate([[0.5], tail])
        assert 0.0 <= gfa(c) <= 1.0
        assert 0.0 <= gfa(c, "sampled") <= 1.0


def test_min_max_display_normalization():
    out = odf_min_max(np.array([[1.0, 3.0, 2.0], [-1.0, 4.0, 0.0]]))
    assert np.allclose(out, [[0, 1, 0.5], [0, 1, 0]])


@pytest.fixture(scope="module")
def small():
    spec = PhantomSpec(dims=(32, 32, 32), n_subjects=1)
    sess = cohort(spec)[0]
    dwi = synthesize_session(spec, sess)
    sub = DWIVolume(dwi.data[4:28, 4:28, 14:18], dwi.scheme, dwi.voxel_size, dwi.affine)
    labels = region_labels(spec)[4:28, 4:28, 14:18]
    return sub, labels


class TestVolume:
    def test_shapes_and_mask(self, small):
        dwi, _ = small
        mask = np.zeros(dwi.dims, dtype=bool)
        mask[2:10, 3:7, :] = True
        f = fit_sh_volume(dwi, mask)
        assert f.dims == dwi.dims and f.kind == "odf" and f.coeffs.shape[-1] == 28
        assert np.array_equal(f.mask, mask)
        assert np.all(np.isnan(f.coeffs[~mask])) and np.all(np.isfinite(f.coeffs[mask]))

    def test_invalid_voxels_leave_mask(self, small):
        dwi, _ = small
        data = dwi.data.copy()
        before = fit_sh_volume(dwi).mask
        data[10, 10, 2, 0] = 0.0
        f = fit_sh_volume(DWIVolume(data, dwi.scheme, dwi.voxel_size))
        assert before[10, 10, 2] and not f.mask[10, 10, 2]
        assert f.mask.sum() == before.sum() - 1

    def test_worker_independent(self, small):
        dwi, _ = small
        a = fit_sh_volume(dwi, workers=1, block_size=97)
        b = fit_sh_volume(dwi, workers=4, block_size=97)
        assert a.coeffs.tobytes() == b.coeffs.tobytes()

    def test_signal_then_frt_equals_odf(self, small):
        dwi, _ = small
        a = fit_sh_volume(dwi, odf=True)
        b = signal_field_to_odf(fit_sh_volume(dwi, odf=False))
        assert np.array_equal(a.mask, b.mask)
        assert np.max(np.abs(a.coeffs[a.mask] - b.coeffs[b.mask])) < 1e-12

    def test_phantom_peaks_follow_fibers(self, small):
        dwi, labels = small
        f = fit_sh_volume(dwi, labels > 0)
        vox = f.coeffs[f.mask]
        finder = PeakFinder()
        errs = [axis_error_deg(finder.find(c).directions[0], [1, 0, 0]) for c in vox[::3]]
        assert np.median(errs) < 4.0

    def test_mask_shape_mismatch(self, small):
        dwi, _ = small
        with pytest.raises(ValidationError):
            fit_sh_volume(dwi, np.ones((2, 2, 2), dtype=bool))


def test_random_direction_peaks_within_4_degrees(scheme, rng):
    dirs = random_directions(50, rng)
    finder = PeakFinder()
    errs = [axis_error_deg(finder.find(tensor_odf(scheme, d).values).directions[0], d) for d in dirs]
    assert max(errs) < 4.0
