import math
import warnings

import numpy as np
import pytest
import scipy.special as sp
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dodfatlas.errors import ValidationError
from dodfatlas.sphere import (
    assoc_legendre,
    build_basis,
    cart2sphere,
    eval_sh,
    half_sphere_directions,
    hemisphere_indices,
    index_to_lm,
    laplace_beltrami_diag,
    legendre_at_zero,
    lmax_from_ncoeffs,
    n_coeffs,
    order_array,
    quadrature_weights,
    random_directions,
    random_rotation,
    real_sh,
    sh_index_map,
    sphere2cart,
    tessellate_sphere,
)

finite = st.floats(-10, 10, allow_nan=False)
vectors = st.tuples(finite, finite, finite).filter(lambda v: math.hypot(*v) > 1e-3)


def scipy_real_basis(l_max, theta, phi):
    """Independent construction of the real basis from scipy's complex harmonics."""
    cols = []
    for l in range(0, l_max + 1, 2):
        for m in range(-l, l + 1):
            y = sp.sph_harm_y(l, abs(m), theta, phi)
            if m < 0:
                cols.append(math.sqrt(2) * y.real)
            elif m == 0:
                cols.append(y.real)
            else:
                cols.append(math.sqrt(2) * (-1) ** (m + 1) * y.imag)
    return np.stack(cols, axis=-1)


class TestCoordinates:
    @given(vectors)
    def test_round_trip(self, v):
        d = np.array(v) / np.linalg.norm(v)
        back = sphere2cart(*cart2sphere(d[None]))
        assert np.max(np.abs(back - d)) < 1e-12

    def test_poles_map_to_phi_zero(self):
        theta, phi = cart2sphere(np.array([[0, 0, 1.0], [0, 0, -1.0]]))
        assert np.allclose(theta, [0, np.pi]) and np.all(phi == 0)

    @given(vectors)
    def test_phi_range(self, v):
        _, phi = cart2sphere(np.array(v)[None] / np.linalg.norm(v))
        assert 0 <= phi[0] < 2 * np.pi


class TestLegendre:
    @pytest.mark.parametrize(
        "l,m,x,expected", [(0, 0, 0.37, 1.0), (2, 0, 0.0, -0.5), (2, 2, 0.5, 2.25)]
    )
    def test_examples(self, l, m, x, expected):
        assert assoc_legendre(l, m, x) == pytest.approx(expected, abs=1e-14)

    def test_closed_forms_up_to_l4(self):
        x = np.linspace(-1, 1, 41)
        s = np.sqrt(1 - x * x)
        closed = {
            (1, 0): x, (1, 1): -s,
            (2, 0): 0.5 * (3 * x**2 - 1), (2, 1): -3 * x * s, (2, 2): 3 * s**2,
            (3, 0): 0.5 * (5 * x**3 - 3 * x), (3, 1): -1.5 * (5 * x**2 - 1) * s,
            (3, 2): 15 * x * s**2, (3, 3): -15 * s**3,
            (4, 0): (35 * x**4 - 30 * x**2 + 3) / 8, (4, 1): -2.5 * (7 * x**3 - 3 * x) * s,
            (4, 2): 7.5 * (7 * x**2 - 1) * s**2, (4, 3): -105 * x * s**3, (4, 4): 105 * s**4,
        }
        for (l, m), ref in closed.items():
            assert np.max(np.abs(assoc_legendre(l, m, x) - ref)) < 1e-12, (l, m)

    def test_matches_scipy_to_l16(self):
        x = np.linspace(-1, 1, 33)
        for l in range(17):
            for m in range(l + 1):
                ref = sp.lpmv(m, l, x)
                scale = max(1.0, np.max(np.abs(ref)))
                assert np.max(np.abs(assoc_legendre(l, m, x) - ref)) / scale < 1e-11

    @pytest.mark.parametrize("l,m,x", [(2, 3, 0.1), (2, 0, 1.5), (-1, 0, 0.0)])
    def test_domain_errors(self, l, m, x):
        with pytest.raises(ValidationError):
            assoc_legendre(l, m, x)

    def test_values_at_zero(self):
        assert [legendre_at_zero(l) for l in (0, 2, 4, 6)] == [1.0, -0.5, 0.375, -0.3125]
        assert legendre_at_zero(3) == 0.0


class TestIndexing:
    def test_lmax0(self):
        (ix,) = sh_index_map(0)
        assert (ix.l, ix.m, ix.j) == (0, 0, 1)

    def test_j2_is_l2_mminus2(self):
        ix = sh_index_map(2)[1]
        assert (ix.l, ix.m, ix.j) == (2, -2, 2)

    def test_lmax6_has_28_entries(self):
        idx = sh_index_map(6)
        assert len(idx) == 28 == n_coeffs(6)
        assert (idx[-1].l, idx[-1].m, idx[-1].j) == (6, 6, 28)
        assert [ix.j for ix in idx] == list(range(1, 29))

    @pytest.mark.parametrize("bad", [-2, 3, 5, 18])
    def test_bad_lmax(self, bad):
        with pytest.raises(ValidationError):
            sh_index_map(bad)

    @given(st.sampled_from([0, 2, 4, 6, 8, 10, 12, 14, 16]))
    def test_index_bijection(self, l_max):
        for ix in sh_index_map(l_max):
            assert index_to_lm(ix.j) == (ix.l, ix.m)
        assert lmax_from_ncoeffs(n_coeffs(l_max)) == l_max

    def test_lb_diag(self):
        l = order_array(6)
        assert np.array_equal(laplace_beltrami_diag(6), (l**2 * (l + 1) ** 2).astype(float))


class TestBasis:
    def test_matches_scipy_complex_harmonics(self, rng):
        d = random_directions(200, rng)
        theta, phi = cart2sphere(d)
        for l_max in (2, 6, 12):
            assert np.max(np.abs(real_sh(l_max, theta, phi) - scipy_real_basis(l_max, theta, phi))) < 1e-12

    def test_first_column_constant(self, rng):
        B = build_basis(random_directions(50, rng), 6).entries
        assert np.max(np.abs(B[:, 0] - 1 / math.sqrt(4 * math.pi))) < 1e-12

    def test_64_direction_protocol_shape(self):
        b = build_basis(half_sphere_directions(64), 6)
        assert b.entries.shape == (64, 28)
        assert not b.rank_deficient and b.condition < 10

    def test_few_directions_warn(self, rng):
        with pytest.warns(UserWarning):
            b = build_basis(random_directions(10, rng), 6)
        assert b.rank_deficient

    def test_orthonormal_under_level4_quadrature(self):
        tess = tessellate_sphere(4)
        w = tess.quadrature_weights(12)
        B = build_basis(tess.vertices, 6).entries
        gram = B.T @ (w[:, None] * B)
        assert np.max(np.abs(gram - np.eye(28))) < 1e-6

    def test_quadrature_integrates_gaussian_product_oracle(self):
        # product Gauss-Legendre x trapezoid rule as an independent integrator
        xg, wg = np.polynomial.legendre.leggauss(40)
        phis = np.linspace(0, 2 * np.pi, 80, endpoint=False)
        T, P = np.meshgrid(np.arccos(xg), phis, indexing="ij")
        W = np.outer(wg, np.full(80, 2 * np.pi / 80))
        f = lambda d: (d[..., 0] ** 4) * d[..., 1] ** 2 + d[..., 2] ** 6
        ref = np.sum(W * f(sphere2cart(T, P)))
        tess = tessellate_sphere(3)
        approx = tess.quadrature_weights(12) @ f(tess.vertices)
        assert approx == pytest.approx(ref, abs=1e-10)

    def test_eval_constant(self):
        c = np.zeros(28)
        c[0] = 3.0
        vals = eval_sh(c, half_sphere_directions(30))
        assert np.allclose(vals, 3.0 / math.sqrt(4 * math.pi), atol=1e-14)

    def test_eval_length_mismatch(self):
        with pytest.raises(ValidationError):
            eval_sh(np.zeros(15), [[0, 0, 1.0]], l_max=6)

    @given(arrays(float, 28, elements=finite), arrays(float, 28, elements=finite))
    def test_eval_linear(self, a, b):
        d = half_sphere_directions(20)
        assert np.allclose(eval_sh(a + b, d), eval_sh(a, d) + eval_sh(b, d), atol=1e-9)

    @given(arrays(float, 28, elements=finite), vectors)
    def test_antipodal_symmetry(self, c, v):
        d = np.array(v)[None]
        assert eval_sh(c, d)[0] == pytest.approx(eval_sh(c, -d)[0], abs=1e-9)

    def test_band_energy_rotation_invariant(self, rng):
        tess = tessellate_sphere(4)
        w = tess.quadrature_weights(12)
        c = rng.normal(size=28)
        R = random_rotation(rng)
        B = build_basis(tess.vertices, 6).entries
        rotated = np.linalg.lstsq(B, eval_sh(c, tess.vertices @ R), rcond=None)[0]
        l = order_array(6)
        for order in (0, 2, 4, 6):
            assert np.sum(rotated[l == order] ** 2) == pytest.approx(np.sum(c[l == order] ** 2), rel=1e-9)
        assert w.sum() == pytest.approx(4 * np.pi)


class TestTessellation:
    @pytest.mark.parametrize("level", range(5))
    def test_vertex_count_and_norm(self, level):
        t = tessellate_sphere(level)
        assert t.n == 10 * 4**level + 2
        assert np.max(np.abs(np.linalg.norm(t.vertices, axis=1) - 1)) < 1e-12

    def test_level2_has_162_and_81_hemisphere(self):
        t = tessellate_sphere(2)
        assert t.n == 162 and len(t.hemisphere()) == 81

    @pytest.mark.parametrize("level", [1, 3])
    def test_antipodally_closed(self, level):
        v = tessellate_sphere(level).vertices
        d = np.abs(v @ (-v).T - 1.0).min(axis=1)
        assert np.max(d) < 1e-12
        h = hemisphere_indices(v)
        assert len(h) * 2 == len(v)
        assert np.max(np.abs(v[h] @ v[h].T), initial=0, where=~np.eye(len(h), dtype=bool)) < 1 - 1e-9

    def test_deterministic_order(self):
        a, b = tessellate_sphere(3), tessellate_sphere(3)
        assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)

    def test_neighbors_symmetric(self):
        t = tessellate_sphere(2)
        for i, nb in enumerate(t.neighbors):
            assert len(nb) in (5, 6)
            for j in nb:
                assert i in t.neighbors[j]

    def test_bad_level(self):
        with pytest.raises(ValidationError):
            tessellate_sphere(-1)


def test_quadrature_weights_exact_for_low_degree():
    v = tessellate_sphere(2).vertices
    w = quadrature_weights(v, 6)
    assert w @ (v[:, 2] ** 2) == pytest.approx(4 * np.pi / 3, abs=1e-12)
    assert w @ (v[:, 0] ** 2 * v[:, 1] ** 2 * v[:, 2] ** 2) == pytest.approx(4 * np.pi / 105, abs=1e-12)


def test_half_sphere_directions_unit_and_upper():
    d = half_sphere_directions(64)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-14)
    assert np.all(d[:, 2] >= 0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        build_basis(d, 6)
