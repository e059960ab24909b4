"""Connection, curvature, and generator identities on the bundled scenarios.

Closed-form constants used as references (orthonormal frames, unit vectors):
  sphere S^n, gradient system:  sectional curvature 1, Ricci = (n-1) g,
                                moment form on unit vectors = p - n
  so(3), left-invariant fields: Gamma(v, w) = -(v x w)/2 at the identity,
                                torsion(e1, e2) = -e3, curvature = 0,
                                Levi-Civita Ricci = g/2
  flat with drift a(x) = -x:    moment form = -2 on unit vectors, any p
"""

import numpy as np
import pytest

from flowgeom.errors import DegenerateX
from flowgeom.geometry import (
    christoffel,
    codifferential_1form,
    codifferential_1form_lie,
    connection_routes_residual,
    covariant_derivative,
    curvature_from_christoffel,
    curvature_lw_direct,
    defining_property_residual,
    exterior_derivative_1form,
    geometry_point,
    induced_metric,
    lie_bracket,
    lw_lc_split_residual,
    metricity_residual,
    moment_form,
    moment_form_extremes,
    moment_quadratic,
    one_form_from_spec,
    one_form_generator,
    one_form_generator_hodge,
    pairing_derivative_residual,
    point_data,
    ricci_bilinear,
    ricci_sharp,
    scalar_from_expr,
    scalar_generator,
    sectional_curvature,
    stratonovich_term,
    torsion_from_christoffel,
    torsion_via_bracket,
    torsion_via_dy,
    tss_check,
)
from flowgeom.linalg import DerivOracle
from flowgeom.model import build_scenario

rng = np.random.default_rng(7)


def system_of(name, params=None):
    return build_scenario(name, params or {}).system


@pytest.fixture(scope="module")
def sphere():
    return system_of("sphere-gradient", {"n": 2})


@pytest.fixture(scope="module")
def so3():
    return system_of("so3-left-invariant")


@pytest.fixture(scope="module")
def twisted():
    return system_of("twisted-plane", {"alpha": 0.5})


# ------------------------------------------------------------ sphere facts


def test_sphere_metric_is_conformal(sphere):
    u = np.array([0.3, -0.2])
    g, ginv, Y, PT, PN = induced_metric(sphere.coeff_x("n", u))
    s = 1.0 + u @ u
    np.testing.assert_allclose(g, (4.0 / s**2) * np.eye(2), atol=1e-12)
    np.testing.assert_allclose(g @ ginv, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(PT + PN, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(PT @ PT, PT, atol=1e-12)


def test_sphere_connection_is_levi_civita(sphere):
    for cid, x in sphere.sample_points(np.random.default_rng(1), 20):
        gap = np.max(np.abs(christoffel(sphere, cid, x, "lw")
                            - christoffel(sphere, cid, x, "lc")))
        assert gap < 1e-8


def test_sphere_sectional_curvature_is_one(sphere):
    for cid, x in sphere.sample_points(np.random.default_rng(2), 8):
        gp = geometry_point(sphere, cid, x)
        u, v = rng.normal(size=2), rng.normal(size=2)
        k = sectional_curvature(gp.curvature_lw, gp.g, u, v)
        assert k == pytest.approx(1.0, abs=1e-6)


def test_sphere_ricci_is_g(sphere):
    # unit S^2 carries Ric = (n-1) g = g
    cid, x = sphere.sample_points(np.random.default_rng(3), 1)[0]
    gp = geometry_point(sphere, cid, x)
    np.testing.assert_allclose(gp.ricci_lw, gp.g, atol=1e-7)
    np.testing.assert_allclose(gp.ric_sharp_lw, np.eye(2), atol=1e-7)


def test_sphere_moment_form_is_p_minus_n(sphere):
    cid, x = "n", np.array([0.4, 0.1])
    pd = point_data(sphere, cid, x)
    for p in (1.0, 2.0, 4.0):
        for _ in range(4):
            v = rng.normal(size=2)
            v = v / np.sqrt(v @ pd.g @ v)
            assert moment_form(pd, v, p) == pytest.approx(p - 2.0, abs=1e-6)
        lo, hi = moment_form_extremes(pd, p)
        assert lo == pytest.approx(p - 2.0, abs=1e-6)
        assert hi == pytest.approx(p - 2.0, abs=1e-6)


def test_sphere_generator_on_coordinate_functions(sphere):
    # embedded coordinates are degree-1 eigenfunctions: L x_i = -x_i
    cid, x = "n", np.array([0.3, -0.2])
    emb = sphere.embed(cid, x)
    for i, src in enumerate(["x1", "x2", "x3"]):
        f = scalar_from_expr(sphere, cid, src)
        lw, lc = scalar_generator(sphere, cid, x, f)
        assert lw == pytest.approx(-emb[i], abs=1e-7)
        assert lw == pytest.approx(lc, abs=1e-9)


def test_sphere_is_tss_with_zero_torsion(sphere):
    ok, res, _ = tss_check(sphere, "n", np.array([0.2, 0.5]))
    assert ok and res < 1e-8
    gamma = christoffel(sphere, "n", np.array([0.2, 0.5]), "lw")
    assert np.max(np.abs(torsion_from_christoffel(gamma))) < 1e-8


# -------------------------------------------------------------- so3 facts


def test_so3_christoffel_is_half_cross_product(so3):
    gamma = christoffel(so3, "exp", np.zeros(3), "lw")
    eps = np.zeros((3, 3, 3))
    for i, j, k in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
        eps[i, j, k] = 1.0
        eps[i, k, j] = -1.0
    np.testing.assert_allclose(gamma, -0.5 * eps, atol=1e-9)
    # adjoint transposes the last two slots
    gadj = christoffel(so3, "exp", np.zeros(3), "adjoint")
    np.testing.assert_allclose(gadj, 0.5 * eps, atol=1e-9)
    # Levi-Civita is their average here, which cancels to zero
    glc = christoffel(so3, "exp", np.zeros(3), "lc")
    np.testing.assert_allclose(glc, np.zeros((3, 3, 3)), atol=1e-9)


def test_so3_torsion_constant(so3):
    for x in [np.zeros(3), np.array([0.4, -0.2, 0.1])]:
        gamma = christoffel(so3, "exp", x, "lw")
        T = torsion_from_christoffel(gamma)
        e1, e2 = np.eye(3)[0], np.eye(3)[1]
        # at the identity the frame is the coordinate basis
        if not x.any():
            np.testing.assert_allclose(
                np.einsum("ijk,j,k->i", T, e1, e2), [0.0, 0.0, -1.0],
                atol=1e-9)
        np.testing.assert_allclose(T, torsion_via_dy(so3, "exp", x), atol=1e-8)


def test_so3_curvature_vanishes(so3):
    for x in [np.zeros(3), np.array([0.3, 0.2, -0.5])]:
        R = curvature_from_christoffel(so3, "exp", x, "lw")
        assert np.max(np.abs(R)) < 1e-7
        pd = point_data(so3, "exp", x)
        np.testing.assert_allclose(curvature_lw_direct(pd.gradX, pd.g), R,
                                   atol=1e-7)


def test_so3_levi_civita_ricci_is_half_metric(so3):
    x = np.array([0.1, -0.3, 0.2])
    pd = point_data(so3, "exp", x)
    R_lc = curvature_from_christoffel(so3, "exp", x, "lc")
    ric_lc = ricci_bilinear(ricci_sharp(R_lc, pd.ginv), pd.g)
    np.testing.assert_allclose(ric_lc, 0.5 * pd.g, atol=1e-6)


def test_so3_is_tss_and_adjoint_metric(so3):
    ok, res, _ = tss_check(so3, "exp", np.zeros(3))
    assert ok and res < 1e-8
    assert metricity_residual(so3, "exp", np.array([0.2, 0.1, -0.4]),
                              kind="adjoint") < 1e-8


# ------------------------------------------------- identities, all systems

CASES = [
    ("flat", {"n": 3}),
    ("flat", {"n": 2, "drift": ["-x1", "-x2"]}),
    ("sphere-gradient", {"n": 2}),
    ("sphere-gradient", {"n": 3}),
    ("so3-left-invariant", {}),
    ("twisted-plane", {"alpha": 0.5}),
    ("circle", {}),
]


@pytest.mark.parametrize("name,params", CASES)
def test_defining_property(name, params):
    sys = system_of(name, params)
    for cid, x in [sys.start()] + sys.sample_points(np.random.default_rng(5), 3):
        assert defining_property_residual(sys, cid, x) < 1e-7


@pytest.mark.parametrize("name,params", CASES)
def test_metricity_and_pairing(name, params):
    sys = system_of(name, params)
    cid, x = sys.sample_points(np.random.default_rng(6), 1)[0]
    assert metricity_residual(sys, cid, x, kind="lw") < 1e-8
    assert pairing_derivative_residual(sys, cid, x) < 1e-7


@pytest.mark.parametrize("name,params", CASES)
def test_christoffel_route_equivalence(name, params):
    sys = system_of(name, params)
    cid, x = sys.sample_points(np.random.default_rng(8), 1)[0]
    assert connection_routes_residual(sys, cid, x) < 1e-7


@pytest.mark.parametrize("name,params", CASES)
def test_torsion_route_equivalence(name, params):
    sys = system_of(name, params)
    cid, x = sys.sample_points(np.random.default_rng(9), 1)[0]
    gamma = christoffel(sys, cid, x, "lw")
    T = torsion_from_christoffel(gamma)
    np.testing.assert_allclose(T, torsion_via_dy(sys, cid, x), atol=1e-6)
    r = np.random.default_rng(10)
    for _ in range(3):
        v1, v2 = r.normal(size=sys.n), r.normal(size=sys.n)
        tb = torsion_via_bracket(sys, cid, x, v1, v2)
        np.testing.assert_allclose(tb, np.einsum("ijk,j,k->i", T, v1, v2),
                                   atol=1e-5)


@pytest.mark.parametrize("name,params", CASES)
def test_stratonovich_term_vanishes(name, params):
    # sum of LW derivatives of the diffusion fields along themselves is
    # identically zero, including on non-TSS systems
    sys = system_of(name, params)
    for cid, x in [sys.start()] + sys.sample_points(np.random.default_rng(11), 2):
        s = stratonovich_term(sys, cid, x)
        assert np.max(np.abs(s)) < 1e-9


@pytest.mark.parametrize("name,params",
                         [(n, p) for n, p in CASES if n != "twisted-plane"])
def test_lw_lc_split(name, params):
    # torsion-half split of the Levi-Civita connection needs skew torsion,
    # so the non-TSS twisted plane is excluded
    sys = system_of(name, params)
    cid, x = sys.sample_points(np.random.default_rng(12), 1)[0]
    identity_res, _ = lw_lc_split_residual(sys, cid, x)
    assert identity_res < 1e-6


def test_lw_lc_split_detects_non_tss(twisted):
    cid, x = twisted.sample_points(np.random.default_rng(12), 1)[0]
    identity_res, _ = lw_lc_split_residual(twisted, cid, x)
    assert identity_res > 1e-3


def test_twisted_plane_profile(twisted):
    cid, x = "plane", np.array([0.8, -0.4])
    ok, _, _ = tss_check(twisted, cid, x)
    assert not ok
    gamma_gap = np.max(np.abs(christoffel(twisted, cid, x, "lw")
                              - christoffel(twisted, cid, x, "lc")))
    assert gamma_gap > 1e-3
    assert np.max(np.abs(curvature_from_christoffel(twisted, cid, x, "lw"))) < 1e-7
    T = torsion_from_christoffel(christoffel(twisted, cid, x, "lw"))
    assert np.max(np.abs(T)) > 1e-3


def test_ricci_comparison_on_tss_systems():
    # Levi-Civita Ricci dominates the induced-connection Ricci wherever the
    # torsion is skew; equality holds when the connections coincide.
    for name, params in [("flat", {"n": 2}), ("sphere-gradient", {"n": 2}),
                         ("so3-left-invariant", {})]:
        sys = system_of(name, params)
        cid, x = sys.sample_points(np.random.default_rng(13), 1)[0]
        pd = point_data(sys, cid, x)
        R_lc = curvature_from_christoffel(sys, cid, x, "lc")
        diff = (ricci_bilinear(ricci_sharp(R_lc, pd.ginv), pd.g)
                - ricci_bilinear(pd.ric_sharp, pd.g))
        diff = 0.5 * (diff + diff.T)
        Linv = np.linalg.inv(np.linalg.cholesky(pd.g))
        eigs = np.linalg.eigvalsh(Linv @ diff @ Linv.T)
        assert eigs.min() > -1e-7
        if name != "so3-left-invariant":
            assert np.max(np.abs(eigs)) < 1e-7


# -------------------------------------------------------------- generators


def test_generator_routes_flat_ou():
    sys = system_of("flat", {"n": 2, "drift": ["-x1", "-x2"]})
    x = np.array([0.5, -1.0])
    f = scalar_from_expr(sys, "u", "x1*x1")
    lw, lc = scalar_generator(sys, "u", x, f)
    # a.grad f + (1/2) laplacian f = -2 x1^2 + 1
    assert lw == pytest.approx(-2 * x[0] ** 2 + 1.0, abs=1e-7)
    assert lw == pytest.approx(lc, abs=1e-9)


def test_covariant_derivative_of_defining_field(sphere):
    # the field y -> X(y) e, e in the row space at x, is LW-parallel at x
    cid, x = "n", np.array([0.1, 0.6])
    pd = point_data(sphere, cid, x)
    e = pd.Y @ np.array([1.0, -0.5])

    def z_field(y):
        return sphere.coeff_x(cid, y) @ e

    for _ in range(3):
        v = rng.normal(size=2)
        dz = covariant_derivative(sphere, cid, x, z_field, v, kind="lw")
        assert np.max(np.abs(dz)) < 1e-7


def test_lie_bracket_coordinate_fields():
    sys = system_of("flat", {"n": 2})

    def z1(y):
        return np.array([y[1], 0.0 * y[0]])

    def z2(y):
        return np.array([0.0 * y[0], y[0] * y[1]])

    x = np.array([1.0, 2.0])
    got = lie_bracket(z1, z2, x, DerivOracle())
    # [z1, z2] = Dz2 z1 - Dz1 z2
    want = np.array([-x[0] * x[1], x[1] ** 2])
    np.testing.assert_allclose(got, want, rtol=1e-7, atol=1e-9)


# ------------------------------------------------------------ moment forms


def test_ou_moment_form_constant():
    sys = system_of("flat", {"n": 2, "drift": ["-x1", "-x2"]})
    pd = point_data(sys, "u", np.array([0.3, 0.7]))
    B = moment_quadratic(pd)
    np.testing.assert_allclose(B, -2.0 * np.eye(2), atol=1e-7)
    for p in (2.0, 4.0):
        v = rng.normal(size=2)
        v = v / np.linalg.norm(v)
        assert moment_form(pd, v, p) == pytest.approx(-2.0, abs=1e-7)
        lo, hi = moment_form_extremes(pd, p)
        assert lo == pytest.approx(-2.0, abs=1e-6)
        assert hi == pytest.approx(-2.0, abs=1e-6)


def test_moment_form_homogeneous_degree_two(sphere):
    pd = point_data(sphere, "n", np.array([0.2, -0.5]))
    v = rng.normal(size=2)
    h1 = moment_form(pd, v, 4.0)
    h2 = moment_form(pd, 3.0 * v, 4.0)
    assert h2 == pytest.approx(9.0 * h1, rel=1e-9)


def test_moment_form_extremes_deterministic(sphere):
    pd = point_data(sphere, "n", np.array([0.1, 0.2]))
    a = moment_form_extremes(pd, 3.0)
    b = moment_form_extremes(pd, 3.0)
    assert a == b


# ---------------------------------------------------------------- 1-forms


def test_one_form_generator_routes_agree(sphere):
    cid, x = "n", np.array([0.3, 0.1])
    phi = one_form_from_spec(sphere, cid, {"d_of": "x1"})
    v = np.array([0.7, -0.2])
    direct = one_form_generator(sphere, cid, x, phi, v)
    hodge = one_form_generator_hodge(sphere, cid, x, phi, v)
    assert direct == pytest.approx(hodge, abs=1e-7)


def test_codifferential_routes_agree(sphere):
    cid, x = "n", np.array([-0.2, 0.4])
    phi = one_form_from_spec(sphere, cid, {"d_of": "x3"})
    a = codifferential_1form(sphere, cid, x, phi)
    b = codifferential_1form_lie(sphere, cid, x, phi)
    assert a == pytest.approx(b, abs=1e-6)


def test_exterior_derivative_of_exact_form_vanishes(sphere):
    cid, x = "n", np.array([0.5, 0.2])
    phi = one_form_from_spec(sphere, cid, {"d_of": "x2"})
    d = exterior_derivative_1form(phi, x, DerivOracle())
    assert np.max(np.abs(d)) < 1e-6


def test_one_form_component_spec():
    sys = system_of("flat", {"n": 2})
    phi = one_form_from_spec(sys, "u", {"components": ["x2", "x1"]})
    np.testing.assert_allclose(phi(np.array([3.0, 4.0])), [4.0, 3.0],
                               atol=1e-12)


# ----------------------------------------------------------------- guards


def test_degenerate_coefficient_detected():
    sys = system_of("custom", {
        "n": 1, "m": 2, "x_entries": [["x1", "0"]],
    })
    with pytest.raises(DegenerateX):
        geometry_point(sys, sys.start()[0], np.zeros(1))


def test_christoffel_batched_points(sphere):
    xs = np.array([[0.1, 0.2], [0.3, -0.1], [0.0, 0.4]])
    gammas = christoffel(sphere, "n", xs, "lw")
    assert gammas.shape == (3, 2, 2, 2)
    one = christoffel(sphere, "n", xs[1], "lw")
    np.testing.assert_allclose(gammas[1], one, atol=1e-12)
