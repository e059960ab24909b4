"""Path engine: seeding, integrators, transports, companion processes.

Frozen references:
  flat with drift -x:  J_t = exp(-t) I (deterministic), running moment
                       integral = -2 t for any p
  circle:              J = W = 1 exactly, the diffusion field is parallel
  sphere S^2:          transport holonomy around a loop equals enclosed
                       area; running moment integral vanishes for p = 2
  so(3):               J equals the adjoint-transport at integrator order
"""

import numpy as np
import pytest

from flowgeom.errors import BadParams
from flowgeom.model import build_scenario
from flowgeom.stochastic import (
    integrate_flow,
    noise_decompose,
    parallel_transport,
    reconstruction_error,
    sample_noise,
    simulate,
    transport_along,
)


def system_of(name, params=None):
    return build_scenario(name, params or {}).system


@pytest.fixture(scope="module")
def sphere():
    return system_of("sphere-gradient", {"n": 2})


@pytest.fixture(scope="module")
def ou():
    return system_of("flat", {"n": 2, "drift": ["-x1", "-x2"]})


# ------------------------------------------------------------------ noise


def test_noise_is_counter_keyed():
    # one stream per (seed, path) pair so any path is reproducible alone
    g = sample_noise(123, 17, 10, 0.04, 3)
    ref = np.random.Generator(np.random.Philox(key=[123, 17]))
    want = ref.standard_normal((10, 3)) * np.sqrt(0.04)
    np.testing.assert_array_equal(g.increments, want)


def test_noise_streams_distinct_and_stable():
    a = sample_noise(5, 0, 20, 0.01, 2)
    b = sample_noise(5, 1, 20, 0.01, 2)
    a2 = sample_noise(5, 0, 20, 0.01, 2)
    np.testing.assert_array_equal(a.increments, a2.increments)
    assert np.max(np.abs(a.increments - b.increments)) > 1e-3


def test_noise_moments_match_brownian_scaling():
    dt = 0.01
    inc = np.stack([sample_noise(7, i, 100, dt, 2).increments
                    for i in range(200)])
    z = inc / np.sqrt(dt)
    n = z.size
    assert abs(z.mean()) < 4.0 / np.sqrt(n)
    assert abs(z.var() - 1.0) < 4.0 * np.sqrt(2.0 / n)


def test_noise_rejects_bad_dt():
    with pytest.raises(BadParams):
        sample_noise(0, 0, 10, 0.0, 1)


# ------------------------------------------------------------ determinism


def test_simulate_thread_count_invariant(sphere):
    a = simulate(sphere, t=0.3, dt=1e-2, n_paths=300, seed=21, threads=1)
    b = simulate(sphere, t=0.3, dt=1e-2, n_paths=300, seed=21, threads=4)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.J, b.J)
    np.testing.assert_array_equal(a.qv, b.qv)
    np.testing.assert_array_equal(a.bismut_vec, b.bismut_vec)


def test_simulate_seed_controls_everything(sphere):
    a = simulate(sphere, t=0.2, dt=1e-2, n_paths=50, seed=1)
    b = simulate(sphere, t=0.2, dt=1e-2, n_paths=50, seed=1)
    c = simulate(sphere, t=0.2, dt=1e-2, n_paths=50, seed=2)
    np.testing.assert_array_equal(a.x, b.x)
    assert np.max(np.abs(a.x - c.x)) > 1e-3


def test_time_grid_validation(sphere):
    with pytest.raises(BadParams):
        simulate(sphere, t=0.35, dt=0.1, n_paths=100, seed=0)


def test_record_mode_single_block(sphere):
    with pytest.raises(BadParams):
        simulate(sphere, t=0.1, dt=1e-2, n_paths=3000, seed=0, record=True)


# --------------------------------------------------------------- the flow


def test_ou_jacobian_is_exponential(ou):
    # linear drift, constant diffusion: J is deterministic exp(-t) I and the
    # second-order scheme should hit it to O(dt^2) per unit time
    r = simulate(ou, t=0.5, dt=1e-2, n_paths=16, seed=1)
    assert np.max(np.abs(r.J - np.exp(-0.5) * np.eye(2))) < 1e-4


def test_circle_flow_is_parallel():
    r = simulate(system_of("circle"), t=1.0, dt=1e-2, n_paths=32, seed=4)
    np.testing.assert_array_equal(r.J, np.ones_like(r.J))
    np.testing.assert_array_equal(r.W(), np.ones_like(r.J))
    assert np.max(r.recon_err) < 1e-12


def test_jacobian_is_exact_derivative_of_the_step_map():
    # freeze the noise and difference the flow map in its start point: the
    # J recursion must be the literal differential of the x recursion
    sys = system_of("twisted-plane", {"alpha": 0.5})
    P, steps, dt = 8, 50, 1e-2
    noise = np.stack([sample_noise(11, i, steps, dt, 2).increments
                      for i in range(P)])
    base = simulate(sys, t=0.5, dt=dt, n_paths=P, seed=11, noise=noise)
    eps = 1e-6
    for j in range(2):
        dx0 = np.zeros(2)
        dx0[j] = eps
        rp = simulate(sys, t=0.5, dt=dt, n_paths=P, seed=11, noise=noise,
                      x0=dx0)
        rm = simulate(sys, t=0.5, dt=dt, n_paths=P, seed=11, noise=noise,
                      x0=-dx0)
        fd = (rp.x - rm.x) / (2 * eps)
        np.testing.assert_allclose(fd, base.J[:, :, j], atol=1e-7)


def test_sphere_chart_switching_preserves_the_point(sphere):
    r = simulate(sphere, t=4.0, dt=1e-2, n_paths=256, seed=13)
    assert sorted(set(r.cid_idx.tolist())) == [0, 1]  # both charts visited
    assert int(r.alive.sum()) == 256
    norms = np.linalg.norm(r.embedded, axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_guard_radius_kills_escaping_paths():
    sys = system_of("flat", {"n": 2, "guard_radius": 0.5})
    r = simulate(sys, t=1.0, dt=1e-2, n_paths=64, seed=6)
    assert r.n_dropped > 0
    assert r.n_dropped == 64 - int(r.alive.sum())
    assert np.all(np.isfinite(r.x))


# -------------------------------------------------------------- transports


def test_transports_are_isometries(sphere):
    r = simulate(sphere, t=1.0, dt=1e-2, n_paths=64, seed=9)
    for par in (r.par_lw, r.par_adj):
        pulled = np.einsum("pji,pjk,pkl->pil", par, r.g_T, par)
        np.testing.assert_allclose(pulled, np.broadcast_to(r.g0, pulled.shape),
                                   atol=1e-10)


def test_so3_jacobian_equals_adjoint_transport_at_scheme_order():
    # flat adjoint connection: the derivative flow IS the adjoint transport;
    # discretely they differ at integrator order and converge under halving
    so3 = system_of("so3-left-invariant")
    gaps = {}
    for dt in (1e-2, 5e-3):
        r = simulate(so3, t=1.0, dt=dt, n_paths=100, seed=5)
        gaps[dt] = np.max(np.abs(r.J - r.par_adj))
    assert gaps[1e-2] < 1e-2
    assert 1.6 < gaps[1e-2] / gaps[5e-3] < 3.2


def test_holonomy_equals_enclosed_area(sphere):
    # parallel transport around a closed loop on the unit sphere rotates by
    # the enclosed area (curvature 1)
    rho = 0.5
    K = 4000
    th = np.linspace(0.0, 2.0 * np.pi, K + 1)
    xs = rho * np.stack([np.cos(th), np.sin(th)], axis=1)
    frames = transport_along(sphere, "n", xs, "lw")
    X0 = sphere.coeff_x("n", xs[0])
    g0 = np.linalg.inv(X0 @ X0.T)
    v = np.array([1.0, 0.0])
    vT = frames[-1] @ v
    cosang = (vT @ g0 @ v) / np.sqrt((vT @ g0 @ vT) * (v @ g0 @ v))
    angle = np.arccos(np.clip(cosang, -1.0, 1.0))
    area = 4.0 * np.pi * rho**2 / (1.0 + rho**2)
    assert angle == pytest.approx(area, rel=1e-3)
    defect = np.max(np.abs(frames[-1].T @ g0 @ frames[-1] - g0))
    assert defect < 1e-9


# --------------------------------------------------- companion processes


def test_covariant_flow_approximates_jacobian(sphere):
    # same object in two discretizations; the gap closes as dt shrinks
    rel = {}
    for dt in (1e-2, 1e-3):
        r = simulate(sphere, t=0.5, dt=dt, n_paths=200, seed=3)
        v0 = np.linalg.inv(r.L0).T[:, 0]
        jv = r.J @ v0
        vv = r.V() @ v0
        num = np.sqrt(np.einsum("pi,pij,pj->p", jv - vv, r.g_T, jv - vv))
        den = np.sqrt(np.einsum("pi,pij,pj->p", jv, r.g_T, jv))
        rel[dt] = float(np.mean(num / den))
    assert rel[1e-2] < 0.12
    assert rel[1e-3] < 0.04
    assert rel[1e-2] / rel[1e-3] > 2.0


def test_filtered_flow_damps_by_ricci(sphere):
    # Ric = g on S^2, no drift: |W v0| = exp(-t/2) |v0| path by path
    r = simulate(sphere, t=0.5, dt=1e-2, n_paths=64, seed=8)
    v0 = np.linalg.inv(r.L0).T[:, 0]
    wv = r.W() @ v0
    norms = np.sqrt(np.einsum("pi,pij,pj->p", wv, r.g_T, wv))
    np.testing.assert_allclose(norms, np.exp(-0.25), atol=1e-3)


def test_running_moment_integrals(sphere, ou):
    # S^2 at p = 2 integrates an identically-zero form; the linear-drift
    # flat system integrates the constant -2
    r = simulate(sphere, t=1.0, dt=1e-2, n_paths=50, seed=2, hp_p=2.0)
    np.testing.assert_allclose(r.hp_lo, 0.0, atol=1e-10)
    np.testing.assert_allclose(r.hp_hi, 0.0, atol=1e-10)
    r = simulate(ou, t=1.0, dt=1e-2, n_paths=50, seed=2, hp_p=2.0)
    np.testing.assert_allclose(r.hp_lo, -2.0, atol=1e-9)
    np.testing.assert_allclose(r.hp_hi, -2.0, atol=1e-9)


def test_reconstruction_and_quadratic_variation(sphere):
    r = simulate(sphere, t=1.0, dt=1e-2, n_paths=200, seed=10)
    assert np.max(r.recon_err) < 1e-10
    qv_mean = r.qv[r.alive].mean(axis=0)
    assert np.linalg.norm(qv_mean - np.eye(3), "fro") < 0.15
    cross_mean = r.cross[r.alive].mean(axis=0)
    assert np.max(np.abs(cross_mean)) < 0.05


def test_recorded_series_shapes(sphere):
    t, dt, P = 0.1, 1e-2, 12
    r = simulate(sphere, t=t, dt=dt, n_paths=P, seed=14, record=True)
    fp = r.path
    K = int(round(t / dt))
    assert fp.x.shape == (K + 1, P, 2)
    assert fp.J.shape == (K + 1, P, 2, 2)
    assert fp.increments.shape == (P, K, 3)
    np.testing.assert_array_equal(fp.x[-1], r.x)
    np.testing.assert_array_equal(fp.J[0],
                                  np.broadcast_to(np.eye(2), (P, 2, 2)))


def test_flow_helpers_expose_recorded_processes(sphere):
    grids = [sample_noise(3, i, 10, 1e-2, 3) for i in range(6)]
    path = integrate_flow(sphere, None, grids)
    v0 = np.array([0.5, -0.25])
    par = parallel_transport(sphere, path, "lw")
    assert par.shape == path.J.shape
    w = parallel_transport(sphere, path, "lw", v0)
    np.testing.assert_allclose(w, par @ v0, atol=1e-14)
    with pytest.raises(BadParams):
        parallel_transport(sphere, path, "unknown")
    b_breve, beta, b_tilde, b_bar = noise_decompose(sphere, path)
    assert b_breve.shape[0] == 11
    assert np.max(reconstruction_error(path)) < 1e-10
