"""Pathwise simulation of the stochastic flow and its companion processes.

One noise grid drives everything: the state (Stratonovich Heun), the
variational Jacobian, parallel transports for the induced connection and its
adjoint, the covariant Ito form of the derivative flow, the filtered
(damped) flow, and the noise decomposition with its exact discrete
reconstruction.  Paths are independent given (seed, path index); worker
threads split the index range into fixed blocks and results are merged in
block order, so reports are identical for any thread count.

Noise: path ``i`` of a run seeded ``s`` draws from
``np.random.Generator(np.random.Philox(key=[s, i]))``; increments are
``standard_normal((steps, m)) * sqrt(dt)``.  Philox is counter-based, so the
stream depends only on ``(s, i)``.

Conventions: "∘dB" equations step with Heun (predictor-corrector); explicit
Ito sums (anti-developments, the covariant derivative-flow equation) use
left-point Euler on the same grid.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from .errors import BadParams
from .geometry import PointData, point_data, tss_check
from .model import SdeSystem

__all__ = [
    "NoiseGrid", "sample_noise", "FlowPath", "SimResult", "simulate",
    "integrate_flow", "derivative_flow", "parallel_transport",
    "covariant_derivative_flow", "filtered_flow", "noise_decompose",
    "reconstruction_error", "transport_along",
]

BLOCK = 2048  # paths per worker block; fixed so thread count cannot matter


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseGrid:
    """Increments of one driving Brownian path on a uniform grid."""

    seed: int
    path_index: int
    steps: int
    dt: float
    m: int
    increments: np.ndarray  # (steps, m)


def sample_noise(seed: int, path_index: int, steps: int, dt: float, m: int) -> NoiseGrid:
    """Deterministic Gaussian increments for one path.

    The stream is a pure function of (seed, path_index): a Philox
    counter-based generator keyed by the pair, drawing standard normals via
    numpy's ziggurat and scaling by sqrt(dt).
    """
    if dt <= 0:
        raise BadParams("dt must be positive")
    rng = np.random.Generator(np.random.Philox(key=[seed, path_index]))
    inc = rng.standard_normal((steps, m)) * sqrt(dt)
    return NoiseGrid(seed=seed, path_index=path_index, steps=steps, dt=dt, m=m,
                     increments=inc)


def _block_noise(seed: int, indices: np.ndarray, steps: int, dt: float, m: int) -> np.ndarray:
    out = np.empty((len(indices), steps, m))
    for row, idx in enumerate(indices):
        out[row] = sample_noise(seed, int(idx), steps, dt, m).increments
    return out


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class FlowPath:
    """Full time series for a (small) batch of paths, axes (step, path, ...)."""

    times: np.ndarray                 # (K+1,)
    cid_idx: np.ndarray               # (K+1, P)
    x: np.ndarray                     # (K+1, P, n)
    alive: np.ndarray                 # (K+1, P)
    J: np.ndarray                     # (K+1, P, n, n)
    par_lw: np.ndarray
    par_adj: np.ndarray
    What: np.ndarray                  # filtered flow in the x0 frame
    Vhat: np.ndarray                  # covariant Ito flow in the x0 frame
    b_raw: np.ndarray                 # (K+1, P, m) cumulative driving noise
    b_breve: np.ndarray               # (K+1, P, n) anti-development
    beta: np.ndarray                  # (K+1, P, m) normal-frame part
    b_tilde: np.ndarray               # (K+1, P, m)
    b_bar: np.ndarray                 # (K+1, P, m)
    recon: np.ndarray                 # (K+1, P, m): cumulative sum of //~ dB_bar
    centers: np.ndarray | None        # (K+1, P, 4) for group scenarios
    increments: np.ndarray            # (P, K, m)
    chart_names: tuple[str, ...]
    g0: np.ndarray
    x0: np.ndarray
    cid0: str


@dataclass
class SimResult:
    """Terminal state of a batched run plus per-path accumulators."""

    t: float
    dt: float
    steps: int
    seed: int
    n_paths: int
    chart_names: tuple[str, ...]
    cid0: str
    x0: np.ndarray
    g0: np.ndarray
    ginv0: np.ndarray
    X0: np.ndarray
    Y0: np.ndarray
    L0: np.ndarray                    # cholesky factor of g0
    F0: np.ndarray | None             # (m, m-n) normal frame at the start
    cid_idx: np.ndarray               # (N,)
    x: np.ndarray                     # (N, n)
    centers: np.ndarray | None
    embedded: np.ndarray              # (N, embed_dim)
    alive: np.ndarray                 # (N,)
    g_T: np.ndarray                   # (N, n, n)
    J: np.ndarray                     # (N, n, n)
    par_lw: np.ndarray
    par_adj: np.ndarray
    What: np.ndarray
    Vhat: np.ndarray
    F: np.ndarray | None
    b_raw: np.ndarray
    b_breve: np.ndarray
    beta: np.ndarray
    b_bar: np.ndarray
    recon_err: np.ndarray             # (N,) max-abs reconstruction defect
    qv: np.ndarray                    # (N, m, m) quadratic variation of b_bar
    cross: np.ndarray                 # (N, m, m) sum of dB_tilde x dbeta
    bismut_vec: np.ndarray            # (N, n): S(v0) = bismut_vec . v0
    hp_lo: np.ndarray | None          # (N,) integral of the lower moment form
    hp_hi: np.ndarray | None
    n_dropped: int
    path: FlowPath | None = None

    def W(self) -> np.ndarray:
        """Filtered flow matrices W_T = //^_T What_T."""
        return self.par_adj @ self.What

    def V(self) -> np.ndarray:
        """Covariant-Ito derivative flow matrices V_T = //^_T Vhat_T."""
        return self.par_adj @ self.Vhat


# ---------------------------------------------------------------------------
# batched bundle evaluation across charts
# ---------------------------------------------------------------------------


def _bundle_grouped(system: SdeSystem, chart_names, cid_idx: np.ndarray,
                    x: np.ndarray, light: bool) -> PointData:
    if len(chart_names) == 1:
        return point_data(system, chart_names[0], x, light=light)
    out: PointData | None = None
    for k, cid in enumerate(chart_names):
        mask = cid_idx == k
        if not mask.any():
            continue
        pd = point_data(system, cid, x[mask], light=light)
        if out is None:
            out = PointData(
                X=np.empty(x.shape[:-1] + pd.X.shape[-2:]),
                A=np.empty_like(x),
                DX=np.empty(x.shape[:-1] + pd.DX.shape[-3:]),
                DA=None if pd.DA is None else np.empty(x.shape[:-1] + pd.DA.shape[-2:]),
            )
            if not light:
                for name in ("g", "ginv", "Y", "PT", "PN", "gamma", "gamma_adj",
                             "gradX", "ric_sharp", "nabla_a"):
                    val = getattr(pd, name)
                    setattr(out, name, np.empty(x.shape[:-1] + val.shape[len(pd.X.shape[:-2]):]))
        for name in ("X", "A", "DX", "DA", "g", "ginv", "Y", "PT", "PN",
                     "gamma", "gamma_adj", "gradX", "ric_sharp", "nabla_a"):
            dst = getattr(out, name)
            src = getattr(pd, name)
            if dst is not None and src is not None:
                dst[mask] = src
    return out


def _scatter_rows(dst: PointData, src: PointData, mask: np.ndarray) -> None:
    for name in ("X", "A", "DX", "DA", "g", "ginv", "Y", "PT", "PN",
                 "gamma", "gamma_adj", "gradX", "ric_sharp", "nabla_a"):
        d = getattr(dst, name)
        s = getattr(src, name)
        if d is not None and s is not None:
            d[mask] = s


def _gamma_light(system: SdeSystem, chart_names, cid_idx: np.ndarray,
                 x: np.ndarray) -> np.ndarray:
    """Induced-connection Christoffels from a light bundle evaluation."""
    pd = _bundle_grouped(system, chart_names, cid_idx, x, light=True)
    Xt = np.swapaxes(pd.X, -1, -2)
    Y = Xt @ np.linalg.inv(pd.X @ Xt)
    return -np.einsum("...irj,...rk->...ijk", pd.DX, Y)


def _isometrize(par: np.ndarray, g: np.ndarray, L0invT: np.ndarray,
                L0T: np.ndarray) -> np.ndarray:
    """Snap a transport frame to an exact g-isometry.

    Transport with a metric connection satisfies par^T g par = g0; one
    integrator step only meets that to local truncation order.  Replacing
    the metric-frame factor by its polar orthogonal part restores the
    identity exactly while leaving the rotation content untouched.
    """
    L = np.linalg.cholesky(g)
    Q = np.swapaxes(L, -1, -2) @ par @ L0invT
    u, _, vh = np.linalg.svd(Q)
    return np.swapaxes(np.linalg.inv(L), -1, -2) @ (u @ vh) @ L0T


def _polar_columns(mat: np.ndarray) -> np.ndarray:
    """Closest matrix with orthonormal columns (polar factor), batched."""
    if mat.shape[-1] == 1:
        nrm = np.linalg.norm(mat, axis=-2, keepdims=True)
        return mat / np.where(nrm == 0.0, 1.0, nrm)
    u, _, vh = np.linalg.svd(mat, full_matrices=False)
    return u @ vh


def _null_frame(X0: np.ndarray) -> np.ndarray | None:
    """Orthonormal basis of ker X0 (rows m), deterministic via SVD."""
    n, m = X0.shape
    if m == n:
        return None
    _, _, vh = np.linalg.svd(X0)
    return vh[n:].T.copy()  # (m, m-n)


# ---------------------------------------------------------------------------
# the engine
# ---------------------------------------------------------------------------


def _mwhere(mask: np.ndarray, new: np.ndarray, old: np.ndarray) -> np.ndarray:
    return np.where(mask.reshape(mask.shape + (1,) * (new.ndim - 1)), new, old)


def _hp_extremes_quadratic(bundle: PointData) -> tuple[np.ndarray, np.ndarray]:
    from .geometry import moment_quadratic
    B = moment_quadratic(bundle)
    L = np.linalg.cholesky(bundle.g)
    Linv = np.linalg.inv(L)
    evals = np.linalg.eigvalsh(Linv @ B @ np.swapaxes(Linv, -1, -2))
    return evals[..., 0], evals[..., -1]


def _hp_extremes(bundle: PointData, p: float) -> tuple[np.ndarray, np.ndarray]:
    # gradX = 0 kills the quartic term, so the p = 2 eigensolve covers any p
    if p == 2.0 or float(np.max(np.abs(bundle.gradX))) < 1e-12:
        return _hp_extremes_quadratic(bundle)
    from .geometry import moment_form_extremes
    return moment_form_extremes(bundle, p, grid=128)


def _run_block(system: SdeSystem, seed: int, indices: np.ndarray, steps: int,
               dt: float, cid0: str, x0: np.ndarray, hp_p: float | None,
               record: bool, noise: np.ndarray | None = None) -> dict:
    n, m = system.n, system.m
    P = len(indices)
    chart_names = tuple(c.cid for c in system.charts)
    cid0_idx = chart_names.index(cid0)
    if noise is None:
        noise = _block_noise(seed, indices, steps, dt, m)

    x = np.broadcast_to(x0, (P, n)).copy()
    cid_idx = np.full(P, cid0_idx, dtype=np.int64)
    centers = None
    if system.is_group:
        centers = np.broadcast_to(system.group_identity(), (P, 4)).copy()
    eye = np.broadcast_to(np.eye(n), (P, n, n))
    J = eye.copy()
    par_lw = eye.copy()
    par_adj = eye.copy()
    Vhat = eye.copy()
    What = eye.copy()
    alive = np.ones(P, dtype=bool)

    bundle = _bundle_grouped(system, chart_names, cid_idx, x, light=False)
    origin_bundle = bundle if system.is_group else None
    g0 = bundle.g[0].copy()
    ginv0 = bundle.ginv[0].copy()
    X0 = bundle.X[0].copy()
    Y0 = bundle.Y[0].copy()
    L0 = np.linalg.cholesky(g0)
    L0invT = np.linalg.inv(L0).T
    # the induced connection is always metric; its adjoint only under
    # skew-symmetric torsion, so only then may //^ frames be isometrized
    adj_metric = tss_check(system, cid0, np.asarray(x0, dtype=float))[0]
    F0 = _null_frame(X0)
    F = None if F0 is None else np.broadcast_to(F0, (P,) + F0.shape).copy()

    b_raw = np.zeros((P, m))
    b_breve = np.zeros((P, n))
    beta = np.zeros((P, m))
    b_bar = np.zeros((P, m))
    recon = np.zeros((P, m))
    qv = np.zeros((P, m, m))
    cross = np.zeros((P, m, m))
    bis_vec = np.zeros((P, n))
    hp_lo = np.zeros(P) if hp_p is not None else None
    hp_hi = np.zeros(P) if hp_p is not None else None

    rec: dict[str, list] = {}
    if record:
        for key in ("cid_idx", "x", "alive", "J", "par_lw", "par_adj", "What",
                    "Vhat", "b_raw", "b_breve", "beta", "b_tilde", "b_bar",
                    "recon", "centers"):
            rec[key] = []

        def snapshot():
            rec["cid_idx"].append(cid_idx.copy())
            rec["x"].append(x.copy())
            rec["alive"].append(alive.copy())
            rec["J"].append(J.copy())
            rec["par_lw"].append(par_lw.copy())
            rec["par_adj"].append(par_adj.copy())
            rec["What"].append(What.copy())
            rec["Vhat"].append(Vhat.copy())
            rec["b_raw"].append(b_raw.copy())
            rec["b_breve"].append(b_breve.copy())
            rec["beta"].append(beta.copy())
            rec["b_tilde"].append((b_breve @ Y0.T).copy())
            rec["b_bar"].append(b_bar.copy())
            rec["recon"].append(recon.copy())
            rec["centers"].append(None if centers is None else centers.copy())

        snapshot()

    guard = system.guard_radius if system.guard_radius is not None else np.inf
    has_drift = system.has_drift

    for k in range(steps):
        dB = noise[:, k, :]
        Bk = bundle

        # predictor / corrector for the state
        drift_k = Bk.A * dt
        x_star = x + np.einsum("...ij,...j->...i", Bk.X, dB) + drift_k
        Bs = _bundle_grouped(system, chart_names, cid_idx, x_star, light=True)
        x_plus = (x + 0.5 * np.einsum("...ij,...j->...i", Bk.X + Bs.X, dB)
                  + 0.5 * (Bk.A + Bs.A) * dt)

        bad = ~np.isfinite(x_plus).all(axis=-1)
        if np.isfinite(guard):
            bad |= np.linalg.norm(x_plus, axis=-1) > guard
        upd = alive & ~bad
        alive = upd.copy()
        x_plus = _mwhere(upd, x_plus, x)

        # variational Jacobian, Heun on dJ = (DX(x) dB + DA(x) dt) J
        DGk = np.einsum("...irj,...r->...ij", Bk.DX, dB)
        DGs = np.einsum("...irj,...r->...ij", Bs.DX, dB)
        if has_drift:
            DGk = DGk + Bk.DA * dt
            DGs = DGs + Bs.DA * dt
        J_new = J + 0.5 * (DGk @ J + DGs @ (J + DGk @ J))

        # full bundle at the corrected point (pre chart switch)
        Bp = _bundle_grouped(system, chart_names, cid_idx, x_plus, light=False)
        dx = x_plus - x

        # parallel transports, RK4 on dv/ds = -Gamma(x + s dx)(dx, v)
        gamma_mid = _gamma_light(system, chart_names, cid_idx, x + 0.5 * dx)

        def _seg_mats(spec):
            return tuple(-np.einsum(spec, gam, dx)
                         for gam in (Bk.gamma, gamma_mid, Bp.gamma))

        def _step_transport(Fk, Fm, Fp, par):
            k1 = Fk @ par
            k2 = Fm @ (par + 0.5 * k1)
            k3 = Fm @ (par + 0.5 * k2)
            k4 = Fp @ (par + k3)
            return par + (k1 + 2.0 * (k2 + k3) + k4) / 6.0

        par_lw_new = _step_transport(*_seg_mats("...ijk,...j->...ik"), par_lw)
        par_adj_new = _step_transport(*_seg_mats("...ikj,...j->...ik"), par_adj)
        par_lw_new = _isometrize(par_lw_new, Bp.g, L0invT, L0.T)
        if adj_metric:
            par_adj_new = _isometrize(par_adj_new, Bp.g, L0invT, L0.T)

        # Ito sums at the left point
        inv_lw = np.linalg.inv(par_lw)
        inv_adj = np.linalg.inv(par_adj)
        dBbreve = np.einsum("...ij,...jk,...k->...i", inv_lw, Bk.X, dB)
        dBtilde = dBbreve @ Y0.T
        if F0 is not None:
            dbeta = np.einsum("ij,...kj,...k->...i", F0, F, dB)
        else:
            dbeta = np.zeros_like(dBtilde)
        dBbar = dBtilde + dbeta
        # reconstruction through the full transport, kept honest term by term
        tan = np.einsum("...ij,...jk,kl,...l->...i", Bk.Y, par_lw, X0, dBbar)
        if F0 is not None:
            nor = np.einsum("...ij,kj,...k->...i", F, F0, dBbar)
        else:
            nor = 0.0
        recon_inc = tan + nor

        # covariant Ito derivative flow in the adjoint-transported frame
        Vk = par_adj @ Vhat
        G_noise = np.einsum("...aib,...i->...ab", Bk.gradX, dB)
        M_ito = G_noise - 0.5 * dt * Bk.ric_sharp + dt * Bk.nabla_a
        Vhat_new = Vhat + inv_adj @ (M_ito @ Vk)

        # Bismut integrand <//~^-1 W_s v0, dB_breve>_{g0}, linear in v0
        Wk = par_adj @ What
        bis_inc = np.einsum("...ba,bc,...c->...a", inv_lw @ Wk, g0, dBbreve)

        # filtered flow, RK2 on What' = L(s) What
        inv_adj_new = np.linalg.inv(par_adj_new)
        damp_k = -0.5 * Bk.ric_sharp + Bk.nabla_a
        damp_p = -0.5 * Bp.ric_sharp + Bp.nabla_a
        Lk = inv_adj @ (damp_k @ par_adj)
        Lp = inv_adj_new @ (damp_p @ par_adj_new)
        What_new = What + 0.5 * dt * (Lk @ What + Lp @ (What + dt * (Lk @ What)))

        # moment-form integrals at the left point
        if hp_p is not None:
            lo, hi = _hp_extremes(Bk, hp_p)
            hp_lo = hp_lo + np.where(upd, lo * dt, 0.0)
            hp_hi = hp_hi + np.where(upd, hi * dt, 0.0)

        # commit masked updates
        J = _mwhere(upd, J_new, J)
        par_lw = _mwhere(upd, par_lw_new, par_lw)
        par_adj = _mwhere(upd, par_adj_new, par_adj)
        Vhat = _mwhere(upd, Vhat_new, Vhat)
        What = _mwhere(upd, What_new, What)
        b_raw = b_raw + _mwhere(upd, dB, np.zeros_like(dB))
        b_breve = b_breve + _mwhere(upd, dBbreve, np.zeros_like(dBbreve))
        beta = beta + _mwhere(upd, dbeta, np.zeros_like(dbeta))
        b_bar = b_bar + _mwhere(upd, dBbar, np.zeros_like(dBbar))
        recon = recon + _mwhere(upd, recon_inc, np.zeros_like(recon))
        qv = qv + _mwhere(upd, dBbar[..., :, None] * dBbar[..., None, :], np.zeros_like(qv))
        cross = cross + _mwhere(upd, dBtilde[..., :, None] * dbeta[..., None, :], np.zeros_like(cross))
        bis_vec = bis_vec + _mwhere(upd, bis_inc, np.zeros_like(bis_inc))

        # normal frame: project forward, renormalize by the polar factor
        if F0 is not None:
            F = _mwhere(upd, _polar_columns(Bp.PN @ F), F)

        # chart switches / group recentering
        if system.is_group:
            new_centers = system.group_compose(centers, x_plus)
            M = system.group_recenter_jacobian(x_plus)
            centers = _mwhere(upd, new_centers, centers)
            J = _mwhere(upd, M @ J, J)
            par_lw = _mwhere(upd, M @ par_lw, par_lw)
            par_adj = _mwhere(upd, M @ par_adj, par_adj)
            x = _mwhere(upd, np.zeros_like(x), x_plus)
            bundle = origin_bundle
        else:
            x = x_plus
            bundle = Bp
            if len(chart_names) > 1:
                switched = np.zeros(P, dtype=bool)
                for ci, cid in enumerate(chart_names):
                    sel = upd & (cid_idx == ci)
                    if not sel.any():
                        continue
                    sw = np.zeros(P, dtype=bool)
                    sw[sel] = np.asarray(system.switch_mask(cid, x[sel]))
                    if not sw.any():
                        continue
                    target = system.switch_target(cid)
                    ti = chart_names.index(target)
                    xn = system.transition(cid, target, x[sw])
                    M = system.transition_jacobian(cid, target, x[sw])
                    x[sw] = xn
                    cid_idx[sw] = ti
                    J[sw] = M @ J[sw]
                    par_lw[sw] = M @ par_lw[sw]
                    par_adj[sw] = M @ par_adj[sw]
                    switched |= sw
                if switched.any():
                    pd_new = _bundle_grouped(system, chart_names, cid_idx[switched],
                                             x[switched], light=False)
                    _scatter_rows(bundle, pd_new, switched)
        if record:
            snapshot()

    recon_err = np.max(np.abs(recon - b_raw), axis=-1)
    out = {
        "chart_names": chart_names, "cid0": cid0, "x0": x0,
        "g0": g0, "ginv0": ginv0, "X0": X0, "Y0": Y0, "L0": L0, "F0": F0,
        "cid_idx": cid_idx, "x": x, "centers": centers, "alive": alive,
        "g_T": bundle.g.copy() if bundle.g.ndim == 3 else np.broadcast_to(bundle.g, (P, n, n)).copy(),
        "J": J, "par_lw": par_lw, "par_adj": par_adj, "What": What, "Vhat": Vhat,
        "F": F, "b_raw": b_raw, "b_breve": b_breve, "beta": beta, "b_bar": b_bar,
        "recon_err": recon_err, "qv": qv, "cross": cross, "bismut_vec": bis_vec,
        "hp_lo": hp_lo, "hp_hi": hp_hi,
    }
    if record:
        series = {}
        for key, frames in rec.items():
            if frames[0] is None:
                series[key] = None
            else:
                series[key] = np.stack(frames, axis=0)
        out["record"] = series
        out["increments"] = noise
    return out


def simulate(system: SdeSystem, *, t: float, dt: float, n_paths: int, seed: int,
             x0: np.ndarray | None = None, cid: str | None = None,
             hp_p: float | None = None, threads: int = 1,
             record: bool = False, noise: np.ndarray | None = None) -> SimResult:
    """Run ``n_paths`` independent paths to time ``t`` and gather terminals.

    ``record=True`` additionally stores the full time series (meant for small
    batches).  ``noise`` optionally supplies the increments (n_paths, steps, m)
    directly, bypassing the seeded streams.
    """
    steps = int(round(t / dt))
    if steps <= 0 or abs(steps * dt - t) > 1e-9 * max(1.0, t):
        raise BadParams(f"t={t} is not an integer multiple of dt={dt}")
    if cid is None or x0 is None:
        cid_d, x0_d = system.start()
        cid = cid if cid is not None else cid_d
        x0 = x0 if x0 is not None else x0_d
    x0 = np.asarray(x0, dtype=float)

    blocks = [np.arange(lo, min(lo + BLOCK, n_paths))
              for lo in range(0, n_paths, BLOCK)]
    if (record or noise is not None) and len(blocks) > 1:
        raise BadParams("record mode and explicit noise support one block of paths")

    def work(idx_block):
        return _run_block(system, seed, idx_block, steps, dt, cid, x0, hp_p,
                          record, noise=noise)

    if threads <= 1 or len(blocks) == 1:
        results = [work(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, blocks))

    def cat(key):
        vals = [r[key] for r in results]
        if vals[0] is None:
            return None
        return np.concatenate(vals, axis=0)

    first = results[0]
    alive = cat("alive")
    cid_idx = cat("cid_idx")
    x = cat("x")
    centers = cat("centers")
    # terminal embedding, chart by chart
    emb = np.empty((n_paths, system.embed_dim))
    chart_names = first["chart_names"]
    for ci, c in enumerate(chart_names):
        sel = cid_idx == ci
        if not sel.any():
            continue
        if system.is_group:
            emb[sel] = system.embed(c, x[sel], center=centers[sel])
        else:
            emb[sel] = system.embed(c, x[sel])

    path = None
    if record:
        series = first["record"]
        path = FlowPath(
            times=np.arange(steps + 1) * dt,
            cid_idx=series["cid_idx"], x=series["x"], alive=series["alive"],
            J=series["J"], par_lw=series["par_lw"], par_adj=series["par_adj"],
            What=series["What"], Vhat=series["Vhat"], b_raw=series["b_raw"],
            b_breve=series["b_breve"], beta=series["beta"],
            b_tilde=series["b_tilde"], b_bar=series["b_bar"],
            recon=series["recon"],
            centers=series["centers"], increments=first["increments"],
            chart_names=chart_names, g0=first["g0"], x0=first["x0"], cid0=cid,
        )

    return SimResult(
        t=t, dt=dt, steps=steps, seed=seed, n_paths=n_paths,
        chart_names=chart_names, cid0=cid, x0=first["x0"], g0=first["g0"],
        ginv0=first["ginv0"], X0=first["X0"], Y0=first["Y0"], L0=first["L0"],
        F0=first["F0"], cid_idx=cid_idx, x=x, centers=centers, embedded=emb,
        alive=alive, g_T=cat("g_T"), J=cat("J"), par_lw=cat("par_lw"),
        par_adj=cat("par_adj"), What=cat("What"), Vhat=cat("Vhat"), F=cat("F"),
        b_raw=cat("b_raw"), b_breve=cat("b_breve"), beta=cat("beta"),
        b_bar=cat("b_bar"), recon_err=cat("recon_err"), qv=cat("qv"),
        cross=cat("cross"), bismut_vec=cat("bismut_vec"),
        hp_lo=cat("hp_lo"), hp_hi=cat("hp_hi"),
        n_dropped=int(n_paths - alive.sum()), path=path,
    )


# ---------------------------------------------------------------------------
# pathwise wrappers (spec-level operations on one noise grid)
# ---------------------------------------------------------------------------


def _as_noise_list(noise) -> list[NoiseGrid]:
    if isinstance(noise, NoiseGrid):
        return [noise]
    return list(noise)


def integrate_flow(system: SdeSystem, x0: np.ndarray | None, noise: NoiseGrid,
                   cid: str | None = None) -> FlowPath:
    """Integrate the flow for the paths of one shared-seed noise family.

    All companion processes (Jacobian, transports, filtered and covariant
    flows, decomposed noises) ride the same grid, per the pathwise identities
    they are meant to verify.
    """
    grids = _as_noise_list(noise)
    steps, dt, seed = grids[0].steps, grids[0].dt, grids[0].seed
    for g in grids:
        if (g.steps, g.dt) != (steps, dt):
            raise BadParams("all noise grids in one run must share steps and dt")
    inc = np.stack([g.increments for g in grids], axis=0)
    res = simulate(system, t=steps * dt, dt=dt, n_paths=len(grids), seed=seed,
                   x0=x0, cid=cid, record=True, noise=inc)
    return res.path


def derivative_flow(system: SdeSystem, path: FlowPath) -> np.ndarray:
    """Variational-equation Jacobians along the recorded path: (K+1, P, n, n)."""
    return path.J


def parallel_transport(system: SdeSystem, path: FlowPath, kind: str,
                       v0: np.ndarray | None = None) -> np.ndarray:
    """Transport frames (or a vector) along a recorded path.

    kind 'lw' uses the induced connection, 'adjoint' its adjoint.
    """
    frames = {"lw": path.par_lw, "adjoint": path.par_adj}.get(kind)
    if frames is None:
        raise BadParams(f"unknown transport kind {kind!r}")
    if v0 is None:
        return frames
    return frames @ np.asarray(v0, dtype=float)


def covariant_derivative_flow(system: SdeSystem, path: FlowPath,
                              v0: np.ndarray) -> np.ndarray:
    """Ito-form derivative flow applied to v0: (K+1, P, n)."""
    return (path.par_adj @ path.Vhat) @ np.asarray(v0, dtype=float)


def filtered_flow(system: SdeSystem, path: FlowPath, v0: np.ndarray) -> np.ndarray:
    """Filtered (damped) flow applied to v0: (K+1, P, n)."""
    return (path.par_adj @ path.What) @ np.asarray(v0, dtype=float)


def noise_decompose(system: SdeSystem, path: FlowPath) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative (B_breve, beta, B_tilde, B_bar) series from a recorded path."""
    return path.b_breve, path.beta, path.b_tilde, path.b_bar


def reconstruction_error(path: FlowPath) -> np.ndarray:
    """Pathwise max-abs defect of B = sum //~ dB_bar, per path."""
    return np.max(np.abs(path.recon - path.b_raw), axis=(0, -1))


def transport_along(system: SdeSystem, cid: str, xs: np.ndarray, kind: str,
                    oracle=None) -> np.ndarray:
    """RK4 parallel transport along an explicit discrete path (K+1, n).

    Serves deterministic-curve experiments (holonomy around loops); the SDE
    engine owns transport along simulated paths.
    """
    from .geometry import christoffel
    xs = np.asarray(xs, dtype=float)
    gammas = christoffel(system, cid, xs, kind, oracle)
    mids = christoffel(system, cid, 0.5 * (xs[:-1] + xs[1:]), kind, oracle)
    K = xs.shape[0] - 1
    n = xs.shape[1]
    frames = np.empty((K + 1, n, n))
    frames[0] = np.eye(n)
    for k in range(K):
        dx = xs[k + 1] - xs[k]
        par = frames[k]
        Fk, Fm, Fp = (-np.einsum("ijk,j->ik", gam, dx)
                      for gam in (gammas[k], mids[k], gammas[k + 1]))
        k1 = Fk @ par
        k2 = Fm @ (par + 0.5 * k1)
        k3 = Fm @ (par + 0.5 * k2)
        k4 = Fp @ (par + k3)
        frames[k + 1] = par + (k1 + 2.0 * (k2 + k3) + k4) / 6.0
    return frames
