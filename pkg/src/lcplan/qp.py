"""Dense convex QP solver and the mixed-binary layer on top of it.

solve_qp handles

    min 1/2 z'Hz + g'z + c0
    s.t. A_eq z = b_eq,  A_in z <= b_in,  lb <= z <= ub

by eliminating the equalities through a QR null-space basis and running a
dual active-set method (Goldfarb-Idnani) on the reduced strictly convex
problem. The dual method needs no feasible starting point, its objective
increases monotonically (usable as a lower bound for pruning), and primal
infeasibility falls out as a Farkas-type certificate.

solve_mixed optimizes over monotone lane-membership patterns (binary
delta_t = "in the target lane at step t") either by enumerating the switch
step or by big-M branch and bound; the two strategies must agree and are
cross-checked in the tests.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .model import ValidationError


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max-iter"
    PRUNED = "pruned"  # internal: dual bound exceeded the caller's incumbent


@dataclass
class Qp:
    """Dense convex QP data. Use +-inf in lb/ub for free variables."""

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    c0: float = 0.0

    @property
    def n(self) -> int:
        return self.g.shape[0]

    def validate(self) -> None:
        n = self.n
        if self.H.shape != (n, n):
            raise ValidationError(f"H shape {self.H.shape} != ({n},{n})")
        if not np.allclose(self.H, self.H.T, atol=1e-10 * (1.0 + np.abs(self.H).max(initial=0.0))):
            raise ValidationError("H not symmetric")
        for name, A, b in (("eq", self.A_eq, self.b_eq), ("in", self.A_in, self.b_in)):
            if A.shape[0] != b.shape[0] or (A.size and A.shape[1] != n):
                raise ValidationError(f"A_{name}/b_{name} shapes inconsistent")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValidationError("lb/ub shape mismatch")
        if not np.all(self.lb <= self.ub):
            raise ValidationError("lb > ub somewhere")


def make_qp(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None, lb=None, ub=None, c0=0.0) -> Qp:
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    A_eq = np.asarray(A_eq, float).reshape(-1, n) if A_eq is not None else np.zeros((0, n))
    b_eq = np.asarray(b_eq, float).ravel() if b_eq is not None else np.zeros(0)
    A_in = np.asarray(A_in, float).reshape(-1, n) if A_in is not None else np.zeros((0, n))
    b_in = np.asarray(b_in, float).ravel() if b_in is not None else np.zeros(0)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, float)
    qp = Qp(np.asarray(H, float), g, A_eq, b_eq, A_in, b_in, lb, ub, c0)
    qp.validate()
    return qp


@dataclass
class FarkasRay:
    """Infeasibility certificate.

    y_* >= 0 weigh the inequality rows (A_in, lb rows, ub rows, appended
    extra rows), lam_eq is free on the equalities. Validity means the
    weighted row combination cancels to ~0 while the combined rhs is < 0.
    """

    y_in: np.ndarray
    y_lb: np.ndarray
    y_ub: np.ndarray
    lam_eq: np.ndarray
    y_extra: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    status: QpStatus
    duals_eq: np.ndarray
    duals_in: np.ndarray
    duals_lb: np.ndarray
    duals_ub: np.ndarray
    duals_extra: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_changes: int = 0
    certificate: FarkasRay | None = None
    dual_bound: float = -np.inf
    active_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def kkt_residuals(qp: Qp, sol: QpSolution,
                  A_extra: np.ndarray | None = None,
                  b_extra: np.ndarray | None = None) -> dict[str, float]:
    """Scaled KKT residuals computed from the problem data alone."""
    z = sol.z
    scale = 1.0 + np.abs(qp.g).max(initial=0.0)
    grad = qp.H @ z + qp.g
    if qp.A_eq.size:
        grad = grad + qp.A_eq.T @ sol.duals_eq
    if qp.A_in.size:
        grad = grad + qp.A_in.T @ sol.duals_in
    grad = grad - sol.duals_lb + sol.duals_ub
    if A_extra is not None and len(A_extra):
        grad = grad + np.asarray(A_extra).T @ sol.duals_extra
    out = {"stationarity": float(np.abs(grad).max(initial=0.0) / scale)}
    out["primal_eq"] = float(np.abs(qp.A_eq @ z - qp.b_eq).max(initial=0.0)) if qp.A_eq.size else 0.0
    slack_in = qp.b_in - qp.A_in @ z if qp.A_in.size else np.zeros(0)
    viol = [float((-slack_in).max(initial=0.0))]
    lo = np.where(np.isfinite(qp.lb), qp.lb - z, -np.inf)
    hi = np.where(np.isfinite(qp.ub), z - qp.ub, -np.inf)
    viol += [float(lo.max(initial=0.0)), float(hi.max(initial=0.0))]
    slack_x = None
    if A_extra is not None and len(A_extra):
        slack_x = np.asarray(b_extra) - np.asarray(A_extra) @ z
        viol.append(float((-slack_x).max(initial=0.0)))
    out["primal_in"] = max(0.0, *viol)
    duals_min = min(
        float(sol.duals_in.min(initial=0.0)),
        float(sol.duals_lb.min(initial=0.0)),
        float(sol.duals_ub.min(initial=0.0)),
        float(sol.duals_extra.min(initial=0.0)),
    )
    out["dual_feas"] = max(0.0, -duals_min)
    comp = [float(np.abs(sol.duals_in * slack_in).max(initial=0.0)) if qp.A_in.size else 0.0]
    comp.append(float(np.abs(sol.duals_lb * np.where(np.isfinite(qp.lb), z - qp.lb, 0.0)).max(initial=0.0)))
    comp.append(float(np.abs(sol.duals_ub * np.where(np.isfinite(qp.ub), qp.ub - z, 0.0)).max(initial=0.0)))
    if slack_x is not None:
        comp.append(float(np.abs(sol.duals_extra * slack_x).max(initial=0.0)))
    out["comp_slack"] = max(comp) / scale
    return out


def verify_certificate(qp: Qp, cert: FarkasRay,
                       A_extra: np.ndarray | None = None,
                       b_extra: np.ndarray | None = None) -> tuple[float, float]:
    """Return (max |combined coefficients| / |y|, combined rhs / |y|).

    A valid ray has the first ~0 and the second < 0.
    """
    comb = np.zeros(qp.n)
    rhs = 0.0
    if qp.A_in.size:
        comb += qp.A_in.T @ cert.y_in
        rhs += float(cert.y_in @ qp.b_in)
    comb -= cert.y_lb
    rhs += float(cert.y_lb @ np.where(np.isfinite(qp.lb), -qp.lb, 0.0))
    comb += cert.y_ub
    rhs += float(cert.y_ub @ np.where(np.isfinite(qp.ub), qp.ub, 0.0))
    if qp.A_eq.size:
        comb += qp.A_eq.T @ cert.lam_eq
        rhs += float(cert.lam_eq @ qp.b_eq)
    if A_extra is not None and cert.y_extra.size:
        comb += np.asarray(A_extra).T @ cert.y_extra
        rhs += float(cert.y_extra @ np.asarray(b_extra))
    ynorm = max(
        float(np.abs(cert.y_in).max(initial=0.0)),
        float(np.abs(cert.y_lb).max(initial=0.0)),
        float(np.abs(cert.y_ub).max(initial=0.0)),
        float(np.abs(cert.lam_eq).max(initial=0.0)),
        float(np.abs(cert.y_extra).max(initial=0.0)),
        1e-30,
    )
    return float(np.abs(comb).max() / ynorm), float(rhs / ynorm)


# ---------------------------------------------------------------------------
# Dual active-set core (Goldfarb-Idnani): min 1/2 w'Hw + g'w  s.t.  C w >= b
# ---------------------------------------------------------------------------

_ZTOL = 1e-11
_FEAS_TOL = 1e-9


class _GiResult:
    __slots__ = ("w", "duals", "active", "status", "n_changes", "infeas_row", "infeas_active", "infeas_r", "f")

    def __init__(self, w, duals, active, status, n_changes, f,
                 infeas_row=None, infeas_active=None, infeas_r=None):
        self.w = w
        self.duals = duals
        self.active = active
        self.status = status
        self.n_changes = n_changes
        self.f = f
        self.infeas_row = infeas_row
        self.infeas_active = infeas_active
        self.infeas_r = infeas_r


def _gi_solve(L, w0, f0, C, b, max_changes, abort_above=np.inf, hint=None,
              start_active=None) -> _GiResult:
    """Goldfarb-Idnani dual active set.

    L: (Fortran-ordered) Cholesky factor of the PD reduced Hessian.
    w0: unconstrained minimizer, f0 the objective value there.
    C: (m, nw) constraint normals as rows, C w >= b, roughly unit norm.
    hint: row indices to prefer when picking violated constraints.
    start_active: rows to warm-start the working set with; the equality-
    constrained subproblem on them is solved directly and rows with
    negative multipliers are shed before the main loop.

    The working-set factorization M = L^{-1} N_active = Q R is maintained
    with compiled column insert/delete updates.
    """
    solve_tri = scipy.linalg.solve_triangular
    trsv, = scipy.linalg.get_blas_funcs(("trsv",), (L,))
    nw = L.shape[0]
    m = C.shape[0]
    w = w0.copy()
    f = f0
    Qm = np.eye(nw)
    R = np.zeros((nw, 0))
    active: list[int] = []
    u = np.zeros(0)
    n_changes = 0
    hint_mask = None
    if hint is not None and len(hint):
        hint_mask = np.zeros(m, dtype=bool)
        hint_mask[np.asarray(hint, dtype=int)] = True

    if start_active is not None and len(start_active):
        for p in start_active:
            mcol = trsv(L, C[p], lower=1, trans=0)
            q = len(active)
            d2 = Qm[:, q:].T @ mcol
            if float(d2 @ d2) <= 1e-9 * (1.0 + float(mcol @ mcol)):
                continue  # dependent on rows already in
            Qm, R = scipy.linalg.qr_insert(Qm, R, mcol, q, which="col",
                                           overwrite_qru=True, check_finite=False)
            active.append(int(p))
        while active:
            q = len(active)
            rvec = b[active] - C[active] @ w0
            rt = solve_tri(R[:q, :q], rvec, lower=False, trans="T", check_finite=False)
            uw = solve_tri(R[:q, :q], rt, lower=False, check_finite=False)
            k_neg = int(np.argmin(uw))
            if uw[k_neg] >= 0.0:
                w = w0 + trsv(L, Qm[:, :q] @ rt, lower=1, trans=1)
                f = f0 + 0.5 * float(rt @ rt)
                u = uw
                break
            active.pop(k_neg)
            Qm, R = scipy.linalg.qr_delete(Qm, R, k_neg, which="col",
                                           overwrite_qr=True, check_finite=False)
            n_changes += 1

    def _refresh():
        # recompute (w, u, f) from the factorization; the incremental
        # primal updates drift on ill-conditioned problems
        q = len(active)
        if not q:
            return w0.copy(), np.zeros(0), f0
        rb = b[active] - C[active] @ w0
        rt = solve_tri(R[:q, :q], rb, lower=False, trans="T", check_finite=False)
        wn = w0 + trsv(L, Qm[:, :q] @ rt, lower=1, trans=1)
        un = solve_tri(R[:q, :q], rt, lower=False, check_finite=False)
        return wn, un, f0 + 0.5 * float(rt @ rt)

    fresh = False
    while True:
        if f > abort_above:
            return _GiResult(w, np.maximum(u, 0.0), active, QpStatus.PRUNED, n_changes, f)
        s = C @ w - b
        if active:
            s[active] = 0.0
        worst = float(s.min())
        if worst >= -_FEAS_TOL:
            if fresh:
                return _GiResult(w, np.maximum(u, 0.0), active, QpStatus.OPTIMAL, n_changes, f)
            w, u, f = _refresh()
            fresh = True
            continue
        if hint_mask is not None:
            sh = np.where(hint_mask, s, 0.0)
            worst_h = float(sh.min())
            p = int(np.argmin(sh)) if worst_h < -_FEAS_TOL else int(np.argmin(s))
        else:
            p = int(np.argmin(s))
        fresh = False
        npn = C[p]
        mcol = trsv(L, npn, lower=1, trans=0)
        u_p = 0.0

        while True:
            if n_changes >= max_changes:
                return _GiResult(w, np.maximum(u, 0.0), active, QpStatus.MAX_ITER, n_changes, f)
            q = len(active)
            d = Qm.T @ mcol
            d1, d2 = d[:q], d[q:]
            r = solve_tri(R[:q, :q], d1, lower=False, check_finite=False) if q else np.zeros(0)
            z_norm2 = float(d2 @ d2)
            have_z = z_norm2 > _ZTOL * (1.0 + float(d @ d))
            s_p = float(npn @ w - b[p])

            t1 = np.inf
            k_block = -1
            if q:
                pos = r > 1e-13
                if pos.any():
                    ratios = np.where(pos, u / np.where(pos, r, 1.0), np.inf)
                    k_block = int(np.argmin(ratios))
                    t1 = float(max(ratios[k_block], 0.0))
            if have_z:
                zvec = trsv(L, Qm[:, q:] @ d2, lower=1, trans=1)
                t2 = -s_p / z_norm2
            else:
                zvec = None
                t2 = np.inf

            t = min(t1, t2)
            if not np.isfinite(t):
                return _GiResult(w, np.maximum(u, 0.0), active, QpStatus.INFEASIBLE, n_changes, f,
                                 infeas_row=p, infeas_active=list(active), infeas_r=r.copy())

            if zvec is not None and t2 <= t1:
                # full step: p joins the working set
                w = w + t * zvec
                f += t * z_norm2 * (0.5 * t + u_p)
                u_p += t
                if q:
                    u = u - t * r
                Qm, R = scipy.linalg.qr_insert(Qm, R, mcol, q, which="col",
                                               overwrite_qru=True, check_finite=False)
                active.append(p)
                u = np.append(u, u_p)
                n_changes += 1
                break

            # partial step in the dual (and primal if possible), drop blocker
            if zvec is not None and t > 0.0:
                w = w + t * zvec
                f += t * z_norm2 * (0.5 * t + u_p)
            u_p += t
            u = u - t * r
            active.pop(k_block)
            u = np.delete(u, k_block)
            Qm, R = scipy.linalg.qr_delete(Qm, R, k_block, which="col",
                                           overwrite_qr=True, check_finite=False)
            n_changes += 1


# ---------------------------------------------------------------------------
# Reduced problem wrapper
# ---------------------------------------------------------------------------


class ReducedSolver:
    """Equality-eliminated, factorized view of a base QP.

    Built once, then solved repeatedly with extra inequality rows appended
    (e.g. the per-pattern obstacle constraints). Reduced coordinates:
    z = z_p + Z w with A_eq (z_p + Z w) = b_eq for all w.
    """

    def __init__(self, qp: Qp, max_changes: int = 2000,
                 null_space: tuple[np.ndarray, np.ndarray] | None = None,
                 lazy_eq_duals: bool = False, lazy_certificates: bool = False):
        qp.validate()
        self.qp = qp
        self.max_changes = max_changes
        self.lazy_eq_duals = lazy_eq_duals
        self.lazy_certificates = lazy_certificates
        n = qp.n
        me = qp.A_eq.shape[0]
        self.eq_inconsistent = False
        self.n_in = qp.A_in.shape[0]
        if null_space is not None:
            # caller-supplied particular solution and (any) null-space basis
            z_p, self.Z = null_space
            self._Qf = self._Rf = None
            self._rank = -1
        elif me:
            Qf, Rf = scipy.linalg.qr(qp.A_eq.T, mode="full")
            diag = np.abs(np.diag(Rf)) if min(Rf.shape) else np.zeros(0)
            rank = int(np.sum(diag > 1e-11 * max(1.0, diag.max(initial=0.0))))
            self._Qf, self._Rf, self._rank = Qf, Rf, rank
            if rank == me:
                z_p = Qf[:, :me] @ scipy.linalg.solve_triangular(Rf[:me, :me], qp.b_eq, lower=False, trans="T")
            else:
                z_p, *_ = np.linalg.lstsq(qp.A_eq, qp.b_eq, rcond=None)
                resid = qp.A_eq @ z_p - qp.b_eq
                if np.abs(resid).max(initial=0.0) > 1e-7 * (1.0 + np.abs(qp.b_eq).max(initial=0.0)):
                    self.eq_inconsistent = True
                    self.z_p = z_p
                    self.Z = np.zeros((n, 0))
                    return
            self.Z = Qf[:, rank:]
        else:
            z_p = np.zeros(n)
            self.Z = np.eye(n)
            self._Qf = self._Rf = None
            self._rank = 0
        self.z_p = z_p

        Z = self.Z
        Hz = Z.T @ qp.H @ Z
        Hz = 0.5 * (Hz + Hz.T)
        nz = Hz.shape[0]
        tr = max(1.0, float(np.trace(Hz)) / max(1, nz))
        ridge = 0.0
        while True:
            try:
                self.L = np.asfortranarray(np.linalg.cholesky(Hz + ridge * np.eye(nz)))
                break
            except np.linalg.LinAlgError:
                ridge = 1e-12 * tr if ridge == 0.0 else ridge * 100.0
                if ridge > 2e-6 * tr:
                    raise ValidationError("H is not positive semidefinite within tolerance")
        self.ridge = ridge
        self.gz = Z.T @ (qp.g + qp.H @ z_p)
        self.const = 0.5 * float(z_p @ qp.H @ z_p) + float(qp.g @ z_p)
        y = scipy.linalg.solve_triangular(self.L, -self.gz, lower=True)
        self.w0 = scipy.linalg.solve_triangular(self.L, y, lower=True, trans="T")
        self.f0 = 0.5 * float(self.gz @ self.w0)

        rows = [qp.A_in @ Z] if qp.A_in.size else [np.zeros((0, nz))]
        rhs = [qp.b_in - qp.A_in @ z_p] if qp.A_in.size else [np.zeros(0)]
        self._lb_idx = np.where(np.isfinite(qp.lb))[0]
        self._ub_idx = np.where(np.isfinite(qp.ub))[0]
        if self._lb_idx.size:
            rows.append(-Z[self._lb_idx])
            rhs.append(z_p[self._lb_idx] - qp.lb[self._lb_idx])
        if self._ub_idx.size:
            rows.append(Z[self._ub_idx])
            rhs.append(qp.ub[self._ub_idx] - z_p[self._ub_idx])
        self.G_base = np.vstack(rows)
        self.h_base = np.concatenate(rhs)
        self.n_base_rows = self.G_base.shape[0]
        # normalized >=-form base rows, shared across repeated solves
        bn = np.linalg.norm(self.G_base, axis=1)
        bn[bn < 1e-14] = 1.0
        self._base_norms = bn
        self._C_base = -self.G_base / bn[:, None]
        self._b_base = -self.h_base / bn

    # -- public API --

    def solve_with_extra(self, A_extra=None, b_extra=None,
                         abort_above=np.inf, hint=None, start_active=None) -> QpSolution:
        """Solve with extra rows A_extra z <= b_extra appended (may be empty)."""
        qp = self.qp
        if self.eq_inconsistent:
            return self._eq_infeasible()
        if A_extra is not None and len(A_extra):
            A_extra = np.asarray(A_extra, float)
            b_extra = np.asarray(b_extra, float)
            Gx = A_extra @ self.Z
            hx = b_extra - A_extra @ self.z_p
            nx = np.linalg.norm(Gx, axis=1)
            nx[nx < 1e-14] = 1.0
            C = np.vstack([self._C_base, -Gx / nx[:, None]])
            b = np.concatenate([self._b_base, -hx / nx])
            norms = np.concatenate([self._base_norms, nx])
        else:
            A_extra = None
            C = self._C_base
            b = self._b_base
            norms = self._base_norms

        res = _gi_solve(self.L, self.w0, self.f0, C, b, self.max_changes,
                        abort_above=abort_above - qp.c0 - self.const, hint=hint,
                        start_active=start_active)

        if res.status is QpStatus.INFEASIBLE:
            idx = np.asarray(res.infeas_active + [res.infeas_row], dtype=int)
            coef = np.concatenate([np.maximum(-res.infeas_r, 0.0), [1.0]]) / norms[idx]
            return self._certify_infeasible(idx, coef, C.shape[0], A_extra)

        w = res.w
        z = self.z_p + self.Z @ w
        mu = np.zeros(C.shape[0])
        if res.active:
            act = np.asarray(res.active)
            mu[act] = res.duals / norms[act]
        sol = self._assemble(z, mu, res.status, res.n_changes, A_extra)
        sol.dual_bound = res.f + self.const + qp.c0
        sol.active_rows = np.asarray(res.active, dtype=int)
        if res.status is QpStatus.PRUNED:
            sol.objective = np.inf
        return sol

    def solve(self, abort_above=np.inf, hint=None) -> QpSolution:
        return self.solve_with_extra(None, None, abort_above, hint)

    # -- internals --

    def _assemble(self, z, mu_rows, status, n_changes, A_extra) -> QpSolution:
        qp = self.qp
        n = qp.n
        duals_in = mu_rows[: self.n_in].copy()
        duals_lb = np.zeros(n)
        duals_ub = np.zeros(n)
        ofs = self.n_in
        duals_lb[self._lb_idx] = mu_rows[ofs: ofs + self._lb_idx.size]
        ofs += self._lb_idx.size
        duals_ub[self._ub_idx] = mu_rows[ofs: ofs + self._ub_idx.size]
        ofs += self._ub_idx.size
        duals_extra = mu_rows[ofs:].copy()
        if qp.A_eq.size and not self.lazy_eq_duals:
            grad = qp.H @ z + qp.g - duals_lb + duals_ub
            if qp.A_in.size:
                grad = grad + qp.A_in.T @ duals_in
            if A_extra is not None and duals_extra.size:
                grad = grad + A_extra.T @ duals_extra
            if self._rank == qp.A_eq.shape[0]:
                rhs = -self._Qf[:, : self._rank].T @ grad
                duals_eq = scipy.linalg.solve_triangular(self._Rf[: self._rank, : self._rank], rhs, lower=False)
            else:
                duals_eq, *_ = np.linalg.lstsq(qp.A_eq.T, -grad, rcond=None)
        else:
            duals_eq = np.zeros(qp.A_eq.shape[0])
        obj = 0.5 * float(z @ qp.H @ z) + float(qp.g @ z) + qp.c0
        return QpSolution(z, obj, status, np.asarray(duals_eq), duals_in, duals_lb, duals_ub,
                          duals_extra, n_changes)

    def _certify_infeasible(self, idx, coef, n_rows, A_extra) -> QpSolution:
        qp = self.qp
        if self.lazy_certificates:
            return QpSolution(self.z_p.copy(), np.inf, QpStatus.INFEASIBLE,
                              np.zeros(qp.A_eq.shape[0]), np.zeros(self.n_in),
                              np.zeros(qp.n), np.zeros(qp.n))
        y = np.zeros(n_rows)
        y[idx] = coef
        y_in = y[: self.n_in]
        y_lb = np.zeros(qp.n)
        y_ub = np.zeros(qp.n)
        ofs = self.n_in
        y_lb[self._lb_idx] = y[ofs: ofs + self._lb_idx.size]
        ofs += self._lb_idx.size
        y_ub[self._ub_idx] = y[ofs: ofs + self._ub_idx.size]
        ofs += self._ub_idx.size
        y_extra = y[ofs:]
        comb = -y_lb + y_ub
        if qp.A_in.size:
            comb = comb + qp.A_in.T @ y_in
        if A_extra is not None and y_extra.size:
            comb = comb + A_extra.T @ y_extra
        if qp.A_eq.size:
            lam, *_ = np.linalg.lstsq(qp.A_eq.T, -comb, rcond=None)
        else:
            lam = np.zeros(0)
        cert = FarkasRay(y_in, y_lb, y_ub, np.asarray(lam), y_extra)
        return QpSolution(self.z_p.copy(), np.inf, QpStatus.INFEASIBLE,
                          np.zeros(qp.A_eq.shape[0]), np.zeros(self.n_in),
                          np.zeros(qp.n), np.zeros(qp.n), np.zeros(len(y_extra)),
                          certificate=cert)

    def _eq_infeasible(self) -> QpSolution:
        qp = self.qp
        res = qp.A_eq @ self.z_p - qp.b_eq  # least-squares residual, A_eq' res = 0
        lam = res / max(float(res @ res), 1e-30) ** 0.5
        cert = FarkasRay(np.zeros(self.n_in), np.zeros(qp.n), np.zeros(qp.n), lam)
        return QpSolution(self.z_p.copy(), np.inf, QpStatus.INFEASIBLE,
                          np.zeros(qp.A_eq.shape[0]), np.zeros(self.n_in),
                          np.zeros(qp.n), np.zeros(qp.n), certificate=cert)


def solve_qp(qp: Qp, warm: np.ndarray | None = None, max_changes: int = 200) -> QpSolution:
    """Solve a convex QP.

    `warm` biases the constraint processing order (rows tight at the warm
    point are tried first); the dual method does not require feasibility.
    """
    solver = ReducedSolver(qp, max_changes=max_changes)
    hint = None
    if warm is not None and not solver.eq_inconsistent:
        w = solver.Z.T @ (np.asarray(warm, float) - solver.z_p)
        slack = solver.h_base - solver.G_base @ w
        hint = np.where(slack < 1e-7 * (1.0 + np.abs(solver.h_base)))[0]
    return solver.solve(hint=hint)


# ---------------------------------------------------------------------------
# Mixed-binary layer: monotone lane-membership patterns
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinaryPattern:
    """delta_t = True iff the ego is in the target lane at step t.

    Monotone non-decreasing (the lane change is one way); an admissible
    pattern ends in the target lane (the maneuver completes within the
    horizon), so the all-False pattern encodes "no admissible pattern".
    """

    delta: tuple[bool, ...]

    def __post_init__(self):
        d = self.delta
        if any(a and not b for a, b in zip(d, d[1:])):
            raise ValidationError("lane membership must be monotone")

    @property
    def switch_index(self) -> int:
        for i, v in enumerate(self.delta):
            if v:
                return i
        return len(self.delta)

    @staticmethod
    def from_switch(k: int, n_steps: int) -> "BinaryPattern":
        return BinaryPattern(tuple(t >= k for t in range(n_steps)))


@dataclass
class BigMLinker:
    """Per-step constraint groups gated by the lane-membership binary.

    el_rows[t] holds (A, b) rows enforced while delta_t = 0 (ego lane),
    tl_rows[t] rows enforced while delta_t = 1. The lane-membership
    coupling itself (y_t <= y_switch resp. -y_t <= -y_switch) lives in
    these groups too. big_m caps the release slack; rows are tightened
    against the variable boxes where finite.
    """

    el_rows: list[tuple[np.ndarray, np.ndarray]]
    tl_rows: list[tuple[np.ndarray, np.ndarray]]
    big_m: float = 1e3

    @property
    def n_steps(self) -> int:
        return len(self.el_rows)

    def pattern_rows(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Hard constraint rows for the pattern that switches at step k."""
        As, bs = [], []
        for t in range(self.n_steps):
            A, b = self.el_rows[t] if t < k else self.tl_rows[t]
            if len(A):
                As.append(A)
                bs.append(b)
        if not As:
            return np.zeros((0, 0)), np.zeros(0)
        return np.vstack(As), np.concatenate(bs)

    def tightened_m(self, A: np.ndarray, b: np.ndarray, lb: np.ndarray, ub: np.ndarray) -> np.ndarray:
        """Per-row M: sup of (A z - b) over the box, capped at big_m."""
        pos = np.clip(A, 0.0, None)
        neg = np.clip(A, None, 0.0)
        hi = pos @ np.where(np.isfinite(ub), ub, 0.0) + neg @ np.where(np.isfinite(lb), lb, 0.0)
        unbounded = (pos * ~np.isfinite(ub)[None, :]).any(axis=1) | ((-neg) * ~np.isfinite(lb)[None, :]).any(axis=1)
        m = np.where(unbounded, self.big_m, np.maximum(hi - b, 0.0))
        return np.minimum(m, self.big_m)


_TIE_TOL = 1e-9


def enumerate_switch(solver: ReducedSolver, linker: BigMLinker,
                     switches: list[int] | None = None,
                     hints: dict[int, np.ndarray] | None = None) -> tuple[QpSolution | None, int]:
    """Exact minimum over switch indices via incumbent-pruned enumeration.

    The dual method's monotone objective makes pruning exact: a pattern is
    abandoned only once its lower bound passes the incumbent. Smallest
    switch index wins ties. Returns (None, -1) when every pattern is
    infeasible.
    """
    ks = switches if switches is not None else list(range(linker.n_steps))
    best: QpSolution | None = None
    best_k = -1
    for k in ks:
        A, b = linker.pattern_rows(k)
        abort = best.objective + _TIE_TOL if best is not None else np.inf
        hint = hints.get(k) if hints else None
        sol = solver.solve_with_extra(A, b, abort_above=abort, hint=hint)
        if sol.status is QpStatus.OPTIMAL and (best is None or sol.objective < best.objective - _TIE_TOL):
            best = sol
            best_k = k
    return best, best_k


def solve_mixed_bnb(base: Qp, linker: BigMLinker, max_changes: int = 4000) -> tuple[QpSolution | None, int, int]:
    """Best-first big-M branch and bound over the monotone binaries.

    Bounds come from QP relaxations with delta in [0, 1] (plus a tiny
    ridge on delta, folded into the tie tolerance). Branching on the most
    fractional delta_t fixes the prefix to 0 on one side and the suffix to
    1 on the other, which is exact under monotonicity. The winning integer
    pattern is re-solved as a hard QP so both strategies report the same
    objective. Returns (solution, switch index, node count).
    """
    n_steps = linker.n_steps
    n = base.n
    nd = n_steps

    # The relaxed binaries need curvature for the dual method; the ridge
    # inflates relaxation bounds by at most ridge*nd, which is folded into
    # the pruning margin below, so pruning stays exact.
    ridge = 1e-3
    margin = ridge * nd
    H = np.zeros((n + nd, n + nd))
    H[:n, :n] = base.H
    H[n:, n:] = ridge * np.eye(nd)
    g = np.concatenate([base.g, np.zeros(nd)])
    A_eq = np.hstack([base.A_eq, np.zeros((base.A_eq.shape[0], nd))]) if base.A_eq.size \
        else np.zeros((0, n + nd))
    rows, rhs = [], []
    if base.A_in.size:
        rows.append(np.hstack([base.A_in, np.zeros((base.A_in.shape[0], nd))]))
        rhs.append(base.b_in)
    for t in range(n_steps):
        A_el, b_el = linker.el_rows[t]
        if len(A_el):
            m = linker.tightened_m(A_el, b_el, base.lb, base.ub)
            blk = np.zeros((len(A_el), n + nd))
            blk[:, :n] = A_el
            blk[:, n + t] = -m
            rows.append(blk)
            rhs.append(b_el)
        A_tl, b_tl = linker.tl_rows[t]
        if len(A_tl):
            m = linker.tightened_m(A_tl, b_tl, base.lb, base.ub)
            blk = np.zeros((len(A_tl), n + nd))
            blk[:, :n] = A_tl
            blk[:, n + t] = m
            rows.append(blk)
            rhs.append(b_tl + m)
        if t + 1 < n_steps:
            mono = np.zeros(n + nd)
            mono[n + t] = 1.0
            mono[n + t + 1] = -1.0
            rows.append(mono[None, :])
            rhs.append(np.array([0.0]))
    A_in = np.vstack(rows) if rows else np.zeros((0, n + nd))
    b_in = np.concatenate(rhs) if rhs else np.zeros(0)

    lb0 = np.concatenate([base.lb, np.zeros(nd)])
    ub0 = np.concatenate([base.ub, np.ones(nd)])
    lb0[n + nd - 1] = 1.0  # terminal membership: the change completes

    pattern_solver = ReducedSolver(base, max_changes=max_changes)

    def relax_solve(lb, ub):
        """Node relaxation with fixed binaries eliminated.

        Fixed deltas (lb == ub) would sit as degenerate double bounds and
        make the dual method churn; substituting them out keeps the node
        QPs clean. Returns (status, objective lower bound, full z).
        """
        fixed = np.where(ub - lb < 0.5)[0]
        fixed = fixed[fixed >= n]
        if not len(fixed):
            qp = Qp(H, g, A_eq, base.b_eq, A_in, b_in, lb, ub, base.c0)
            sol = ReducedSolver(qp, max_changes=max_changes).solve()
            bound = sol.dual_bound if sol.status is QpStatus.MAX_ITER else sol.objective
            return sol.status, bound, sol.z
        vals = lb[fixed]
        free = np.setdiff1d(np.arange(n + nd), fixed)
        Hff = H[np.ix_(free, free)]
        gf = g[free] + H[np.ix_(free, fixed)] @ vals
        cf = base.c0 + 0.5 * float(vals @ H[np.ix_(fixed, fixed)] @ vals) + float(g[fixed] @ vals)
        Af = A_eq[:, free]
        bf = base.b_eq - A_eq[:, fixed] @ vals
        Ai = A_in[:, free]
        bi = b_in - A_in[:, fixed] @ vals
        keep = np.abs(Ai).max(axis=1) > 1e-14
        drop_bad = (~keep) & (bi < -1e-9)
        if drop_bad.any():
            return QpStatus.INFEASIBLE, np.inf, None
        qp = Qp(Hff, gf, Af, bf, Ai[keep], bi[keep], lb[free], ub[free], cf)
        sol = ReducedSolver(qp, max_changes=max_changes).solve()
        bound = sol.dual_bound if sol.status is QpStatus.MAX_ITER else sol.objective
        z = None
        if sol.z is not None and sol.status is not QpStatus.INFEASIBLE:
            z = np.empty(n + nd)
            z[free] = sol.z
            z[fixed] = vals
        return sol.status, bound, z

    nodes = 0
    best: QpSolution | None = None
    best_k = -1
    heap = [(-np.inf, 0, lb0, ub0)]
    counter = 1
    while heap:
        bound, _, lb, ub = heapq.heappop(heap)
        if best is not None and bound - margin >= best.objective - _TIE_TOL:
            continue
        status, bound, z = relax_solve(lb, ub)
        nodes += 1
        if status is QpStatus.INFEASIBLE:
            continue
        if best is not None and bound - margin >= best.objective - _TIE_TOL:
            continue
        d = z[n:]
        frac = np.abs(d - np.round(d))
        t_star = int(np.argmax(frac))
        if frac[t_star] <= 1e-6:
            # integral relaxation: take it as an incumbent, but because of
            # the delta ridge it does not certify the node, so keep
            # branching on some still-free binary
            k = int(np.sum(np.round(d) < 0.5))
            A, b = linker.pattern_rows(k)
            cand = pattern_solver.solve_with_extra(A, b)
            if cand.status is QpStatus.OPTIMAL and (best is None or cand.objective < best.objective - _TIE_TOL):
                best, best_k = cand, k
            free_d = np.where(lb[n:] < ub[n:] - 0.5)[0]
            if not len(free_d):
                continue
            t_star = int(free_d[len(free_d) // 2])
        for fix_one in (False, True):
            lb2, ub2 = lb.copy(), ub.copy()
            if fix_one:
                lb2[n + t_star:] = np.maximum(lb2[n + t_star:], 1.0)
            else:
                ub2[n: n + t_star + 1] = np.minimum(ub2[n: n + t_star + 1], 0.0)
            heapq.heappush(heap, (bound, counter, lb2, ub2))
            counter += 1
    return best, best_k, nodes


def solve_mixed(base: Qp, linker: BigMLinker, strategy: str = "enumeration",
                max_changes: int = 4000) -> tuple[QpSolution, BinaryPattern]:
    """Minimize over admissible monotone lane-membership patterns.

    Returns the best solution and its pattern; when every pattern is
    infeasible the solution status is INFEASIBLE and the pattern is the
    all-False placeholder.
    """
    if strategy == "enumeration":
        solver = ReducedSolver(base, max_changes=max_changes)
        best, best_k = enumerate_switch(solver, linker)
    elif strategy == "bnb":
        best, best_k, _ = solve_mixed_bnb(base, linker, max_changes=max_changes)
    else:
        raise ValidationError(f"unknown strategy {strategy!r}")
    n_pat = linker.n_steps
    if best is None:
        empty = QpSolution(np.zeros(base.n), np.inf, QpStatus.INFEASIBLE,
                           np.zeros(base.A_eq.shape[0]), np.zeros(base.A_in.shape[0]),
                           np.zeros(base.n), np.zeros(base.n))
        return empty, BinaryPattern(tuple(False for _ in range(n_pat)))
    return best, BinaryPattern.from_switch(best_k, n_pat)


def dump_qp(qp: Qp, path) -> None:
    """Plain-text dump: dimension header, then row-major value blocks."""
    with open(path, "w") as fh:
        fh.write(f"n {qp.n} me {qp.A_eq.shape[0]} mi {qp.A_in.shape[0]}\n")
        for name, arr in (("H", qp.H), ("g", qp.g), ("A_eq", qp.A_eq), ("b_eq", qp.b_eq),
                          ("A_in", qp.A_in), ("b_in", qp.b_in), ("lb", qp.lb), ("ub", qp.ub)):
            flat = np.asarray(arr).ravel()
            fh.write(f"{name} {' '.join(repr(float(v)) for v in flat)}\n")
        fh.write(f"c0 {qp.c0!r}\n")
