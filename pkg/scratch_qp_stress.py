"""Ad-hoc stress test of the QP solver vs a brute-force active-set oracle."""
import itertools
import numpy as np

from lcplan.qp import make_qp, solve_qp, QpStatus, kkt_residuals, verify_certificate


def brute_force(qp):
    """Enumerate all subsets of (A_in rows + finite bounds) as active equalities,
    solve the EQP, keep feasible candidates, return the min objective."""
    n = qp.n
    rows = [(*qp.A_in[i], qp.b_in[i]) for i in range(qp.A_in.shape[0])]
    for i in range(n):
        if np.isfinite(qp.lb[i]):
            e = np.zeros(n); e[i] = -1.0
            rows.append((*e, -qp.lb[i]))
        if np.isfinite(qp.ub[i]):
            e = np.zeros(n); e[i] = 1.0
            rows.append((*e, qp.ub[i]))
    rows = np.array(rows) if rows else np.zeros((0, n + 1))
    m = len(rows)
    best = None
    for k in range(m + 1):
        for subset in itertools.combinations(range(m), k):
            A_act = np.vstack([qp.A_eq, rows[list(subset), :n]]) if subset or qp.A_eq.size else qp.A_eq
            b_act = np.concatenate([qp.b_eq, rows[list(subset), n]]) if subset or qp.A_eq.size else qp.b_eq
            na = A_act.shape[0]
            KKT = np.zeros((n + na, n + na))
            KKT[:n, :n] = qp.H
            if na:
                KKT[:n, n:] = A_act.T
                KKT[n:, :n] = A_act
            rhs = np.concatenate([-qp.g, b_act])
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                continue
            z = sol[:n]
            # feasibility
            ok = True
            if qp.A_in.size and (qp.A_in @ z - qp.b_in > 1e-8).any():
                ok = False
            if (z - qp.ub > 1e-8).any() or (qp.lb - z > 1e-8).any():
                ok = False
            if qp.A_eq.size and np.abs(qp.A_eq @ z - qp.b_eq).max() > 1e-8:
                ok = False
            if not ok:
                continue
            obj = 0.5 * z @ qp.H @ z + qp.g @ z + qp.c0
            if best is None or obj < best:
                best = obj
    return best


def random_qp(rng, n, mi, me, with_bounds):
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.5 * np.eye(n)
    g = rng.normal(size=n)
    A_in = rng.normal(size=(mi, n))
    z0 = rng.normal(size=n) * 0.5
    b_in = A_in @ z0 + rng.uniform(-0.5, 1.5, size=mi)  # mostly feasible, sometimes not
    A_eq = rng.normal(size=(me, n)) if me else None
    b_eq = (A_eq @ z0 + rng.uniform(-0.2, 0.2, size=me)) if me else None
    lb = ub = None
    if with_bounds:
        lb = np.where(rng.random(n) < 0.5, z0 - rng.uniform(0.1, 2.0, size=n), -np.inf)
        ub = np.where(rng.random(n) < 0.5, z0 + rng.uniform(0.1, 2.0, size=n), np.inf)
    return make_qp(H, g, A_eq, b_eq, A_in, b_in, lb, ub, c0=rng.normal())


rng = np.random.default_rng(42)
n_match = n_inf = n_bad = 0
worst_kkt = 0.0
for trial in range(500):
    n = int(rng.integers(2, 7))
    mi = int(rng.integers(1, 6))
    me = int(rng.integers(0, min(n - 1, 2) + 1))
    qp = random_qp(rng, n, mi, me, with_bounds=bool(rng.random() < 0.5))
    sol = solve_qp(qp, max_changes=500)
    ref = brute_force(qp)
    if sol.status is QpStatus.OPTIMAL:
        res = kkt_residuals(qp, sol)
        worst_kkt = max(worst_kkt, max(res.values()))
        if ref is None or abs(sol.objective - ref) > 1e-7 * (1 + abs(ref)):
            n_bad += 1
            print(f"MISMATCH trial {trial}: solver {sol.objective} vs brute {ref}")
        else:
            n_match += 1
    else:
        if ref is not None:
            n_bad += 1
            print(f"FALSE INFEASIBLE trial {trial}: brute found {ref}, status {sol.status}")
        else:
            combo, rhs = verify_certificate(qp, sol.certificate)
            if combo > 1e-6 or rhs >= 0:
                n_bad += 1
                print(f"BAD CERTIFICATE trial {trial}: combo={combo:.2e} rhs={rhs:.2e}")
            else:
                n_inf += 1

print(f"match={n_match} infeasible_ok={n_inf} bad={n_bad} worst_kkt={worst_kkt:.2e}")
