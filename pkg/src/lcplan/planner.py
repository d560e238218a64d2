"""The expert lane-change planner: successive linearization MIQP.

Each outer iteration linearizes the trapezoidal collocation of the unicycle
dynamics about the current reference, solves the mixed-binary QP over
monotone lane-membership patterns, and repeats until the iterates settle.
The first reference comes from the quintic warm start.

Decision variables are stacked per quantity: z = [x | y | v | theta | a |
omega], each block holding N+1 grid values.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model import (
    Control,
    Label,
    Limits,
    Scenario,
    State,
    Trajectory,
    ValidationError,
    require_valid,
)
from .qp import (
    BigMLinker,
    BinaryPattern,
    Qp,
    QpSolution,
    QpStatus,
    ReducedSolver,
    enumerate_switch,
    make_qp,
    solve_mixed_bnb,
)
from .traffic import IdmParams, DEFAULT_IDM, rollout
from .warmstart import boundary_from_prediction, control_seed, fit, to_state_seed


@dataclass(frozen=True)
class PlannerConfig:
    tf: float = 5.0
    n_steps: int = 50
    c1: float = 0.5            # acceleration weight
    c2: float = 100.0          # jerk weight
    c3: float = 1.0            # lane-tracking weight
    # Yaw rate is free in the nominal objective, which makes steering
    # bang-bang and the Hessian singular along alternating yaw directions.
    # A small quadratic term keeps the problem strictly convex and the
    # steering smooth.
    omega_reg: float = 2.0
    max_outer_iters: int = 15
    conv_tol: float = 1e-3     # inf-norm step change on states
    obj_rel_tol: float = 1e-4
    trust_v: float = 3.0       # per-iteration |dv| cap around the reference
    trust_theta: float = 0.3   # per-iteration |dtheta| cap
    theta_box: float = 1.0     # global heading envelope (rad)
    mono_slack: float = 0.02   # lateral monotonicity slack for labeling (m)
    lane_tol: float = 0.3      # terminal lane tolerance for labeling (m)
    theta_tf_max: float = math.radians(10.0)
    max_changes: int = 4000
    strategy: str = "enumeration"

    def __post_init__(self):
        if self.tf <= 0 or self.n_steps < 2:
            raise ValidationError("need tf > 0 and n_steps >= 2")
        if min(self.c1, self.c2, self.c3) < 0:
            raise ValidationError("cost weights must be nonnegative")

    @property
    def dt(self) -> float:
        return self.tf / self.n_steps


@dataclass
class SolveReport:
    outer_iterations: int = 0
    objectives: list[float] = field(default_factory=list)
    status: str = "failure"
    wall_time: float = 0.0
    pattern: BinaryPattern | None = None
    label: Label = Label.FAILURE
    n_qp_solves: int = 0
    dyn_residual: float = 0.0
    repaired: bool = False
    seed_bound_violation: float = 0.0  # how far the raw seed left the boxes

    def fingerprint(self) -> tuple:
        """Everything except wall time (the only non-reproducible field)."""
        return (
            self.outer_iterations,
            tuple(self.objectives),
            self.status,
            self.pattern.delta if self.pattern else None,
            self.label.value,
            self.n_qp_solves,
            self.dyn_residual,
            self.repaired,
            self.seed_bound_violation,
        )


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def _idx(block: int, t, n_steps: int):
    return block * (n_steps + 1) + np.asarray(t)


IX, IY, IV, ITH, IA, IW = range(6)


def linearize(ref: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Linearized trapezoidal collocation rows about reference states.

    ref: (N+1, 4) states (x, y, v, theta). Returns (A, b) with 4N rows over
    the stacked variable layout; rows are exact in (x, y, v, a, omega) and
    first-order in v*cos(theta), v*sin(theta).
    """
    n = ref.shape[0] - 1
    nv = 6 * (n + 1)
    vbar = ref[:, 2]
    thbar = ref[:, 3]
    c, s = np.cos(thbar), np.sin(thbar)
    A = np.zeros((4 * n, nv))
    b = np.zeros(4 * n)
    t = np.arange(n)
    h = dt / 2.0

    # x_{t+1} - x_t - h*(lin[v cos th]_t + lin[v cos th]_{t+1}) = rhs
    r = t
    A[r, _idx(IX, t + 1, n)] = 1.0
    A[r, _idx(IX, t, n)] = -1.0
    A[r, _idx(IV, t, n)] = -h * c[t]
    A[r, _idx(IV, t + 1, n)] = -h * c[t + 1]
    A[r, _idx(ITH, t, n)] = h * vbar[t] * s[t]
    A[r, _idx(ITH, t + 1, n)] = h * vbar[t + 1] * s[t + 1]
    b[r] = h * (vbar[t] * s[t] * thbar[t] + vbar[t + 1] * s[t + 1] * thbar[t + 1])

    r = n + t
    A[r, _idx(IY, t + 1, n)] = 1.0
    A[r, _idx(IY, t, n)] = -1.0
    A[r, _idx(IV, t, n)] = -h * s[t]
    A[r, _idx(IV, t + 1, n)] = -h * s[t + 1]
    A[r, _idx(ITH, t, n)] = -h * vbar[t] * c[t]
    A[r, _idx(ITH, t + 1, n)] = -h * vbar[t + 1] * c[t + 1]
    b[r] = -h * (vbar[t] * c[t] * thbar[t] + vbar[t + 1] * c[t + 1] * thbar[t + 1])

    r = 2 * n + t
    A[r, _idx(IV, t + 1, n)] = 1.0
    A[r, _idx(IV, t, n)] = -1.0
    A[r, _idx(IA, t, n)] = -h
    A[r, _idx(IA, t + 1, n)] = -h

    r = 3 * n + t
    A[r, _idx(ITH, t + 1, n)] = 1.0
    A[r, _idx(ITH, t, n)] = -1.0
    A[r, _idx(IW, t, n)] = -h
    A[r, _idx(IW, t + 1, n)] = -h
    return A, b


def _cumtrap_matrix(n: int, dt: float) -> np.ndarray:
    """Matrix form of f_0 = 0, f_{t+1} = f_t + (dt/2)(u_t + u_{t+1})."""
    h = dt / 2.0
    C = np.zeros((n + 1, n + 1))
    for t in range(1, n + 1):
        C[t, 0] = h
        C[t, t] = h
        C[t, 1:t] = 2.0 * h
    return C


def nullspace_from_reference(sc: Scenario, ref: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Particular solution and null-space basis of the linearized dynamics.

    The equality constraints from linearize() + the initial state are a
    linear recursion, so the affine map (a, omega) -> z can be written
    with cumulative-trapezoid operators; this replaces a generic QR
    factorization of the 4N+4 equality rows.
    """
    n = ref.shape[0] - 1
    m = n + 1
    vbar, thbar = ref[:, 2], ref[:, 3]
    cb, sb = np.cos(thbar), np.sin(thbar)
    C = _cumtrap_matrix(n, dt)

    Zx_a = C @ (cb[:, None] * C)
    Zx_w = C @ (-(vbar * sb)[:, None] * C)
    Zy_a = C @ (sb[:, None] * C)
    Zy_w = C @ ((vbar * cb)[:, None] * C)
    Z = np.zeros((6 * m, 2 * m))
    Z[0 * m: 1 * m, :m] = Zx_a
    Z[0 * m: 1 * m, m:] = Zx_w
    Z[1 * m: 2 * m, :m] = Zy_a
    Z[1 * m: 2 * m, m:] = Zy_w
    Z[2 * m: 3 * m, :m] = C
    Z[3 * m: 4 * m, m:] = C
    Z[4 * m: 5 * m, :m] = np.eye(m)
    Z[5 * m: 6 * m, m:] = np.eye(m)

    # zero-control response with the initial state and linearization offsets
    h = dt / 2.0
    v_p = np.full(m, sc.ego0.v)
    th_p = np.full(m, sc.ego0.theta)
    fx = cb * v_p - vbar * sb * th_p + vbar * sb * thbar
    fy = sb * v_p + vbar * cb * th_p - vbar * cb * thbar
    x_p = sc.ego0.x + np.concatenate([[0.0], np.cumsum(h * (fx[:-1] + fx[1:]))])
    y_p = sc.ego0.y + np.concatenate([[0.0], np.cumsum(h * (fy[:-1] + fy[1:]))])
    z_p = np.concatenate([x_p, y_p, v_p, th_p, np.zeros(m), np.zeros(m)])
    return z_p, Z


def initial_state_rows(sc: Scenario, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    nv = 6 * (n_steps + 1)
    A = np.zeros((4, nv))
    for i, (blk, val) in enumerate(((IX, sc.ego0.x), (IY, sc.ego0.y), (IV, sc.ego0.v), (ITH, sc.ego0.theta))):
        A[i, _idx(blk, 0, n_steps)] = 1.0
    b = np.array([sc.ego0.x, sc.ego0.y, sc.ego0.v, sc.ego0.theta])
    return A, b


def build_cost(cfg: PlannerConfig, sc: Scenario) -> tuple[np.ndarray, np.ndarray, float]:
    """Quadratic cost (H, g, c0) over the stacked variables.

    cost = sum_{t<N} [c1 a_t^2 + c2 J_t^2] dt + sum_{0<t<=N} c3 (y_t - y_f)^2 dt
           + omega_reg * sum_t omega_t^2 dt,   J_t = (a_{t+1} - a_t)/dt.
    """
    n = cfg.n_steps
    dt = cfg.dt
    nv = 6 * (n + 1)
    H = np.zeros((nv, nv))
    g = np.zeros(nv)
    yf = sc.y_target

    ia = _idx(IA, np.arange(n + 1), n)
    for t in range(n):
        H[ia[t], ia[t]] += 2.0 * cfg.c1 * dt
    cj = 2.0 * cfg.c2 / dt
    for t in range(n):
        H[ia[t], ia[t]] += cj
        H[ia[t + 1], ia[t + 1]] += cj
        H[ia[t], ia[t + 1]] -= cj
        H[ia[t + 1], ia[t]] -= cj
    iy = _idx(IY, np.arange(n + 1), n)
    for t in range(1, n + 1):
        H[iy[t], iy[t]] += 2.0 * cfg.c3 * dt
        g[iy[t]] += -2.0 * cfg.c3 * dt * yf
    iw = _idx(IW, np.arange(n + 1), n)
    for t in range(n + 1):
        H[iw[t], iw[t]] += 2.0 * cfg.omega_reg * dt
    c0 = cfg.c3 * dt * yf * yf * n
    return H, g, c0


def trajectory_cost(cfg: PlannerConfig, sc: Scenario, ys, accs, omegas) -> float:
    """Direct summation of the discrete cost (the two-path oracle)."""
    n = cfg.n_steps
    dt = cfg.dt
    yf = sc.y_target
    accs = np.asarray(accs)
    c = float(np.sum(cfg.c1 * accs[:n] ** 2) * dt)
    jerk = np.diff(accs) / dt
    c += float(np.sum(cfg.c2 * jerk[:n] ** 2) * dt)
    c += float(np.sum(cfg.c3 * (np.asarray(ys)[1:n + 1] - yf) ** 2) * dt)
    c += float(np.sum(cfg.omega_reg * np.asarray(omegas) ** 2) * dt)
    return c


def build_boxes(cfg: PlannerConfig, sc: Scenario, ref: np.ndarray,
                trust_v: float, trust_theta: float) -> tuple[np.ndarray, np.ndarray]:
    n = cfg.n_steps
    lim = sc.limits
    lw = sc.lane_width
    nv = 6 * (n + 1)
    lb = np.empty(nv)
    ub = np.empty(nv)
    # x needs no box: v >= v_min >= 0 makes it monotone and bounded by the
    # speed box over the horizon, so an x box could never bind.
    lb[_idx(IX, np.arange(n + 1), n)] = -np.inf
    ub[_idx(IX, np.arange(n + 1), n)] = np.inf
    lb[_idx(IY, np.arange(n + 1), n)] = -lw / 2.0
    ub[_idx(IY, np.arange(n + 1), n)] = 1.5 * lw
    v_ref = np.clip(ref[:, 2], lim.v_min, lim.v_max)
    th_ref = np.clip(ref[:, 3], -cfg.theta_box, cfg.theta_box)
    lb[_idx(IV, np.arange(n + 1), n)] = np.maximum(lim.v_min, v_ref - trust_v)
    ub[_idx(IV, np.arange(n + 1), n)] = np.minimum(lim.v_max, v_ref + trust_v)
    lb[_idx(ITH, np.arange(n + 1), n)] = np.maximum(-cfg.theta_box, th_ref - trust_theta)
    ub[_idx(ITH, np.arange(n + 1), n)] = np.minimum(cfg.theta_box, th_ref + trust_theta)
    lb[_idx(IA, np.arange(n + 1), n)] = lim.a_min
    ub[_idx(IA, np.arange(n + 1), n)] = lim.a_max
    lb[_idx(IW, np.arange(n + 1), n)] = lim.omega_min
    ub[_idx(IW, np.arange(n + 1), n)] = lim.omega_max
    return lb, ub


def build_linker(cfg: PlannerConfig, sc: Scenario, obstacles: np.ndarray) -> BigMLinker:
    """Per-step obstacle-avoidance groups conditioned on lane membership.

    In the ego lane: stay behind the leader and below the lane boundary.
    In the target lane: stay between the TL rear and front vehicles and
    above the lane boundary. The boundary sits halfway between centerlines.
    """
    n = cfg.n_steps
    nv = 6 * (n + 1)
    y_switch = sc.lane_width / 2.0
    d1, d2, d3 = sc.safety.delta1, sc.safety.delta2, sc.safety.delta3
    el_rows = []
    tl_rows = []
    for t in range(n + 1):
        x_lead, x_fol, x_tgt = obstacles[t, 0, 0], obstacles[t, 1, 0], obstacles[t, 2, 0]
        ix = _idx(IX, t, n)
        iy = _idx(IY, t, n)
        A_el = np.zeros((2, nv))
        A_el[0, ix] = 1.0         # x_t <= x_lead - d1
        A_el[1, iy] = 1.0         # y_t <= y_switch
        b_el = np.array([x_lead - d1, y_switch])
        A_tl = np.zeros((3, nv))
        A_tl[0, ix] = -1.0        # x_t >= x_fol + d2
        A_tl[1, ix] = 1.0         # x_t <= x_tgt - d3
        A_tl[2, iy] = -1.0        # y_t >= y_switch
        b_tl = np.array([-(x_fol + d2), x_tgt - d3, -y_switch])
        el_rows.append((A_el, b_el))
        tl_rows.append((A_tl, b_tl))
    return BigMLinker(el_rows=el_rows, tl_rows=tl_rows)


def feasible_switches(cfg: PlannerConfig, sc: Scenario, obstacles: np.ndarray,
                      ref: np.ndarray, lb: np.ndarray, ub: np.ndarray) -> list[int]:
    """Cheap pre-screen of switch indices, exact for the current linearized QP.

    A pattern switching at k is provably infeasible when the TL slot is
    empty at some step >= k (two x rows contradict outright) or when the
    lane boundary cannot be reached by step k even at the per-step maximum
    of the linearized lateral rate over the current boxes.
    """
    n = cfg.n_steps
    d2, d3 = sc.safety.delta2, sc.safety.delta3
    slot_ok = obstacles[:, 1, 0] + d2 <= obstacles[:, 2, 0] - d3

    vbar, thbar = ref[:, 2], ref[:, 3]
    sb, cb = np.sin(thbar), np.cos(thbar)
    vlo = lb[_idx(IV, np.arange(n + 1), n)]
    vhi = ub[_idx(IV, np.arange(n + 1), n)]
    tlo = lb[_idx(ITH, np.arange(n + 1), n)]
    thi = ub[_idx(ITH, np.arange(n + 1), n)]
    # linearized lateral rate: sin(thb)*v + (vb*cos(thb))*(th - thb)
    gmax = np.where(sb > 0, sb * vhi, sb * vlo) \
        + np.where(vbar * cb > 0, vbar * cb * (thi - thbar), vbar * cb * (tlo - thbar))
    y_switch = sc.lane_width / 2.0
    incr = (cfg.dt / 2.0) * (gmax[:-1] + gmax[1:])
    y_ub = sc.ego0.y + np.concatenate([[0.0], np.cumsum(incr)])

    bad_slot_after = np.zeros(n + 2, dtype=bool)
    for t in range(n, -1, -1):
        bad_slot_after[t] = bad_slot_after[t + 1] or not slot_ok[t]
    ks = [k for k in range(n + 1)
          if not bad_slot_after[k] and y_ub[k] >= y_switch - 1e-9]
    return ks


# ---------------------------------------------------------------------------
# Extraction and labeling
# ---------------------------------------------------------------------------


def _solution_arrays(z: np.ndarray, n: int) -> dict[str, np.ndarray]:
    m = n + 1
    return {
        "x": z[0 * m: 1 * m],
        "y": z[1 * m: 2 * m],
        "v": z[2 * m: 3 * m],
        "theta": z[3 * m: 4 * m],
        "a": z[4 * m: 5 * m],
        "omega": z[5 * m: 6 * m],
    }


def _to_trajectory(arr: dict[str, np.ndarray], dt: float, label: Label, cost: float | None) -> Trajectory:
    n = len(arr["x"]) - 1
    states = tuple(State(float(arr["x"][t]), float(arr["y"][t]), float(arr["v"][t]), float(arr["theta"][t]))
                   for t in range(n + 1))
    controls = tuple(Control(float(arr["a"][t]), float(arr["omega"][t])) for t in range(n))
    return Trajectory(dt=dt, states=states, controls=controls, label=label, cost=cost)


def classify_trajectory(tr: Trajectory, sc: Scenario, cfg: PlannerConfig = PlannerConfig()) -> Label:
    """Label by geometry; a trajectory already marked as a solver failure
    stays a failure."""
    if tr.label is Label.FAILURE:
        return Label.FAILURE
    ys = np.array([s.y for s in tr.states])
    terminal_ok = abs(ys[-1] - sc.y_target) <= cfg.lane_tol
    monotone = bool(np.all(np.diff(ys) >= -cfg.mono_slack))
    heading_ok = abs(tr.states[-1].theta) < cfg.theta_tf_max
    if terminal_ok and monotone and heading_ok:
        return Label.WELL_POSED
    return Label.ILL_POSED


def audit_trajectory(tr: Trajectory, pattern: BinaryPattern, sc: Scenario,
                     cfg: PlannerConfig = PlannerConfig(),
                     idm: IdmParams = DEFAULT_IDM,
                     grid_controls: np.ndarray | None = None) -> dict[str, float]:
    """Independent constraint audit (no solver bookkeeping).

    Returns max violations of: the conditional obstacle margins under the
    given lane-membership pattern, the speed/accel/yaw-rate boxes, and the
    initial state equality. Also reports the nonlinear trapezoidal dynamics
    residual.
    """
    n = tr.n_steps
    obstacles = rollout(sc, n, tr.dt, idm=idm)
    lim = sc.limits
    xs = np.array([s.x for s in tr.states])
    ys = np.array([s.y for s in tr.states])
    vs = np.array([s.v for s in tr.states])
    ths = np.array([s.theta for s in tr.states])
    if grid_controls is not None:
        accs = grid_controls[:, 0]
        oms = grid_controls[:, 1]
    else:
        accs = np.array([c.a for c in tr.controls])
        oms = np.array([c.omega for c in tr.controls])

    viol_margin = 0.0
    y_switch = sc.lane_width / 2.0
    for t in range(n + 1):
        if pattern.delta[t]:
            viol_margin = max(viol_margin, (obstacles[t, 1, 0] + sc.safety.delta2) - xs[t])
            viol_margin = max(viol_margin, xs[t] - (obstacles[t, 2, 0] - sc.safety.delta3))
            viol_margin = max(viol_margin, y_switch - ys[t])
        else:
            viol_margin = max(viol_margin, xs[t] - (obstacles[t, 0, 0] - sc.safety.delta1))
            viol_margin = max(viol_margin, ys[t] - y_switch)

    viol_box = max(
        float(np.max(lim.v_min - vs, initial=0.0)),
        float(np.max(vs - lim.v_max, initial=0.0)),
        float(np.max(lim.a_min - accs, initial=0.0)),
        float(np.max(accs - lim.a_max, initial=0.0)),
        float(np.max(lim.omega_min - oms, initial=0.0)),
        float(np.max(oms - lim.omega_max, initial=0.0)),
    )
    viol_init = max(abs(xs[0] - sc.ego0.x), abs(ys[0] - sc.ego0.y),
                    abs(vs[0] - sc.ego0.v), abs(ths[0] - sc.ego0.theta))

    # nonlinear trapezoidal residual (needs the full control grid)
    if grid_controls is not None and len(accs) == n + 1:
        h = tr.dt / 2.0
        rx = xs[1:] - xs[:-1] - h * (vs[:-1] * np.cos(ths[:-1]) + vs[1:] * np.cos(ths[1:]))
        ry = ys[1:] - ys[:-1] - h * (vs[:-1] * np.sin(ths[:-1]) + vs[1:] * np.sin(ths[1:]))
        rv = vs[1:] - vs[:-1] - h * (accs[:-1] + accs[1:])
        rt = ths[1:] - ths[:-1] - h * (oms[:-1] + oms[1:])
        dyn = float(max(np.abs(rx).max(), np.abs(ry).max(), np.abs(rv).max(), np.abs(rt).max()))
    else:
        dyn = float("nan")
    return {"margin": viol_margin, "box": viol_box, "init": viol_init, "dyn_residual": dyn}


# ---------------------------------------------------------------------------
# The successive loop
# ---------------------------------------------------------------------------


@dataclass
class PlanResult:
    trajectory: Trajectory
    report: SolveReport
    grid_controls: np.ndarray | None = None   # (N+1, 2) full control grid
    obstacles: np.ndarray | None = None       # predicted obstacle states
    final_qp: Qp | None = None
    final_pattern_rows: tuple[np.ndarray, np.ndarray] | None = None


class _PatternIndexer:
    """Maps per-pattern extra-row positions to pattern-independent ids.

    Extra rows for switch k are: two ego-lane rows per step t < k, three
    target-lane rows per step t >= k, all stacked by t. Ids are t*5 + j
    (j 0..1 ego-lane, 2..4 target-lane); base rows keep their own indices
    via negative ids.
    """

    def __init__(self, n_pat: int, n_base: int):
        self.n_pat = n_pat
        self.n_base = n_base

    def ids_for(self, k: int) -> np.ndarray:
        ids = []
        for t in range(self.n_pat):
            ids.extend((t * 5, t * 5 + 1) if t < k else (t * 5 + 2, t * 5 + 3, t * 5 + 4))
        return np.asarray(ids, dtype=int)

    def to_ids(self, k: int, rows: np.ndarray) -> np.ndarray:
        ids = self.ids_for(k)
        out = np.where(rows < self.n_base, -1 - rows, 0)
        extra = rows >= self.n_base
        out[extra] = ids[rows[extra] - self.n_base]
        return out

    def to_rows(self, k: int, ids: np.ndarray) -> np.ndarray:
        pat_ids = self.ids_for(k)
        pos = {int(v): i for i, v in enumerate(pat_ids)}
        rows = []
        for v in ids:
            v = int(v)
            if v < 0:
                rows.append(-1 - v)
            elif v in pos:
                rows.append(self.n_base + pos[v])
        return np.asarray(rows, dtype=int)


def _enumerate_patterns(solver: ReducedSolver, linker: BigMLinker, ks: list[int],
                        k_first: int, hint_ids: np.ndarray | None,
                        indexer: _PatternIndexer) -> tuple[QpSolution | None, int, np.ndarray | None]:
    """Incumbent-pruned sweep over switch indices, nearest to k_first first.

    Ordering only affects speed; the smallest-k tie-break is applied on the
    way out. Returns (best, best_k, best active-row ids).
    """
    order = sorted(ks, key=lambda k: (abs(k - k_first), k))
    best: QpSolution | None = None
    best_k = -1
    best_ids = None
    carry = hint_ids
    for k in order:
        A, b = linker.pattern_rows(k)
        abort = best.objective + 1e-9 if best is not None else np.inf
        start = indexer.to_rows(k, carry) if carry is not None else None
        sol = solver.solve_with_extra(A, b, abort_above=abort, start_active=start)
        if sol.status is not QpStatus.INFEASIBLE and sol.active_rows.size:
            carry = indexer.to_ids(k, sol.active_rows)
        if sol.status is not QpStatus.OPTIMAL:
            continue
        better = best is None or sol.objective < best.objective - 1e-9
        tie_smaller = best is not None and abs(sol.objective - best.objective) <= 1e-9 and k < best_k
        if better or tie_smaller:
            best = sol
            best_k = k
            best_ids = indexer.to_ids(k, sol.active_rows)
    return best, best_k, best_ids


def _make_reference(sc: Scenario, cfg: PlannerConfig, idm: IdmParams) -> tuple[np.ndarray, float]:
    """Quintic seed states, clamped into the speed/heading envelope.

    The raw seed ignores bounds; linearizing about an out-of-envelope
    reference would empty the trust-region boxes, so the reference is
    clamped and the worst excursion reported alongside.
    """
    bc = boundary_from_prediction(sc, cfg.tf, cfg.n_steps, idm=idm)
    q = fit(bc, cfg.tf)
    ref = to_state_seed(q, cfg.n_steps, cfg.tf)
    lim = sc.limits
    # clamp into the reachable tube so the trust region around the seed
    # always intersects the dynamics/limit boxes
    t = np.arange(cfg.n_steps + 1) * cfg.dt
    v_lo = np.maximum(lim.v_min, sc.ego0.v + lim.a_min * t)
    v_hi = np.minimum(lim.v_max, sc.ego0.v + lim.a_max * t)
    th_lo = np.maximum(-cfg.theta_box, sc.ego0.theta + lim.omega_min * t)
    th_hi = np.minimum(cfg.theta_box, sc.ego0.theta + lim.omega_max * t)
    v_cl = np.clip(ref[:, 2], v_lo, v_hi)
    th_cl = np.clip(ref[:, 3], th_lo, th_hi)
    viol = max(float(np.abs(ref[:, 2] - v_cl).max()), float(np.abs(ref[:, 3] - th_cl).max()))
    ref[:, 2] = v_cl
    ref[:, 3] = th_cl
    return ref, viol


def plan(sc: Scenario, cfg: PlannerConfig = PlannerConfig(),
         idm: IdmParams = DEFAULT_IDM, keep_qp: bool = False) -> PlanResult:
    """Run the successive mixed-binary optimization on one scenario."""
    require_valid(sc)
    t_start = time.perf_counter()
    n = cfg.n_steps
    dt = cfg.dt

    obstacles = rollout(sc, n, dt, idm=idm)
    H, g, c0 = build_cost(cfg, sc)
    linker = build_linker(cfg, sc, obstacles)
    A_init, b_init = initial_state_rows(sc, n)

    report = SolveReport()
    ref, report.seed_bound_violation = _make_reference(sc, cfg, idm)
    trust_v, trust_theta = cfg.trust_v, cfg.trust_theta
    tried_repair = False
    y_switch = sc.lane_width / 2.0
    crossing = np.argmax(ref[:, 1] >= y_switch) if (ref[:, 1] >= y_switch).any() else n
    k_first = int(crossing)
    hint_ids: np.ndarray | None = None
    best_sol: QpSolution | None = None
    best_pattern: BinaryPattern | None = None
    prev_obj = None
    prev_states = None
    final_base: Qp | None = None

    it = 0
    while it < cfg.max_outer_iters:
        A_dyn, b_dyn = linearize(ref, dt)
        A_eq = np.vstack([A_init, A_dyn])
        b_eq = np.concatenate([b_init, b_dyn])
        lb, ub = build_boxes(cfg, sc, ref, trust_v, trust_theta)
        base = Qp(H, g, A_eq, b_eq, np.zeros((0, 6 * (n + 1))), np.zeros(0), lb, ub, c0)
        solver = ReducedSolver(base, max_changes=cfg.max_changes,
                               null_space=nullspace_from_reference(sc, ref, dt),
                               lazy_eq_duals=True, lazy_certificates=True)
        indexer = _PatternIndexer(linker.n_steps, solver.n_base_rows)
        ks = feasible_switches(cfg, sc, obstacles, ref, lb, ub)
        if cfg.strategy == "bnb":
            sol, k, _ = solve_mixed_bnb(base, linker, max_changes=cfg.max_changes)
        else:
            sol, k, ids = _enumerate_patterns(solver, linker, ks, k_first, hint_ids, indexer)
            if ids is not None:
                hint_ids = ids
                k_first = k
        report.n_qp_solves += max(len(ks), 1)

        if sol is None:
            if not tried_repair:
                tried_repair = True
                report.repaired = True
                ref, _ = _make_reference(sc, cfg, idm)
                trust_v, trust_theta = cfg.trust_v * 2.0, cfg.trust_theta * 2.0
                hint_ids = None
                it += 1
                continue
            report.outer_iterations = it + 1
            report.status = "infeasible"
            report.label = Label.FAILURE
            report.wall_time = time.perf_counter() - t_start
            empty = Trajectory(dt=dt, states=(State(sc.ego0.x, sc.ego0.y, sc.ego0.v, sc.ego0.theta),),
                               controls=(), label=Label.FAILURE, cost=None)
            return PlanResult(empty, report, obstacles=obstacles)

        pattern = BinaryPattern.from_switch(k, linker.n_steps)
        arr = _solution_arrays(sol.z, n)
        states = np.column_stack([arr["x"], arr["y"], arr["v"], arr["theta"]])
        report.objectives.append(sol.objective)
        best_sol, best_pattern = sol, pattern
        final_base = base
        it += 1

        step_inf = float(np.abs(states - prev_states).max()) if prev_states is not None else math.inf
        obj_change = abs(sol.objective - prev_obj) / max(1.0, abs(prev_obj)) if prev_obj is not None else math.inf
        converged = step_inf <= cfg.conv_tol and obj_change <= cfg.obj_rel_tol
        if prev_obj is not None and sol.objective > prev_obj + 1e-9 * max(1.0, abs(prev_obj)):
            trust_v = max(trust_v * 0.5, cfg.trust_v / 8.0)
            trust_theta = max(trust_theta * 0.5, cfg.trust_theta / 8.0)
        else:
            trust_v = min(trust_v * 1.5, cfg.trust_v * 3.0)
            trust_theta = min(trust_theta * 1.5, cfg.trust_theta * 3.0)
        prev_obj = sol.objective
        prev_states = states
        ref = states
        if converged:
            report.status = "converged"
            break
    else:
        report.status = "max-outer-iter"

    report.outer_iterations = it
    arr = _solution_arrays(best_sol.z, n)
    grid_controls = np.column_stack([arr["a"], arr["omega"]])
    traj = _to_trajectory(arr, dt, Label.ILL_POSED, best_sol.objective)
    label = classify_trajectory(traj, sc, cfg)
    traj = Trajectory(dt=traj.dt, states=traj.states, controls=traj.controls,
                      label=label, cost=best_sol.objective)
    report.pattern = best_pattern
    report.label = label
    audit = audit_trajectory(traj, best_pattern, sc, cfg, idm=idm, grid_controls=grid_controls)
    report.dyn_residual = audit["dyn_residual"]
    report.wall_time = time.perf_counter() - t_start
    result = PlanResult(traj, report, grid_controls=grid_controls, obstacles=obstacles)
    if keep_qp and final_base is not None:
        result.final_qp = final_base
        result.final_pattern_rows = linker.pattern_rows(best_pattern.switch_index)
    return result
