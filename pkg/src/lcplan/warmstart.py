"""Quintic-polynomial lane-change seed trajectory.

x(t) and y(t) are independent degree-5 polynomials fixed by position,
velocity and acceleration at t=0 and t=tf (12 conditions, two 6x6 linear
systems). The seed initializes the successive optimization; it ignores
obstacles and control bounds on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Scenario, ValidationError
from .traffic import IdmParams, DEFAULT_IDM, rollout


@dataclass(frozen=True)
class BoundaryConditions:
    x0: float
    y0: float
    vx0: float
    vy0: float
    ax0: float
    ay0: float
    xf: float
    yf: float
    vxf: float
    vyf: float
    axf: float
    ayf: float


@dataclass(frozen=True)
class QuinticPair:
    """Coefficients low-to-high: p(t) = c[0] + c[1] t + ... + c[5] t^5."""

    ax: tuple[float, ...]
    by: tuple[float, ...]

    def eval_x(self, t):
        return np.polyval(self.ax[::-1], t)

    def eval_y(self, t):
        return np.polyval(self.by[::-1], t)

    def eval_dx(self, t):
        c = self.ax
        return np.polyval((5 * c[5], 4 * c[4], 3 * c[3], 2 * c[2], c[1]), t)

    def eval_dy(self, t):
        c = self.by
        return np.polyval((5 * c[5], 4 * c[4], 3 * c[3], 2 * c[2], c[1]), t)

    def eval_ddx(self, t):
        c = self.ax
        return np.polyval((20 * c[5], 12 * c[4], 6 * c[3], 2 * c[2]), t)

    def eval_ddy(self, t):
        c = self.by
        return np.polyval((20 * c[5], 12 * c[4], 6 * c[3], 2 * c[2]), t)


def _solve_axis(p0: float, v0: float, a0: float, pf: float, vf: float, af: float, tf: float) -> tuple[float, ...]:
    # c0..c2 follow from the t=0 conditions; the terminal block is 3x3.
    c0, c1, c2 = p0, v0, a0 / 2.0
    t2, t3, t4, t5 = tf * tf, tf ** 3, tf ** 4, tf ** 5
    A = np.array([
        [t3, t4, t5],
        [3 * t2, 4 * t3, 5 * t4],
        [6 * tf, 12 * t2, 20 * t3],
    ])
    b = np.array([
        pf - (c0 + c1 * tf + c2 * t2),
        vf - (c1 + 2 * c2 * tf),
        af - 2 * c2,
    ])
    c3, c4, c5 = np.linalg.solve(A, b)
    return (c0, c1, c2, float(c3), float(c4), float(c5))


def fit(bc: BoundaryConditions, tf: float) -> QuinticPair:
    """Unique quintic pair matching all 12 boundary conditions."""
    if tf <= 0:
        raise ValidationError(f"tf must be positive, got {tf}")
    ax = _solve_axis(bc.x0, bc.vx0, bc.ax0, bc.xf, bc.vxf, bc.axf, tf)
    by = _solve_axis(bc.y0, bc.vy0, bc.ay0, bc.yf, bc.vyf, bc.ayf, tf)
    return QuinticPair(ax=ax, by=by)


def to_state_seed(q: QuinticPair, n: int, tf: float) -> np.ndarray:
    """Sample the quintic on the uniform grid as (x, y, v, theta) rows.

    v = hypot(dx, dy); theta = atan2(dy, dx), holding the previous heading
    where v vanishes (theta=0 if that happens at t=0).
    """
    if n < 2:
        raise ValidationError(f"need n >= 2, got {n}")
    t = np.linspace(0.0, tf, n + 1)
    x = q.eval_x(t)
    y = q.eval_y(t)
    dx = q.eval_dx(t)
    dy = q.eval_dy(t)
    v = np.hypot(dx, dy)
    theta = np.empty(n + 1)
    prev = 0.0
    for i in range(n + 1):
        if v[i] > 1e-12:
            prev = math.atan2(dy[i], dx[i])
        theta[i] = prev
    return np.column_stack([x, y, v, theta])


def control_seed(q: QuinticPair, n: int, tf: float) -> np.ndarray:
    """Grid samples of (a, omega) implied by the quintic.

    a = d|v|/dt = (dx*ddx + dy*ddy)/v, omega = (dx*ddy - dy*ddx)/v^2;
    both zero where v vanishes.
    """
    t = np.linspace(0.0, tf, n + 1)
    dx, dy = q.eval_dx(t), q.eval_dy(t)
    ddx, ddy = q.eval_ddx(t), q.eval_ddy(t)
    v2 = dx * dx + dy * dy
    safe = v2 > 1e-12
    a = np.zeros(n + 1)
    w = np.zeros(n + 1)
    a[safe] = (dx[safe] * ddx[safe] + dy[safe] * ddy[safe]) / np.sqrt(v2[safe])
    w[safe] = (dx[safe] * ddy[safe] - dy[safe] * ddx[safe]) / v2[safe]
    return np.column_stack([a, w])


def boundary_from_prediction(sc: Scenario, tf: float, n: int = 50,
                             idm: IdmParams = DEFAULT_IDM) -> BoundaryConditions:
    """Initial conditions from the ego state; terminal conditions from where
    the TL front vehicle is predicted to be at tf (position, speed, accel),
    at the TL centerline with zero lateral rate."""
    pred = rollout(sc, n, tf / n, idm=idm)
    xf, vf, af = pred[-1, 2]
    return BoundaryConditions(
        x0=sc.ego0.x,
        y0=sc.ego0.y,
        vx0=sc.ego0.v * math.cos(sc.ego0.theta),
        vy0=sc.ego0.v * math.sin(sc.ego0.theta),
        ax0=0.0,
        ay0=0.0,
        xf=float(xf),
        yf=sc.lane_width,
        vxf=float(vf),
        vyf=0.0,
        axf=float(af),
        ayf=0.0,
    )
