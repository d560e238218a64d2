"""Obstacle motion prediction and random scenario sampling.

Obstacles move longitudinally in fixed lanes under one of three policies:
constant velocity, constant acceleration, or the intelligent driver model
(IDM) car-following law

    a = a_max * [1 - (v/v0)^delta - (s*/s)^2]
    s* = s0 + v*T + v*dv / (2*sqrt(a_max*b))

where s is the gap to the leader and dv the closing speed. The TL rear
vehicle follows the TL front vehicle; the EL leader and the TL front
vehicle see a free road (infinite gap).

Random sampling uses numpy's PCG64 generator seeded through SeedSequence,
which is portable across platforms, so datasets reproduce bit-exactly from
an integer seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import (
    Lane,
    Limits,
    ObstacleState,
    Policy,
    SafetyConfig,
    Scenario,
    State,
    ValidationError,
    validate_scenario,
)


@dataclass(frozen=True)
class IdmParams:
    v0: float = 11.1          # desired speed (m/s), ~40 km/h
    T_headway: float = 1.5    # time headway (s)
    a_idm: float = 1.0        # max acceleration (m/s^2)
    b_idm: float = 1.5        # comfortable deceleration (m/s^2)
    s0: float = 2.0           # jam distance (m)
    delta_exp: float = 4.0    # acceleration exponent

    def __post_init__(self):
        if min(self.v0, self.T_headway, self.a_idm, self.b_idm, self.s0, self.delta_exp) <= 0:
            raise ValidationError("IDM parameters must be positive")


DEFAULT_IDM = IdmParams()


def idm_acceleration(v: float, gap: float, dv: float, p: IdmParams = DEFAULT_IDM) -> float:
    """IDM acceleration for speed v, bumper gap `gap`, closing speed dv = v - v_lead.

    gap = +inf means free road.
    """
    v = max(v, 0.0)
    free = 1.0 - (v / p.v0) ** p.delta_exp
    if not math.isfinite(gap):
        return p.a_idm * free
    s_star = p.s0 + v * p.T_headway + v * dv / (2.0 * math.sqrt(p.a_idm * p.b_idm))
    s_star = max(s_star, p.s0)
    s = max(gap, 1e-3)
    return p.a_idm * (free - (s_star / s) ** 2)


def predict(
    ob: ObstacleState,
    dt: float,
    leader: tuple[float, float] | None = None,
    idm: IdmParams = DEFAULT_IDM,
) -> ObstacleState:
    """Advance one obstacle by dt under its driving policy.

    leader is (gap, leader_speed) for the IDM policy; None means free road.
    """
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    if ob.policy is Policy.CONST_VEL:
        return replace(ob, x=ob.x + ob.v * dt, a=0.0)
    if ob.policy is Policy.CONST_ACC:
        v_new = ob.v + ob.a * dt
        if v_new < 0.0:
            # stop exactly at v=0, then hold
            t_stop = ob.v / max(-ob.a, 1e-12)
            x_new = ob.x + ob.v * t_stop + 0.5 * ob.a * t_stop * t_stop
            return replace(ob, x=x_new, v=0.0)
        return replace(ob, x=ob.x + ob.v * dt + 0.5 * ob.a * dt * dt, v=v_new)
    # IDM
    if leader is None:
        acc = idm_acceleration(ob.v, math.inf, 0.0, idm)
    else:
        gap, v_lead = leader
        acc = idm_acceleration(ob.v, gap, ob.v - v_lead, idm)
    v_new = max(ob.v + acc * dt, 0.0)
    x_new = ob.x + 0.5 * (ob.v + v_new) * dt
    return replace(ob, x=x_new, v=v_new, a=acc)


def rollout(sc: Scenario, n_steps: int, dt: float, idm: IdmParams = DEFAULT_IDM) -> np.ndarray:
    """Predict all three obstacles over the horizon.

    Returns array of shape (n_steps+1, 3, 3): [step, vehicle, (x, v, a)] with
    vehicles ordered (leader, follower, target). The TL rear vehicle uses the
    TL front vehicle as its IDM leader.
    """
    leader, follower, target = sc.leader, sc.follower, sc.target
    out = np.empty((n_steps + 1, 3, 3))
    for k in range(n_steps + 1):
        out[k, 0] = (leader.x, leader.v, leader.a)
        out[k, 1] = (follower.x, follower.v, follower.a)
        out[k, 2] = (target.x, target.v, target.a)
        if k == n_steps:
            break
        new_target = predict(target, dt, leader=None, idm=idm)
        if follower.policy is Policy.IDM:
            gap = target.x - follower.x
            new_follower = predict(follower, dt, leader=(gap, target.v), idm=idm)
        else:
            new_follower = predict(follower, dt, leader=None, idm=idm)
        leader = predict(leader, dt, leader=None, idm=idm)
        follower, target = new_follower, new_target
    return out


@dataclass(frozen=True)
class SamplerConfig:
    """Random scenario generation ranges.

    Obstacle speeds are uniform on [v_lo, v_hi] (defaults 20-40 km/h). The
    ego starts behind the EL leader by at least headway_rule seconds of
    travel. The TL gap is uniform on gap_range, with the ego placed abreast
    of the gap midpoint plus a uniform offset.
    """

    v_lo: float = 20.0 / 3.6
    v_hi: float = 40.0 / 3.6
    headway_rule: float = 3.0
    seed: int = 0
    gap_range: tuple[float, float] = (15.0, 60.0)
    midpoint_offset: float = 10.0
    lead_gap_extra: float = 20.0
    accel_range: tuple[float, float] = (-1.0, 1.0)
    assumption: Policy = Policy.CONST_VEL

    def __post_init__(self):
        if not self.v_lo < self.v_hi:
            raise ValidationError("need v_lo < v_hi")
        if self.headway_rule <= 0:
            raise ValidationError("headway_rule must be positive")
        if not self.gap_range[0] < self.gap_range[1]:
            raise ValidationError("gap_range must be increasing")


MAX_SAMPLE_RETRIES = 100


def sample_scenario(
    cfg: SamplerConfig,
    rng: np.random.Generator,
    lane_width: float = 3.5,
    safety: SafetyConfig = SafetyConfig(),
    limits: Limits = Limits(),
) -> Scenario:
    """Draw one random scenario under the configured assumption.

    The ego starts at the EL centerline (x=0, y=0, theta=0). Rejected draws
    (failing scenario validation) are resampled up to MAX_SAMPLE_RETRIES.
    """
    for _ in range(MAX_SAMPLE_RETRIES):
        v_ego = rng.uniform(cfg.v_lo, cfg.v_hi)
        v1, v2, v3 = rng.uniform(cfg.v_lo, cfg.v_hi, size=3)
        lead_gap = cfg.headway_rule * v_ego + rng.uniform(0.0, cfg.lead_gap_extra)
        gap = rng.uniform(*cfg.gap_range)
        offset = rng.uniform(-cfg.midpoint_offset, cfg.midpoint_offset)
        if cfg.assumption is Policy.CONST_ACC:
            a1, a2, a3 = rng.uniform(cfg.accel_range[0], cfg.accel_range[1], size=3)
        else:
            a1 = a2 = a3 = 0.0
        sc = Scenario(
            ego0=State(x=0.0, y=0.0, v=v_ego, theta=0.0),
            leader=ObstacleState(x=lead_gap, v=v1, a=a1, lane=Lane.EL, policy=cfg.assumption),
            follower=ObstacleState(x=offset - gap / 2.0, v=v2, a=a2, lane=Lane.TL, policy=cfg.assumption),
            target=ObstacleState(x=offset + gap / 2.0, v=v3, a=a3, lane=Lane.TL, policy=cfg.assumption),
            lane_width=lane_width,
            safety=safety,
            limits=limits,
        )
        if not validate_scenario(sc):
            return sc
    raise ValidationError(f"could not sample a valid scenario in {MAX_SAMPLE_RETRIES} tries")


class ScenarioSampler:
    """Seeded stream of scenarios; one instance per worker."""

    def __init__(self, cfg: SamplerConfig, lane_width: float = 3.5,
                 safety: SafetyConfig = SafetyConfig(), limits: Limits = Limits()):
        self.cfg = cfg
        self.lane_width = lane_width
        self.safety = safety
        self.limits = limits

    def sample(self, index: int) -> Scenario:
        """Scenario #index of the stream; independent of call order."""
        seq = np.random.SeedSequence(entropy=self.cfg.seed, spawn_key=(index,))
        rng = np.random.Generator(np.random.PCG64(seq))
        return sample_scenario(self.cfg, rng, self.lane_width, self.safety, self.limits)
