"""Vehicle motion and control: kinematic bicycle integration, CACC
longitudinal control with predecessor-acceleration feedforward, pure-pursuit
lateral tracking, a delayed optimal-velocity surrogate for human drivers,
and the scripted speed-perturbation profiles used by the platoon case study.

All step functions are pure and deterministic; controller history (the HDV
delay buffer) lives in a per-vehicle object owned by its entity process.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

from .space import normalize_angle
from .track import Track

# Platoon cruise speed: 10.08 km/h expressed in m/s.
CRUISE_SPEED = 10.08 / 3.6
# Floor speed of the scripted braking maneuver: 1.01 km/h.
BRAKE_FLOOR_SPEED = 1.01 / 3.6
BRAKE_DECEL = 0.28
BRAKE_HOLD_S = 20.0
BRAKE_RECOVER_S = 12.0

# Mixed-space wheelbase: the 0.19 m scaled-vehicle wheelbase at 1:14.
DEFAULT_WHEELBASE = 2.66


class DynamicsError(Exception):
    pass


class OffPathError(DynamicsError):
    """Vehicle is beyond the recovery threshold from its reference path."""


def _require_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise DynamicsError(f"non-finite input {v}")


@dataclass
class BicycleState:
    x: float
    y: float
    heading: float
    speed: float
    wheelbase: float = DEFAULT_WHEELBASE

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be >= 0")
        if self.wheelbase <= 0:
            raise ValueError("wheelbase must be > 0")


def bicycle_step(
    s: BicycleState, target_speed: float, steer: float, dt: float, accel_limit: float = 2.0
) -> BicycleState:
    """One integration step of the rear-axle kinematic bicycle model.

    Speed moves toward ``target_speed`` at most ``accel_limit`` and never
    below zero; position and heading advance with the updated speed.
    """
    _require_finite(target_speed, steer, dt, accel_limit)
    if dt <= 0:
        raise DynamicsError(f"dt must be > 0, got {dt}")
    if abs(steer) >= math.pi / 2:
        raise DynamicsError(f"steer {steer} outside (-pi/2, pi/2)")
    dv = max(0.0, target_speed) - s.speed
    dv = max(-accel_limit * dt, min(accel_limit * dt, dv))
    v = max(0.0, s.speed + dv)
    return replace(
        s,
        x=s.x + v * math.cos(s.heading) * dt,
        y=s.y + v * math.sin(s.heading) * dt,
        heading=normalize_angle(s.heading + v * math.tan(steer) / s.wheelbase * dt),
        speed=v,
    )


@dataclass(frozen=True)
class CaccParams:
    """Constant-time-gap CACC with predecessor acceleration feedforward."""

    d0: float = 5.0  # standstill gap, m
    h: float = 0.6  # time gap, s
    kp: float = 0.45  # gap gain, 1/s^2
    kd: float = 0.25  # speed gain, 1/s
    kff: float = 1.0  # feedforward gain
    a_min: float = -2.5
    a_max: float = 2.0

    def __post_init__(self):
        if not (self.d0 > 0 and self.h > 0 and self.kp > 0 and self.kd > 0):
            raise ValueError("d0, h, kp, kd must be > 0")
        if not 0.0 <= self.kff <= 1.0:
            raise ValueError("kff must be in [0, 1]")
        if not self.a_min < 0 < self.a_max:
            raise ValueError("accel bounds must straddle 0")

    def scaled(self, factor: float) -> "CaccParams":
        """Scale-consistent parameters for a geometrically similar frame.

        Lengths, speeds, and accelerations divide by the frame scale; time
        constants and the dimensionally invariant gains are unchanged.
        """
        return replace(
            self, d0=self.d0 * factor, a_min=self.a_min * factor, a_max=self.a_max * factor
        )

    def equilibrium_gap(self, speed: float) -> float:
        return self.d0 + self.h * speed


def cacc_longitudinal(
    gap: float, own_speed: float, pred_speed: float, pred_accel: float, p: CaccParams
) -> float:
    """Commanded acceleration for one CACC follower.

    ``gap`` may be infinite for the platoon head, in which case the spacing
    term is dropped and ``pred_speed`` acts as the cruise set speed.
    """
    _require_finite(own_speed, pred_speed, pred_accel)
    if math.isinf(gap):
        a = p.kd * (pred_speed - own_speed) + p.kff * pred_accel
    elif not math.isfinite(gap):
        raise DynamicsError("gap must be finite or +inf")
    else:
        spacing_error = gap - p.equilibrium_gap(own_speed)
        a = p.kp * spacing_error + p.kd * (pred_speed - own_speed) + p.kff * pred_accel
    return max(p.a_min, min(p.a_max, a))


def preview_lateral(
    s: BicycleState,
    path: Track,
    lookahead: float = 5.0,
    steer_max: float = 0.6,
    recovery_threshold: float = 20.0,
    hint: int | None = None,
) -> tuple[float, int]:
    """Pure-pursuit steering toward the path point one lookahead ahead.

    The target is the point where the circle of radius ``lookahead`` around
    the vehicle crosses the path beyond the vehicle's projection, so the
    chord to the target has length ``lookahead`` exactly. Returns the
    clamped steer angle and the projection segment index for reuse as the
    next call's hint.
    """
    if lookahead <= 0:
        raise DynamicsError("lookahead must be > 0")
    arc, dist, seg = path.project(s.x, s.y, hint)
    if dist > recovery_threshold:
        raise OffPathError(f"{dist:.2f} m from path exceeds recovery threshold")
    tx, ty = path.lookahead_point(s.x, s.y, arc, lookahead)
    alpha = normalize_angle(math.atan2(ty - s.y, tx - s.x) - s.heading)
    steer = math.atan2(2.0 * s.wheelbase * math.sin(alpha), lookahead)
    return (max(-steer_max, min(steer_max, steer)), seg)


@dataclass(frozen=True)
class HdvParams:
    """Delayed optimal-velocity surrogate for a human driver.

    The desired-speed function V(s) ramps linearly from 0 at gap ``s0`` to
    ``v_free`` at gap ``s0 + s1``.
    """

    tau: float = 0.8  # reaction delay, s
    alpha: float = 0.6  # sensitivity toward desired speed, 1/s
    beta: float = 0.3  # relative-speed gain, 1/s
    v_free: float = 4.2
    s0: float = 3.0
    s1: float = 6.0
    a_min: float = -3.0
    a_max: float = 2.0

    def __post_init__(self):
        if self.tau < 0 or self.alpha <= 0 or self.beta < 0:
            raise ValueError("need tau >= 0, alpha > 0, beta >= 0")
        if self.s1 <= 0 or self.v_free <= 0:
            raise ValueError("v_free and s1 must be > 0")

    def scaled(self, factor: float) -> "HdvParams":
        return replace(
            self,
            v_free=self.v_free * factor,
            s0=self.s0 * factor,
            s1=self.s1 * factor,
            a_min=self.a_min * factor,
            a_max=self.a_max * factor,
        )

    def desired_speed(self, gap: float) -> float:
        return self.v_free * max(0.0, min(1.0, (gap - self.s0) / self.s1))

    def equilibrium_gap(self, speed: float) -> float:
        if speed >= self.v_free:
            return self.s0 + self.s1
        return self.s0 + self.s1 * speed / self.v_free


@dataclass
class HdvController:
    """Holds the (gap, own speed, predecessor speed) delay buffer."""

    params: HdvParams
    _history: deque = field(default_factory=deque)
    warmed_up: bool = False

    def step(self, gap: float, own_speed: float, pred_speed: float, t: float, dt: float) -> float:
        """Commanded acceleration from inputs one reaction delay ago.

        Until the buffer spans the reaction delay the oldest sample is used
        and ``warmed_up`` stays False.
        """
        _require_finite(gap, own_speed, pred_speed, t)
        self._history.append((t, gap, own_speed, pred_speed))
        horizon = t - self.params.tau
        while len(self._history) >= 2 and self._history[1][0] <= horizon + 1e-12:
            self._history.popleft()
        t_d, gap_d, own_d, pred_d = self._history[0]
        if not self.warmed_up:
            self.warmed_up = t_d <= horizon + 1e-12
        p = self.params
        a = p.alpha * (p.desired_speed(gap_d) - own_d) + p.beta * (pred_d - own_d)
        return max(p.a_min, min(p.a_max, a))


def hdv_step(
    gap: float,
    own_speed: float,
    pred_speed: float,
    controller: HdvController,
    t: float,
    dt: float,
) -> float:
    return controller.step(gap, own_speed, pred_speed, t, dt)


@dataclass(frozen=True)
class SuddenBrake:
    """Scripted braking maneuver: ramp down, hold low, ramp back up."""

    t0: float
    base: float = CRUISE_SPEED
    decel: float = BRAKE_DECEL
    floor: float = BRAKE_FLOOR_SPEED
    hold: float = BRAKE_HOLD_S
    recover: float = BRAKE_RECOVER_S

    def __post_init__(self):
        if min(self.base, self.decel, self.hold, self.recover) < 0 or self.floor < 0:
            raise ValueError("brake profile parameters must be nonnegative")
        if self.floor > self.base:
            raise ValueError("floor speed above base speed")

    @property
    def ramp_duration(self) -> float:
        return (self.base - self.floor) / self.decel

    @property
    def duration(self) -> float:
        return self.ramp_duration + self.hold + self.recover

    def value(self, t: float) -> float:
        u = t - self.t0
        if u < 0:
            return self.base
        if u < self.ramp_duration:
            return self.base - self.decel * u
        u -= self.ramp_duration
        if u < self.hold:
            return self.floor
        u -= self.hold
        if u < self.recover:
            return self.floor + (self.base - self.floor) * u / self.recover
        return self.base

    def scaled(self, factor: float) -> "SuddenBrake":
        return replace(
            self,
            base=self.base * factor,
            decel=self.decel * factor,
            floor=self.floor * factor,
        )


@dataclass(frozen=True)
class Sinusoid:
    """Sinusoidal speed perturbation around the base speed."""

    t0: float
    base: float = CRUISE_SPEED
    amplitude: float = 0.3
    frequency: float = 0.2

    def __post_init__(self):
        if self.amplitude >= self.base:
            raise ValueError("amplitude must stay below the base speed")
        if self.frequency <= 0:
            raise ValueError("frequency must be > 0")

    def value(self, t: float) -> float:
        if t < self.t0:
            return self.base
        return max(0.0, self.base + self.amplitude * math.sin(2 * math.pi * self.frequency * (t - self.t0)))

    def scaled(self, factor: float) -> "Sinusoid":
        return replace(self, base=self.base * factor, amplitude=self.amplitude * factor)


@dataclass(frozen=True)
class HandDrawn:
    """Operator-sketched speed profile as (time offset, speed) samples."""

    t0: float
    samples: tuple[tuple[float, float], ...]
    base: float = CRUISE_SPEED

    def __post_init__(self):
        if len(self.samples) < 2:
            raise ValueError("need at least 2 samples")
        times = [u for u, _ in self.samples]
        if times != sorted(times):
            raise ValueError("sample times must be nondecreasing")

    def value(self, t: float) -> float:
        u = t - self.t0
        if u < 0 or u < self.samples[0][0]:
            return self.base
        if u >= self.samples[-1][0]:
            return max(0.0, self.samples[-1][1])
        for (u0, v0), (u1, v1) in zip(self.samples, self.samples[1:]):
            if u0 <= u <= u1:
                if u1 == u0:
                    return max(0.0, v1)
                frac = (u - u0) / (u1 - u0)
                return max(0.0, v0 + frac * (v1 - v0))
        return self.base

    def scaled(self, factor: float) -> "HandDrawn":
        return replace(
            self,
            base=self.base * factor,
            samples=tuple((u, v * factor) for u, v in self.samples),
        )


SpeedProfile = SuddenBrake | Sinusoid | HandDrawn


def evaluate_profile(profile: SpeedProfile | None, t: float, base_speed: float) -> float:
    """Target speed at time t; the base speed applies with no active profile."""
    if t < 0:
        raise DynamicsError("t must be >= 0")
    if profile is None:
        return base_speed
    return profile.value(t)


@dataclass(frozen=True)
class LateralParams:
    """Pure-pursuit tuning; lookahead grows with speed within [lo, hi]."""

    lookahead: float = 5.0
    lookahead_min: float = 2.0
    lookahead_max: float = 12.0
    steer_max: float = 0.6
    recovery_threshold: float = 20.0
    reference_speed: float = CRUISE_SPEED

    def scaled(self, factor: float) -> "LateralParams":
        return replace(
            self,
            lookahead=self.lookahead * factor,
            lookahead_min=self.lookahead_min * factor,
            lookahead_max=self.lookahead_max * factor,
            recovery_threshold=self.recovery_threshold * factor,
            reference_speed=self.reference_speed * factor,
        )

    def lookahead_for(self, speed: float) -> float:
        scaled = self.lookahead * max(speed, 0.0) / self.reference_speed
        return max(self.lookahead_min, min(self.lookahead_max, scaled))
