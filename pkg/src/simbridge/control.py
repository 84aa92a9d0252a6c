"""Ackermann-to-actuator translation: longitudinal PID with a clamped
integral, throttle/brake arbitration with a coast deadband, and a
piecewise-linear tire-angle-to-steer lookup.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from .messages import AckermannCommand, VehicleControl


@dataclass(frozen=True)
class PidState:
    """Gains plus runtime state of the discrete PID. Immutable; pid_step
    returns the successor state."""

    kp: float
    ki: float
    kd: float
    integral_limit: float
    integral: float = 0.0
    prev_error: float = 0.0


# Gains validated in closed loop against the mock vehicle at 8.33 m/s.
# The integral limit must satisfy ki * limit > drag * v_target / a_max
# (steady-state throttle demand), otherwise the integrator cannot hold the
# setpoint; 3.0 leaves margin where 2.0 would pin ~2.7% low.
TUNED_PROFILE = PidState(kp=0.35, ki=0.10, kd=0.01, integral_limit=3.0)

# Low-gain profile kept as the out-of-the-box reference: pure proportional,
# which on the mock vehicle settles around 5 m/s against an 8.33 m/s target.
DEFAULT_PROFILE = PidState(kp=0.05, ki=0.0, kd=0.0, integral_limit=3.0)

PID_PROFILES = {"tuned": TUNED_PROFILE, "default": DEFAULT_PROFILE}

DEFAULT_DEADBAND = 0.01


def pid_step(state: PidState, target: float, current: float, dt: float) -> Tuple[PidState, float]:
    """One discrete PID update. Output is clamped to [-1, 1]; the integral
    is clamped to +/- integral_limit before it enters the output."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    error = target - current
    integral = state.integral + error * dt
    integral = max(-state.integral_limit, min(state.integral_limit, integral))
    derivative = (error - state.prev_error) / dt
    u = state.kp * error + state.ki * integral + state.kd * derivative
    u = max(-1.0, min(1.0, u))
    return replace(state, integral=integral, prev_error=error), u


def arbitrate(u: float, deadband: float = DEFAULT_DEADBAND) -> Tuple[float, float]:
    """Split a signed effort into (throttle, brake). Inside the deadband the
    vehicle coasts; outside, exactly one of the two engages."""
    if abs(u) < deadband:
        return 0.0, 0.0
    if u > 0:
        return min(u, 1.0), 0.0
    return 0.0, min(-u, 1.0)


class SteerMapError(ValueError):
    pass


@dataclass(frozen=True)
class SteerMap:
    """Odd-symmetric piecewise-linear map from tire angle (rad) to the
    normalized steer actuator.

    The table must be strictly increasing, symmetric about the origin, and
    pin +/- max_tire_angle to +/- 1. Evaluation mirrors the non-negative
    half, so map(-a) == -map(a) holds bit-exactly.
    """

    max_tire_angle: float
    table: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        errs = []
        if self.max_tire_angle <= 0:
            errs.append(f"max_tire_angle must be positive, got {self.max_tire_angle}")
        angles = [a for a, _ in self.table]
        steers = [s for _, s in self.table]
        if len(self.table) < 2:
            errs.append("table needs at least two points")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            errs.append("table angles must be strictly increasing")
        if any(b <= a for a, b in zip(steers, steers[1:])):
            errs.append("table steers must be strictly increasing")
        if any(not (-1.0 <= s <= 1.0) for s in steers):
            errs.append("steer values must stay within [-1, 1]")
        pairs = set(self.table)
        if any((-a, -s) not in pairs for a, s in self.table):
            errs.append("table must be odd-symmetric: every (a, s) needs its (-a, -s) twin")
        if self.table and (angles[0], steers[0]) != (-self.max_tire_angle, -1.0):
            errs.append(f"table must start at (-max_tire_angle, -1), got ({angles[0]}, {steers[0]})")
        if self.table and (angles[-1], steers[-1]) != (self.max_tire_angle, 1.0):
            errs.append(f"table must end at (max_tire_angle, 1), got ({angles[-1]}, {steers[-1]})")
        if errs:
            raise SteerMapError("; ".join(errs))
        # Non-negative half with an explicit origin; exact for odd tables.
        pos = [(a, s) for a, s in self.table if a > 0]
        xs = np.array([0.0] + [a for a, _ in pos])
        ys = np.array([0.0] + [s for _, s in pos])
        object.__setattr__(self, "_pos_angles", xs)
        object.__setattr__(self, "_pos_steers", ys)

    @classmethod
    def linear(cls, max_tire_angle: float) -> "SteerMap":
        """The default two-point table: straight proportional scaling."""
        return cls(max_tire_angle, ((-max_tire_angle, -1.0), (max_tire_angle, 1.0)))


def map_tire_angle(m: SteerMap, angle: float) -> float:
    """Interpolate the table; angles beyond +/- max_tire_angle clamp to +/- 1."""
    mag = float(np.interp(abs(angle), m._pos_angles, m._pos_steers))
    return math.copysign(mag, angle)


def ackermann_to_control(
    cmd: AckermannCommand,
    pid_state: PidState,
    steer_map: SteerMap,
    current_speed: float,
    dt: float,
    *,
    deadband: float = DEFAULT_DEADBAND,
    feedforward_gain: float = 0.0,
) -> Tuple[PidState, VehicleControl]:
    """Translate one Ackermann command into a normalized actuator command.

    Longitudinal: PID on speed error plus an optional acceleration
    feed-forward, then throttle/brake arbitration. Lateral: the command's
    tire angle is counterclockwise-positive while the simulator's steer
    axis is clockwise-positive, so the angular handedness flip applies
    before the table lookup.
    """
    pid_state, u = pid_step(pid_state, cmd.target_speed, current_speed, dt)
    u = max(-1.0, min(1.0, u + feedforward_gain * cmd.target_accel))
    throttle, brake = arbitrate(u, deadband)
    steer = map_tire_angle(steer_map, -cmd.tire_angle)
    return pid_state, VehicleControl(step=cmd.step, throttle=throttle, brake=brake, steer=steer)
