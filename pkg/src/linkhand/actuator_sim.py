"""Discrete-time model of one finger actuator channel.

Positions follow the hand's native command convention: 1000 is fully open
and closing drives the position down. An obstacle occupies every position
below ``contact_position``; penetration past it produces force through a
linear contact stiffness.

The modelled behaviour is deliberately crude but matches what the hardware
shows: a lumped command latency, constant-velocity motion with no
deceleration before the target, and a force-limit stop that is itself only
applied one latency after the limit is crossed. That last effect is what
makes overshoot grow with speed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

RAW_MIN, RAW_MAX = 0.0, 1000.0


class NoContactError(RuntimeError):
    """The finger never reached the obstacle."""


@dataclass(frozen=True)
class RawCommand:
    position: float
    speed: float
    force_limit: float = RAW_MAX

    def __post_init__(self):
        for name in ("position", "speed", "force_limit"):
            v = getattr(self, name)
            if not RAW_MIN <= v <= RAW_MAX:
                raise ValueError(f"{name}={v} outside [0, 1000]")


@dataclass(frozen=True)
class SimConfig:
    latency: float = 0.066
    tick: float = 1.0 / 163.0
    # Piecewise-linear speed map (raw speed -> raw position units per second).
    # Proportional up to the knee, then a shallower affine segment.
    speed_knots: Tuple[float, ...] = (0.0, 100.0, 1000.0)
    rate_knots: Tuple[float, ...] = (0.0, 1400.0, 2150.0)
    contact_stiffness: float = 3.0
    sensor_noise_sigma: float = 16.0

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        if self.tick <= 0:
            raise ValueError("tick must be > 0")
        if self.contact_stiffness <= 0:
            raise ValueError("contact_stiffness must be > 0")
        if np.any(np.diff(self.rate_knots) <= 0) or np.any(np.diff(self.speed_knots) <= 0):
            raise ValueError("velocity gain must be strictly increasing")

    def velocity_gain(self, speed: float) -> float:
        return float(np.interp(speed, self.speed_knots, self.rate_knots))

    def noiseless(self) -> "SimConfig":
        return replace(self, sensor_noise_sigma=0.0)


@dataclass(frozen=True)
class ContactScene:
    contact_position: float = 0.0
    obstacle_present: bool = False

    def __post_init__(self):
        if not RAW_MIN <= self.contact_position <= RAW_MAX:
            raise ValueError("contact_position outside [0, 1000]")

    def penetration(self, position: float) -> float:
        if not self.obstacle_present:
            return 0.0
        return max(0.0, self.contact_position - position)


FREE_SPACE = ContactScene()


@dataclass(frozen=True)
class ActuatorState:
    time: float = 0.0
    position: float = RAW_MAX
    measured_force: float = 0.0
    true_force: float = 0.0
    pending_commands: Tuple[Tuple[float, RawCommand], ...] = ()
    active_command: Optional[RawCommand] = None
    in_contact: bool = False
    halt_time: Optional[float] = None  # force-limit stop takes effect here

    @property
    def halted(self) -> bool:
        return self.halt_time is not None and self.halt_time <= self.time + 1e-12

    def issue(self, cmd: RawCommand, config: SimConfig) -> "ActuatorState":
        """Queue a command; it becomes active one latency from now."""
        queue = self.pending_commands + ((self.time + config.latency, cmd),)
        return replace(self, pending_commands=tuple(sorted(queue, key=lambda x: x[0])))


def step(state: ActuatorState, scene: ContactScene, config: SimConfig,
         rng: Optional[np.random.Generator] = None) -> ActuatorState:
    """Advance one tick."""
    t0, t1 = state.time, state.time + config.tick
    active, halt = state.active_command, state.halt_time
    pending = list(state.pending_commands)
    while pending and pending[0][0] <= t0 + 1e-12:
        _, cmd = pending.pop(0)
        if cmd != active:
            active, halt = cmd, None

    pos = state.position
    if active is not None:
        rate = config.velocity_gain(active.speed)
        direction = math.copysign(1.0, active.position - pos) if active.position != pos else 0.0
        t_move_end = t1 if halt is None else min(t1, max(halt, t0))
        closing = direction < 0
        # Exact in-tick time at which the contact force reaches the limit.
        if closing and halt is None and scene.obstacle_present and rate > 0:
            pen_limit = active.force_limit / config.contact_stiffness
            pos_limit = scene.contact_position - pen_limit
            if pos > pos_limit and max(active.position, pos - rate * (t1 - t0)) <= pos_limit:
                t_cross = t0 + (pos - pos_limit) / rate
                halt = t_cross + config.latency
                t_move_end = min(t1, halt)
            elif scene.penetration(pos) * config.contact_stiffness >= active.force_limit:
                halt = t0 + config.latency
                t_move_end = min(t1, halt)
        travel = rate * max(0.0, t_move_end - t0)
        if direction > 0:
            pos = min(pos + travel, active.position)
        elif direction < 0:
            pos = max(pos - travel, active.position)
    pos = min(max(pos, RAW_MIN), RAW_MAX)

    true_force = config.contact_stiffness * scene.penetration(pos)
    noise = 0.0
    if config.sensor_noise_sigma > 0 and rng is not None:
        noise = float(rng.normal(0.0, config.sensor_noise_sigma))
    return ActuatorState(
        time=t1, position=pos, measured_force=true_force + noise, true_force=true_force,
        pending_commands=tuple(pending), active_command=active,
        in_contact=true_force > 0, halt_time=halt,
    )


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    time: float
    position: float
    force: float
    true_force: float
    phase: str = ""


def trajectory_csv(samples: Sequence[Sample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_s", "position_raw", "force_raw", "phase"])
    for s in samples:
        w.writerow([f"{s.time:.6f}", f"{s.position:.4f}", f"{s.force:.4f}", s.phase])
    return buf.getvalue()


@dataclass
class StepResponse:
    samples: List[Sample]
    start: float
    target: float
    latency: Optional[float]   # time of first motion
    rise_time: Optional[float]  # 10 % -> 90 % of the step
    settling_time: Optional[float]  # from command issue until inside +-2 %


def run_step_response(target: float, speed: float, config: SimConfig = SimConfig(),
                      start: float = RAW_MAX, duration: float = 2.0,
                      settle_band: float = 0.02) -> StepResponse:
    state = ActuatorState(position=start).issue(RawCommand(target, speed), config)
    samples = [Sample(0.0, start, 0.0, 0.0)]
    n = int(round(duration / config.tick))
    for _ in range(n):
        state = step(state, FREE_SPACE, config)
        samples.append(Sample(state.time, state.position, state.measured_force, state.true_force))
    times = np.array([s.time for s in samples])
    pos = np.array([s.position for s in samples])
    span = target - start
    moved = np.nonzero(np.abs(pos - start) > 1e-9)[0]
    first_motion = float(times[moved[0] - 1]) if moved.size else None
    rise = settle = None
    if span != 0 and moved.size:
        frac = (pos - start) / span
        i10 = np.nonzero(frac >= 0.1)[0]
        i90 = np.nonzero(frac >= 0.9)[0]
        if i10.size and i90.size:
            rise = float(_crossing(times, frac, 0.9) - _crossing(times, frac, 0.1))
        outside = np.nonzero(np.abs(pos - target) > settle_band * abs(span))[0]
        if outside.size and outside[-1] + 1 < len(times):
            settle = float(times[outside[-1] + 1])
    return StepResponse(samples, start, target, first_motion, rise, settle)


def _crossing(times: np.ndarray, frac: np.ndarray, level: float) -> float:
    i = int(np.nonzero(frac >= level)[0][0])
    if i == 0:
        return float(times[0])
    f0, f1 = frac[i - 1], frac[i]
    return float(times[i - 1] + (level - f0) / (f1 - f0) * (times[i] - times[i - 1]))


# ---------------------------------------------------------------------------
# Speed profiles and contact trials
# ---------------------------------------------------------------------------

class SpeedProfile(Protocol):
    def command(self, state: ActuatorState, f_set: float) -> Optional[RawCommand]:
        """Command to issue this tick, or None to leave the queue alone."""


@dataclass
class ConstantSpeed:
    speed: float
    target: float = RAW_MIN
    _sent: bool = field(default=False, repr=False)

    def command(self, state, f_set):
        if self._sent:
            return None
        self._sent = True
        return RawCommand(self.target, self.speed, f_set)

    @property
    def label(self) -> str:
        return str(int(self.speed))


@dataclass
class HybridProfile:
    """Fast approach to ``switch_position``, then slow closure to ``target``."""

    switch_position: float
    v_fast: float = 1000.0
    v_slow: float = 25.0
    target: float = RAW_MIN
    tolerance: float = 2.0
    _stage: int = field(default=0, repr=False)

    def command(self, state, f_set):
        if self._stage == 0:
            self._stage = 1
            return RawCommand(self.switch_position, self.v_fast, f_set)
        if self._stage == 1 and (abs(state.position - self.switch_position) <= self.tolerance
                                 or state.in_contact):
            self._stage = 2
            return RawCommand(self.target, self.v_slow, f_set)
        return None

    @property
    def label(self) -> str:
        return "hybrid"


@dataclass
class ContactTrial:
    samples: List[Sample]
    f_set: float
    overshoot: float          # max measured force - f_set
    completion_time: float    # first time the true contact force reaches f_set
    contact_time: float


def run_contact_trial(profile: SpeedProfile, f_set: float, scene: ContactScene,
                      config: SimConfig = SimConfig(), seed: int = 0,
                      start: float = RAW_MAX, hold: float = 0.5,
                      max_time: float = 20.0) -> ContactTrial:
    """Drive into ``scene`` until the force plateau has been held for ``hold`` s.

    Raises NoContactError when the obstacle is never touched.
    """
    if not 0 < f_set <= RAW_MAX:
        raise ValueError("f_set must be in (0, 1000]")
    if not scene.obstacle_present:
        raise NoContactError("scene has no obstacle")
    rng = np.random.default_rng(seed)
    state = ActuatorState(position=start, true_force=config.contact_stiffness * scene.penetration(start))
    samples: List[Sample] = []
    contact_t = done_t = None
    halted_since = None
    while state.time < max_time:
        cmd = profile.command(state, f_set)
        if cmd is not None:
            state = state.issue(cmd, config)
        state = step(state, scene, config, rng)
        samples.append(Sample(state.time, state.position, state.measured_force, state.true_force,
                              "contact" if state.in_contact else "free"))
        if contact_t is None and state.in_contact:
            contact_t = state.time
        if done_t is None and state.true_force >= f_set - 1e-9:
            done_t = _force_crossing(samples, f_set)
        stopped = state.halted or (state.active_command is not None
                                   and state.position == state.active_command.position
                                   and not state.pending_commands)
        if stopped and contact_t is not None:
            halted_since = halted_since if halted_since is not None else state.time
            if state.time - halted_since >= hold:
                break
        else:
            halted_since = None
    if contact_t is None:
        raise NoContactError(f"no contact within {max_time} s")
    if done_t is None:
        done_t = float("inf")
    peak = max(s.force for s in samples)
    return ContactTrial(samples, f_set, peak - f_set, done_t, contact_t)


def _force_crossing(samples: Sequence[Sample], level: float) -> float:
    last = samples[-1]
    if len(samples) == 1 or samples[-2].true_force >= level:
        return last.time
    prev = samples[-2]
    frac = (level - prev.true_force) / (last.true_force - prev.true_force)
    return prev.time + frac * (last.time - prev.time)


def run_overshoot_trial(profile: SpeedProfile, f_set: float, scene: ContactScene,
                        config: SimConfig = SimConfig(), seed: int = 0) -> float:
    return run_contact_trial(profile, f_set, scene, config, seed).overshoot


def run_completion_timing(profile: SpeedProfile, f_set: float, scene: ContactScene,
                          config: SimConfig = SimConfig(), seed: int = 0) -> float:
    return run_contact_trial(profile, f_set, scene, config, seed).completion_time


def make_profile(spec, switch_position: Optional[float] = None) -> SpeedProfile:
    """``spec`` is a raw speed or the string ``"hybrid"``."""
    if spec == "hybrid":
        if switch_position is None:
            raise ValueError("hybrid profile needs a switch position")
        return HybridProfile(switch_position)
    return ConstantSpeed(float(spec))


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

CHARACTERIZATION_SPEEDS = (25, 50, 100, 250, 500, 750, 1000)
CHARACTERIZATION_SETPOINTS = (100, 250, 500, 750, 1000)
CUBE_CONTACT_POSITION = 600.0
SWITCH_MARGIN = 25.0


@dataclass(frozen=True)
class BatchSummary:
    speed: str
    f_set: float
    mean: float
    variance: float
    n: int

    def to_json_dict(self) -> dict:
        return {"speed": self.speed, "F_set": self.f_set, "mean": self.mean,
                "variance": self.variance, "N": self.n}


def characterize(kind: str, speeds: Sequence = CHARACTERIZATION_SPEEDS + ("hybrid",),
                 setpoints: Sequence[float] = CHARACTERIZATION_SETPOINTS, trials: int = 20,
                 config: SimConfig = SimConfig(), seed: int = 0,
                 contact_position: float = CUBE_CONTACT_POSITION) -> List[BatchSummary]:
    """Overshoot (``kind='overshoot'``) or completion time (``'timing'``) grid."""
    scene = ContactScene(contact_position, True)
    out = []
    for speed in speeds:
        for f_set in setpoints:
            vals = []
            for k in range(trials):
                prof = make_profile(speed, contact_position + SWITCH_MARGIN)
                trial = run_contact_trial(prof, f_set, scene, config, seed=seed * 100003 + k)
                vals.append(trial.overshoot if kind == "overshoot" else trial.completion_time)
            arr = np.array(vals)
            out.append(BatchSummary(str(speed), float(f_set), float(arr.mean()),
                                    float(arr.var()), trials))
    return out


def summaries_json(rows: Sequence[BatchSummary]) -> str:
    return json.dumps([r.to_json_dict() for r in rows], indent=2) + "\n"
