"""Hybrid speed-force grasp policy and spike-then-drop release detection."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .actuator_sim import (
    RAW_MAX, RAW_MIN, ActuatorState, ContactScene, RawCommand, SimConfig, step,
)
from .calibration import CalibrationModel, newtons_to_raw, raw_to_newtons

SIGMA_ONSET = 7.5            # contact-onset std at v=1000, command units
FINGER_SIGMA_N = 0.12
WRIST_SIGMA_N = 1.1


class Phase(enum.IntEnum):
    FAST_APPROACH = 0
    SLOW_CONTACT = 1
    HOLD = 2
    RELEASED = 3


@dataclass(frozen=True)
class HybridPolicy:
    force_target: float          # Newtons
    v_fast: float = 1000.0
    v_slow: float = 25.0
    switch_margin: float = 25.0
    reach_tolerance: float = 2.0
    closed_position: float = RAW_MIN

    def __post_init__(self):
        if not self.v_slow <= 25 <= self.v_fast:
            raise ValueError("need v_slow <= 25 <= v_fast")
        if self.switch_margin <= 0:
            raise ValueError("switch_margin must be positive")


def switch_point(q_goal: float, margin: float = 25.0) -> Tuple[float, bool]:
    """q_sw = q_g + margin, clamped to the command range. Returns (q_sw, clamped)."""
    q = q_goal + margin
    if q > RAW_MAX:
        return RAW_MAX, True
    if q < RAW_MIN:
        return RAW_MIN, True
    return q, False


def margin_in_sigmas(margin: float = 25.0, sigma_onset: float = SIGMA_ONSET) -> float:
    return margin / sigma_onset


def tick(phase: Phase, policy: HybridPolicy, q_goal: float, sensed_position: float,
         sensed_force_n: float, model: Optional[CalibrationModel]) -> Tuple[Optional[RawCommand], Phase]:
    """One controller update. Returns (command or None, next phase).

    FastApproach drives to the switch point at v_fast; once there the slow
    closure is commanded with the calibrated force limit; reaching the force
    target holds position. Phases never regress.
    """
    if model is None:
        raise ValueError("calibration model required")
    limit = float(newtons_to_raw(model, policy.force_target).value)
    q_sw, _ = switch_point(q_goal, policy.switch_margin)
    if phase == Phase.FAST_APPROACH:
        if sensed_position - q_sw <= policy.reach_tolerance or sensed_force_n >= policy.force_target:
            phase = Phase.SLOW_CONTACT
        else:
            return RawCommand(q_sw, policy.v_fast, limit), phase
    if phase == Phase.SLOW_CONTACT:
        if sensed_force_n >= policy.force_target:
            return None, Phase.HOLD
        return RawCommand(policy.closed_position, policy.v_slow, limit), phase
    return None, phase


@dataclass
class ClosedLoopRun:
    times: np.ndarray
    phases: List[Phase]
    commands: List[Optional[RawCommand]]
    force_n: np.ndarray
    positions: np.ndarray
    completion_time: float

    @property
    def peak_force_n(self) -> float:
        return float(self.force_n.max())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_s", "phase", "cmd_pos", "cmd_speed", "sensed_force_n"])
        last = None
        for t, ph, cmd, f in zip(self.times, self.phases, self.commands, self.force_n):
            last = cmd or last
            w.writerow([f"{t:.6f}", ph.name, "" if last is None else f"{last.position:.1f}",
                        "" if last is None else f"{last.speed:.1f}", f"{f:.5f}"])
        return buf.getvalue()


@dataclass(frozen=True)
class HoldRegulator:
    """Slow proportional position correction applied while holding.

    Every ``period`` seconds the mean sensed force over that window is
    compared with the target; outside the dead band the finger is nudged
    open (or closed) by gain * error / contact stiffness raw units.
    """

    period: float = 0.1
    gain: float = 0.6
    dead_band: float = 0.05    # fraction of the raw force target
    speed: float = 25.0


def run_closed_loop(policy: HybridPolicy, q_goal: float, scene: ContactScene,
                    model: CalibrationModel, config: SimConfig = SimConfig(), seed: int = 0,
                    start: float = RAW_MAX, hold: float = 0.5, max_time: float = 20.0,
                    constant_speed: Optional[float] = None,
                    regulator: Optional[HoldRegulator] = None,
                    rng: Optional[np.random.Generator] = None) -> ClosedLoopRun:
    """Run the policy (or a constant-speed baseline) against the actuator model.

    The controller reads the sensors every tick; its commands reach the
    actuator one latency later. The run ends ``hold`` seconds after the
    sensed force first reaches the target, or at ``max_time``.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    state = ActuatorState(position=start)
    phase = Phase.FAST_APPROACH
    last_cmd: Optional[RawCommand] = None
    times, phases, cmds, forces, positions = [], [], [], [], []
    limit = float(newtons_to_raw(model, policy.force_target).value)
    done_t = float("inf")
    hold_start: Optional[float] = None
    window: List[float] = []
    next_reg = 0.0

    def sensed_n(st):
        return raw_to_newtons(model, st.measured_force).value if st.in_contact else 0.0

    while state.time < max_time:
        f_n = sensed_n(state)
        cmd: Optional[RawCommand]
        if constant_speed is not None:
            cmd = None if phase == Phase.HOLD else RawCommand(policy.closed_position, constant_speed, limit)
            if phase == Phase.FAST_APPROACH and state.in_contact:
                phase = Phase.SLOW_CONTACT
            if f_n >= policy.force_target:
                phase = Phase.HOLD
        else:
            cmd, phase = tick(phase, policy, q_goal, state.position, f_n, model)
        if phase == Phase.HOLD and hold_start is None:
            hold_start = state.time
            next_reg = state.time + (regulator.period if regulator else 0.0)
        if phase == Phase.HOLD and regulator is not None:
            window.append(state.measured_force if state.in_contact else 0.0)
            if state.time >= next_reg:
                err = float(np.mean(window)) - limit
                window.clear()
                next_reg = state.time + regulator.period
                if abs(err) > regulator.dead_band * limit:
                    target = state.position + regulator.gain * err / config.contact_stiffness
                    target = float(min(max(target, RAW_MIN), RAW_MAX))
                    cmd = RawCommand(target, regulator.speed, limit)
        if cmd is not None and cmd != last_cmd:
            state = state.issue(cmd, config)
            last_cmd = cmd
        else:
            cmd = None
        state = step(state, scene, config, rng)
        if done_t == float("inf") and state.true_force > 0 and \
                raw_to_newtons(model, state.true_force).value >= policy.force_target:
            done_t = state.time
        times.append(state.time)
        phases.append(phase)
        cmds.append(cmd)
        forces.append(sensed_n(state))
        positions.append(state.position)
        if hold_start is not None and state.time - hold_start >= hold:
            break
    return ClosedLoopRun(np.array(times), phases, cmds, np.array(forces), np.array(positions), done_t)


# ---------------------------------------------------------------------------
# Release detection
# ---------------------------------------------------------------------------

class DetectorState(enum.IntEnum):
    ARMED = 0
    SPIKE_SEEN = 1
    TRIGGERED = 2


@dataclass(frozen=True)
class ReleaseDetector:
    baseline: float
    sigma: float
    k: float = 10.0
    state: DetectorState = DetectorState.ARMED
    drop_mode: str = "threshold"   # or "from_peak"
    peak: float = float("-inf")

    def __post_init__(self):
        if self.sigma <= 0 or self.k <= 0:
            raise ValueError("sigma and k must be positive")
        if self.drop_mode not in ("threshold", "from_peak"):
            raise ValueError(f"unknown drop_mode {self.drop_mode!r}")

    @property
    def threshold(self) -> float:
        return self.baseline + self.k * self.sigma


def release_step(det: ReleaseDetector, force_n: float, t: float = 0.0) -> Tuple[ReleaseDetector, bool]:
    """Advance the spike-then-drop detector by one sample."""
    if det.state == DetectorState.ARMED:
        if force_n > det.threshold:
            return replace(det, state=DetectorState.SPIKE_SEEN, peak=force_n), False
        return det, False
    if det.state == DetectorState.SPIKE_SEEN:
        peak = max(det.peak, force_n)
        if det.drop_mode == "threshold":
            dropped = force_n < det.threshold
        else:
            dropped = force_n < peak - det.k * det.sigma
        if dropped:
            return replace(det, state=DetectorState.TRIGGERED, peak=peak), True
        return replace(det, peak=peak), False
    return det, False


def estimate_baseline(t: np.ndarray, force: np.ndarray, window: float = 0.5) -> float:
    mask = t - t[0] < window
    return float(np.mean(force[mask]))


def first_trigger(t: np.ndarray, force: np.ndarray, sigma: float, k: float,
                  baseline: Optional[float] = None, drop_mode: str = "threshold") -> Optional[float]:
    """Time of the (single) release trigger on a trace, or None."""
    if baseline is None:
        baseline = estimate_baseline(t, force)
    det = ReleaseDetector(baseline, sigma, k, drop_mode=drop_mode)
    for ti, fi in zip(t, force):
        det, fired = release_step(det, float(fi), float(ti))
        if fired:
            return float(ti)
    return None


@dataclass(frozen=True)
class ReleaseTrace:
    """Clean (noise-free) force trace with the true spike window marked."""

    t: np.ndarray
    force: np.ndarray
    spike_start: Optional[float]   # None for flat traces
    spike_end: Optional[float]


def synthetic_release_traces(n: int, seed: int = 0, dt: float = 1 / 163, duration: float = 6.0,
                             baseline: float = 2.0, spike_amplitude: float = 2.5,
                             fluctuation: float = 0.6, flat_fraction: float = 0.0) -> List[ReleaseTrace]:
    """Hold -> insertion-fluctuation -> wall-contact spike -> retract-drop traces.

    Fluctuations stay below 10 finger sigmas but routinely exceed 3 sigmas,
    which is the regime where a low threshold releases early.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, duration, dt)
    out = []
    for _ in range(n):
        bumps = np.zeros_like(t)
        for _ in range(rng.integers(2, 5)):
            c = rng.uniform(1.0, 3.5)
            w = rng.uniform(0.05, 0.25)
            bumps += rng.uniform(0.5, 1.0) * np.exp(-0.5 * ((t - c) / w) ** 2)
        # overlapping bumps are rescaled so the insertion disturbance peaks
        # between 2/3 and all of `fluctuation`
        f = baseline + bumps * (rng.uniform(2 / 3, 1.0) * fluctuation / bumps.max())
        flat = rng.random() < flat_fraction
        if flat:
            out.append(ReleaseTrace(t, f, None, None))
            continue
        s0 = rng.uniform(3.8, 4.4)
        s1 = s0 + rng.uniform(0.2, 0.5)
        rise = np.clip((t - s0) / 0.05, 0, 1) * np.clip((s1 - t) / 0.05, 0, 1)
        f += spike_amplitude * rise
        f -= np.where(t > s1, rng.uniform(0.5, 1.5), 0.0)   # arm retracts, load drops
        out.append(ReleaseTrace(t, f, s0, s1))
    return out


@dataclass(frozen=True)
class TriggerStats:
    correct: int
    premature: int
    missed: int
    trigger_times: Tuple[Optional[float], ...]

    @property
    def n(self) -> int:
        return self.correct + self.premature + self.missed


def _classify(trace: ReleaseTrace, trig: Optional[float], slack: float) -> str:
    if trace.spike_start is None:
        return "premature" if trig is not None else "correct"
    if trig is None:
        return "missed"
    if trig < trace.spike_start:
        return "premature"
    if trig > trace.spike_end + slack:
        return "missed"
    return "correct"


def compare_release_modalities(traces: Sequence[ReleaseTrace], finger_sigma: float = FINGER_SIGMA_N,
                               wrist_sigma: float = WRIST_SIGMA_N, k: float = 10.0, seed: int = 0,
                               add_noise: bool = True, slack: float = 0.5) -> Dict[str, TriggerStats]:
    """Trigger statistics for finger- and wrist-level noise on shared traces.

    Each modality sees the same clean force plus its own Gaussian noise and
    thresholds at baseline + k * sigma_modality.
    """
    if not traces:
        return {}
    n = len(traces[0].t)
    if any(len(tr.t) != n or len(tr.force) != n for tr in traces):
        raise ValueError("traces must share a time base")
    out = {}
    for name, sigma in (("finger", finger_sigma), ("wrist", wrist_sigma)):
        rng = np.random.default_rng([seed, 0 if name == "finger" else 1])
        counts = {"correct": 0, "premature": 0, "missed": 0}
        times = []
        for tr in traces:
            f = tr.force + (rng.normal(0.0, sigma, n) if add_noise else 0.0)
            trig = first_trigger(tr.t, f, sigma, k)
            counts[_classify(tr, trig, slack)] += 1
            times.append(trig)
        out[name] = TriggerStats(counts["correct"], counts["premature"], counts["missed"], tuple(times))
    return out
