"""Parametric forward kinematics for a coupled-linkage five-finger hand.

Coordinate conventions (hand base frame, millimetres):
  +Z : finger extension direction (wrist -> fingertip when fully open)
  +Y : finger spread direction (index on +Y, pinky on -Y)
  +X : palm closure direction (non-thumb fingers curl from +Z toward +X)

Every finger is a planar two-link chain whose intermediate joint is rigidly
coupled to the proximal joint:  q_int = clip(offset + b * q_prox, int_range).
The whole hand closure is parameterized by one scalar s in [0, 1] that maps
affinely onto each actuator's control range and joint range.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

FINGERS: Tuple[str, ...] = ("thumb", "index", "middle", "ring", "pinky")
NON_THUMB: Tuple[str, ...] = FINGERS[1:]
REFERENCE_FINGER = "index"

# Active non-thumb fingers per n-finger pinch.
GRASP_FINGER_SETS: Dict[int, Tuple[str, ...]] = {
    2: ("index",),
    3: ("index", "middle"),
    4: ("index", "middle", "ring"),
    5: ("index", "middle", "ring", "pinky"),
}

# Reference width ranges. The 3/4/5-finger minimum is quoted both as 0 mm
# and as 7 mm; both values are kept.
TABLE_WIDTH_RANGE_MM: Dict[int, Tuple[float, float]] = {
    2: (0.0, 110.0), 3: (0.0, 100.0), 4: (0.0, 100.0), 5: (0.0, 100.0),
}
TEXT_PLANE_MIN_WIDTH_MM = 7.0
REFERENCE_TILT_SPAN_DEG = 49.0
REFERENCE_TIP_SHIFT_MM = (7.0, 12.0)  # (vertical, lateral)


class HandModelError(ValueError):
    """Invalid finger id, out-of-range argument, or bad linkage parameters."""


@dataclass(frozen=True)
class FingerParams:
    proximal_length: float
    intermediate_length: float
    coupling_ratio_b: float
    base_position: Tuple[float, float, float]
    base_orientation: float = 0.0
    joint_range: Tuple[float, float] = (0.0, 1.0)
    intermediate_range: Tuple[float, float] = (0.0, 1.5)
    ctrl_range: Tuple[float, float] = (0.0, 1000.0)
    # Constant term of the physical coupling. A negative value is a preload
    # dead band: the intermediate joint rests on its stop until
    # b * q_prox exceeds |offset|. A linearized (through-origin) coupling row
    # ignores it, which is what the QP planner sees.
    coupling_offset: float = 0.0

    def __post_init__(self):
        if self.proximal_length <= 0 or self.intermediate_length <= 0:
            raise HandModelError("link lengths must be positive")
        if self.coupling_ratio_b <= 0:
            raise HandModelError("coupling_ratio_b must be positive")
        if not self.ctrl_range[0] < self.ctrl_range[1]:
            raise HandModelError("ctrl_min must be < ctrl_max")
        if not self.joint_range[0] < self.joint_range[1]:
            raise HandModelError("joint_range must be increasing")


@dataclass(frozen=True)
class ThumbParams(FingerParams):
    yaw_range: Tuple[float, float] = (0.0, 1.3)
    pitch_range: Tuple[float, float] = (-0.3, 0.3)
    line_yaw: float = 0.0      # opposition pose for the 2-finger line pinch
    plane_yaw: float = 0.0     # opposition pose for 3/4/5-finger plane pinches
    opposition_pitch: float = 0.0


@dataclass(frozen=True)
class LinkageParams:
    thumb: ThumbParams
    index: FingerParams
    middle: FingerParams
    ring: FingerParams
    pinky: FingerParams

    def finger(self, name: str) -> FingerParams:
        if name not in FINGERS:
            raise HandModelError(f"unknown finger id {name!r}; expected one of {FINGERS}")
        return getattr(self, name)

    def thumb_yaw(self, n_fingers: int) -> float:
        return self.thumb.line_yaw if n_fingers == 2 else self.thumb.plane_yaw


@dataclass(frozen=True)
class FingertipPose:
    position: np.ndarray  # (3,) mm, hand frame
    tilt: float           # rad, fingertip axis relative to the open finger
    clamped: bool = False  # intermediate joint saturated by its range

    def __post_init__(self):
        if not np.all(np.isfinite(self.position)) or not math.isfinite(self.tilt):
            raise HandModelError("non-finite fingertip pose")


# ---------------------------------------------------------------------------
# Default geometry (tuned offline with scripts/tune_hand.py)
# ---------------------------------------------------------------------------

def default_params() -> LinkageParams:
    """Shipped parameter set reproducing the reference aggregate geometry."""
    return LinkageParams(
        thumb=ThumbParams(
            proximal_length=47.954, intermediate_length=24.125,
            coupling_ratio_b=2.8853, coupling_offset=-1.2,
            base_position=(69.142, -10.0, 2.98), base_orientation=0.581,
            joint_range=(0.0, 0.699), intermediate_range=(0.0, 1.2),
            ctrl_range=(0.0, 1000.0),
            yaw_range=(0.0, 1.3), pitch_range=(-0.3, 0.3),
            line_yaw=0.0, plane_yaw=0.72, opposition_pitch=0.0,
        ),
        index=FingerParams(
            proximal_length=50.0, intermediate_length=30.0,
            coupling_ratio_b=3.7913, coupling_offset=-1.2,
            base_position=(0.0, 22.0, 0.0),
            joint_range=(0.0, 0.43), intermediate_range=(0.0, 1.5),
        ),
        middle=FingerParams(
            proximal_length=53.0, intermediate_length=32.0,
            coupling_ratio_b=3.5588, coupling_offset=-1.2,
            base_position=(0.0, 3.0, 1.0),
            joint_range=(0.0, 0.43), intermediate_range=(0.0, 1.5),
        ),
        ring=FingerParams(
            proximal_length=50.0, intermediate_length=30.0,
            coupling_ratio_b=3.5588, coupling_offset=-1.2,
            base_position=(0.0, -16.0, -3.0),
            joint_range=(0.0, 0.43), intermediate_range=(0.0, 1.5),
        ),
        pinky=FingerParams(
            proximal_length=44.0, intermediate_length=27.0,
            coupling_ratio_b=3.5588, coupling_offset=-1.2,
            base_position=(0.0, -34.0, -9.0),
            joint_range=(0.0, 0.43), intermediate_range=(0.0, 1.5),
        ),
    )


# ---------------------------------------------------------------------------
# Closure scalar and joint mapping
# ---------------------------------------------------------------------------

def _check_s(s: float) -> float:
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise HandModelError(f"closure scalar s={s} outside [0, 1]")
    return s


def ctrl_from_scalar(params: LinkageParams, finger: str, s: float) -> float:
    """ctrl(s) = ctrl_min + s * (ctrl_max - ctrl_min)."""
    lo, hi = params.finger(finger).ctrl_range
    s = _check_s(s)
    if s == 1.0:
        return float(hi)
    return float(lo + s * (hi - lo))


def scalar_from_ctrl(params: LinkageParams, finger: str, ctrl: float) -> float:
    lo, hi = params.finger(finger).ctrl_range
    return float(np.clip((ctrl - lo) / (hi - lo), 0.0, 1.0))


def finger_joints(fp: FingerParams, s: float) -> Tuple[float, float, bool]:
    """(q_prox, q_int, clamped) for closure s."""
    lo, hi = fp.joint_range
    q_prox = lo + s * (hi - lo)
    raw = fp.coupling_offset + fp.coupling_ratio_b * q_prox
    q_int = min(max(raw, fp.intermediate_range[0]), fp.intermediate_range[1])
    return q_prox, q_int, q_int != raw


def chain_frame(fp: FingerParams, yaw: float = 0.0, pitch: float = 0.0,
                thumb: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Unit (extension, curl) directions of a finger's chain plane."""
    a = fp.base_orientation + pitch
    ext = np.array([math.sin(a), 0.0, math.cos(a)])
    if thumb:
        curl = np.array([-math.cos(a), 0.0, math.sin(a)])
    else:
        curl = np.array([math.cos(a), 0.0, -math.sin(a)])
    if yaw:
        cy, sy = math.cos(yaw), math.sin(yaw)
        rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        ext, curl = rz @ ext, rz @ curl
    return ext, curl


def chain_tip(fp: FingerParams, q_prox: float, q_int: float,
              ext: np.ndarray, curl: np.ndarray) -> np.ndarray:
    l1, l2 = fp.proximal_length, fp.intermediate_length
    a = l1 * math.sin(q_prox) + l2 * math.sin(q_prox + q_int)
    b = l1 * math.cos(q_prox) + l2 * math.cos(q_prox + q_int)
    return np.asarray(fp.base_position, dtype=float) + a * curl + b * ext


def fk_fingertip(params: LinkageParams, finger: str, s: float,
                 n_fingers: int = 2) -> FingertipPose:
    """Fingertip pose at closure s.

    The thumb is evaluated at its opposition pose for the given pinch size;
    use :func:`thumb_fk` for arbitrary yaw/pitch.
    """
    s = _check_s(s)
    if finger == "thumb":
        th = params.thumb
        return thumb_fk(params, params.thumb_yaw(n_fingers), th.opposition_pitch, s)
    fp = params.finger(finger)
    q1, q2, clamped = finger_joints(fp, s)
    ext, curl = chain_frame(fp)
    return FingertipPose(chain_tip(fp, q1, q2, ext, curl), q1 + q2, clamped)


def thumb_fk(params: LinkageParams, yaw: float, pitch: float, s: float) -> FingertipPose:
    th = params.thumb
    if not th.yaw_range[0] - 1e-12 <= yaw <= th.yaw_range[1] + 1e-12:
        raise HandModelError(f"thumb yaw {yaw} outside {th.yaw_range}")
    if not th.pitch_range[0] - 1e-12 <= pitch <= th.pitch_range[1] + 1e-12:
        raise HandModelError(f"thumb pitch {pitch} outside {th.pitch_range}")
    s = _check_s(s)
    q1, q2, clamped = finger_joints(th, s)
    ext, curl = chain_frame(th, yaw, pitch, thumb=True)
    return FingertipPose(chain_tip(th, q1, q2, ext, curl), q1 + q2, clamped)


def thumb_reference_pose(params: LinkageParams) -> FingertipPose:
    """Fully open thumb at yaw = pitch = 0."""
    return thumb_fk(params, 0.0, 0.0, 0.0)


def thumb_workspace_bbox(params: LinkageParams, n: int = 9) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounding box of the thumb tip over a yaw x pitch x s grid."""
    th = params.thumb
    pts = [
        thumb_fk(params, y, p, s).position
        for y in np.linspace(*th.yaw_range, n)
        for p in np.linspace(*th.pitch_range, n)
        for s in np.linspace(0.0, 1.0, n)
    ]
    pts = np.array(pts)
    return pts.min(axis=0), pts.max(axis=0)


# ---------------------------------------------------------------------------
# Sweep table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepTable:
    """Fingertip poses sampled on a uniform closure grid.

    ``positions[name]`` has shape (resolution, 3). The thumb is stored twice,
    once per opposition pose: ``thumb`` (line pinch) and ``thumb_plane``.
    """

    s: np.ndarray
    positions: Mapping[str, np.ndarray]
    tilts: Mapping[str, np.ndarray]
    params: LinkageParams = field(repr=False)
    monotone: bool = True

    @property
    def resolution(self) -> int:
        return len(self.s)

    def _interp_index(self, s: float) -> Tuple[int, float]:
        n = len(self.s) - 1
        x = min(max(s, 0.0), 1.0) * n
        i = min(int(x), n - 1)
        return i, x - i

    def tip(self, name: str, s: float) -> np.ndarray:
        """Piecewise-linear interpolated tip position."""
        p = self.positions[name]
        i, t = self._interp_index(s)
        return p[i] + t * (p[i + 1] - p[i])

    def tilt(self, name: str, s: float) -> float:
        a = self.tilts[name]
        i, t = self._interp_index(s)
        return float(a[i] + t * (a[i + 1] - a[i]))

    def rows(self) -> Iterable[Tuple[float, str, float, float, float, float]]:
        for k, s in enumerate(self.s):
            for name in self.positions:
                x, y, z = self.positions[name][k]
                yield float(s), name, float(x), float(y), float(z), float(self.tilts[name][k])

    def to_csv(self, path: Optional[Path] = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "finger_id", "x_mm", "y_mm", "z_mm", "tilt_rad"])
        for row in self.rows():
            w.writerow([f"{row[0]:.6f}", row[1]] + [f"{v:.6f}" for v in row[2:]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def thumb_key(n_fingers: int) -> str:
    return "thumb" if n_fingers == 2 else "thumb_plane"


def xz_norm(v: np.ndarray) -> float:
    return math.hypot(v[0], v[2])


def build_sweep_table(params: LinkageParams, resolution: int = 512,
                      check_monotone: bool = True) -> SweepTable:
    """Sweep every fingertip over s in [0, 1].

    Raises HandModelError if the thumb-to-index XZ distance is not strictly
    decreasing, which signals an unusable parameter set.
    """
    if resolution < 2:
        raise HandModelError("resolution must be >= 2")
    s_grid = np.linspace(0.0, 1.0, resolution)
    positions: Dict[str, np.ndarray] = {}
    tilts: Dict[str, np.ndarray] = {}
    th = params.thumb
    for key, yaw in (("thumb", th.line_yaw), ("thumb_plane", th.plane_yaw)):
        poses = [thumb_fk(params, yaw, th.opposition_pitch, s) for s in s_grid]
        positions[key] = np.array([p.position for p in poses])
        tilts[key] = np.array([p.tilt for p in poses])
    for name in NON_THUMB:
        poses = [fk_fingertip(params, name, s) for s in s_grid]
        positions[name] = np.array([p.position for p in poses])
        tilts[name] = np.array([p.tilt for p in poses])
    d = positions["thumb"] - positions["index"]
    dist = np.hypot(d[:, 0], d[:, 2])
    monotone = bool(np.all(np.diff(dist) < 0))
    if check_monotone and not monotone:
        raise HandModelError("XZ distance D(s) is not strictly decreasing for these parameters")
    return SweepTable(s_grid, positions, tilts, params, monotone)


def xz_distance(table: SweepTable, s: float, pair: Tuple[str, str] = ("thumb", "index")) -> float:
    """D(s) = sqrt(dx^2 + dz^2) between the interpolated tips of a finger pair."""
    _check_s(s)
    return xz_norm(table.tip(pair[0], s) - table.tip(pair[1], s))


# ---------------------------------------------------------------------------
# Aggregate geometry checks
# ---------------------------------------------------------------------------

def tilt_span(table: SweepTable, finger: str = REFERENCE_FINGER) -> float:
    """Total fingertip tilt change over the full closure (rad)."""
    t = table.tilts[finger]
    return float(t[-1] - t[0])


def coplanarity_tilt(d: np.ndarray) -> float:
    return math.atan2(-d[2], d[0])


def pinch_center_shift(table: SweepTable) -> Tuple[float, float]:
    """(vertical, lateral) motion of the pinch centre over the full closure.

    Each pinch centre is expressed in its own coplanar grasp frame (hand
    rotated by the coplanarity tilt about Y), so the numbers are the hand
    translation a naive close-to-width command would miss.
    """
    out = []
    for s in (0.0, 1.0):
        t, c = table.tip("thumb", s), table.tip("index", s)
        theta = coplanarity_tilt(t - c)
        ct, st = math.cos(theta), math.sin(theta)
        m = 0.5 * (t + c)
        out.append(np.array([ct * m[0] - st * m[2], ct * m[2] + st * m[0]]))
    delta = out[1] - out[0]
    return abs(float(delta[1])), abs(float(delta[0]))


# ---------------------------------------------------------------------------
# Flat key-value configuration
# ---------------------------------------------------------------------------

def params_to_text(params: LinkageParams) -> str:
    lines = []
    for name in FINGERS:
        fp = params.finger(name)
        for f in fields(fp):
            v = getattr(fp, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            else:
                v = repr(float(v))
            lines.append(f"{name}.{f.name} = {v}")
    return "\n".join(lines) + "\n"


def params_from_text(text: str, base: Optional[LinkageParams] = None) -> LinkageParams:
    """Parse ``finger.field = value`` lines; missing keys keep ``base`` values."""
    base = base or default_params()
    updates: Dict[str, Dict[str, object]] = {n: {} for n in FINGERS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise HandModelError(f"line {lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        finger, _, attr = key.partition(".")
        fp = base.finger(finger)
        if attr not in {f.name for f in fields(fp)}:
            raise HandModelError(f"line {lineno}: unknown field {key!r}")
        current = getattr(fp, attr)
        try:
            if isinstance(current, tuple):
                updates[finger][attr] = tuple(float(x) for x in value.split(","))
            else:
                updates[finger][attr] = float(value)
        except ValueError as exc:
            raise HandModelError(f"line {lineno}: bad number in {value!r}") from exc
    return LinkageParams(**{n: replace(base.finger(n), **updates[n]) for n in FINGERS})


def load_params(path: Path) -> LinkageParams:
    return params_from_text(Path(path).read_text())
