"""Width-to-grasp solving for n-finger pinches.

Two solvers share one set of fingertip targets:

* the analytic solver root-finds the closure scalar on the precomputed
  sweep table and tilts the hand so the pinch lies in a horizontal plane;
* the QP solver runs damped differential IK from the open hand toward the
  analytic targets, with the intermediate joints tied to the proximal ones
  by a linearized (through-origin) coupling.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .hand_model import (
    GRASP_FINGER_SETS, LinkageParams, SweepTable, chain_frame, chain_tip, ctrl_from_scalar,
    finger_joints, thumb_key,
)


class PlannerError(ValueError):
    """Unreachable width, bad finger count or a degenerate geometry."""


class Strategy(enum.Enum):
    NAIVE = "naive"
    REFLEX = "reflex"
    ITERATIVE = "iterative"


class Solver(enum.Enum):
    ANALYTIC = "analytic"
    QP = "qp"


# ---------------------------------------------------------------------------
# Scalar helpers
# ---------------------------------------------------------------------------

def tilt_from_d(d: Sequence[float]) -> float:
    """Hand tilt about Y that brings the thumb-to-contact vector into the XY plane."""
    dx, dz = float(d[0]), float(d[2])
    if dx == 0.0 and dz == 0.0:
        raise PlannerError("degenerate contact vector: d_x = d_z = 0")
    return math.atan2(-dz, dx)


def brent_root(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-12,
               max_iter: int = 200) -> float:
    """Bracketed root of a continuous scalar function.

    Classic Brent: inverse quadratic interpolation or secant steps, falling
    back to bisection whenever the interpolated step is not trustworthy.
    Never evaluates outside [lo, hi].
    """
    a, b = float(lo), float(hi)
    fa, fb = f(a), f(b)
    if fa == 0.0:
        return a
    if fb == 0.0:
        return b
    if fa * fb > 0:
        raise PlannerError(f"no sign change on [{lo}, {hi}]: f={fa:.6g}, {fb:.6g}")
    c, fc = a, fa
    d = e = b - a
    for _ in range(max_iter):
        if fb * fc > 0:
            c, fc = a, fa
            d = e = b - a
        if abs(fc) < abs(fb):
            a, b, c = b, c, b
            fa, fb, fc = fb, fc, fb
        tol1 = 2.0 * np.finfo(float).eps * abs(b) + 0.5 * tol
        xm = 0.5 * (c - b)
        if abs(xm) <= tol1 or fb == 0.0:
            return b
        if abs(e) >= tol1 and abs(fa) > abs(fb):
            s = fb / fa
            if a == c:
                p, q = 2.0 * xm * s, 1.0 - s
            else:
                q, r = fa / fc, fb / fc
                p = s * (2.0 * xm * q * (q - r) - (b - a) * (r - 1.0))
                q = (q - 1.0) * (r - 1.0) * (s - 1.0)
            if p > 0:
                q = -q
            p = abs(p)
            if 2.0 * p < min(3.0 * xm * q - abs(tol1 * q), abs(e * q)):
                e, d = d, p / q
            else:
                d = e = xm
        else:
            d = e = xm
        a, fa = b, fb
        b += d if abs(d) > tol1 else math.copysign(tol1, xm)
        fb = f(b)
    return b


def _first_crossing(values: np.ndarray, target: float) -> Optional[int]:
    """Index i of the first grid cell [i, i+1] where values - target changes sign."""
    g = values - target
    hit = np.nonzero(g == 0.0)[0]
    sign = np.nonzero(g[:-1] * g[1:] < 0)[0]
    cands = [int(x) for x in (hit[:1].tolist() + sign[:1].tolist())]
    if not cands:
        return None
    return min(cands)


def _root_on_grid(table: SweepTable, values: np.ndarray, fn: Callable[[float], float],
                  target: float) -> Optional[float]:
    """Smallest s with fn(s) = target, located on the grid then refined by Brent."""
    i = _first_crossing(values, target)
    if i is None:
        return None
    if values[i] == target:
        return float(table.s[i])
    return brent_root(lambda s: fn(s) - target, float(table.s[i]), float(table.s[i + 1]))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraspSpec:
    width: float                 # mm
    n_fingers: int = 2
    force_target: float = 2.0    # N
    strategy: Strategy = Strategy.REFLEX

    def __post_init__(self):
        if self.n_fingers not in GRASP_FINGER_SETS:
            raise PlannerError(f"n_fingers must be in 2..5, got {self.n_fingers}")
        if not math.isfinite(self.width) or self.width < 0:
            raise PlannerError(f"width must be a non-negative number, got {self.width}")


@dataclass(frozen=True)
class QPSettings:
    tip_tolerance: float = 5e-4      # m
    max_iterations: int = 1000
    step_limit: float = 0.05         # rad per iteration, per joint
    damping: float = 1e-6            # Tikhonov term on the normal equations
    min_step: float = 1e-10          # rad; smaller updates count as converged

    def __post_init__(self):
        if self.tip_tolerance <= 0:
            raise PlannerError("tip_tolerance must be positive")
        if self.max_iterations < 1:
            raise PlannerError("max_iterations must be >= 1")
        if self.step_limit <= 0 or self.damping < 0:
            raise PlannerError("step_limit must be positive and damping non-negative")


@dataclass
class GraspSolution:
    width: float
    n_fingers: int
    s_star: float
    thumb_s: float
    theta_star: float
    thumb_ctrls: Tuple[float, float, float]      # (yaw, pitch, bend) raw
    finger_ctrls: Dict[str, float]
    z_span: float
    tip_error: float
    solver: Solver
    iterations: int = 0
    tips: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    targets: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    joints: Dict[str, Tuple[float, float]] = field(default_factory=dict, repr=False)
    flags: Tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        ctrls = {"thumb_yaw": self.thumb_ctrls[0], "thumb_pitch": self.thumb_ctrls[1],
                 "thumb_bend": self.thumb_ctrls[2]}
        ctrls.update(self.finger_ctrls)
        return {
            "W_mm": self.width, "n": self.n_fingers, "s_star": self.s_star,
            "theta_star_rad": self.theta_star, "ctrls": ctrls, "z_span_mm": self.z_span,
            "tip_error_mm": self.tip_error, "solver": self.solver.value,
            "iterations": self.iterations,
        }


def active_fingers(n_fingers: int) -> Tuple[str, ...]:
    return GRASP_FINGER_SETS[n_fingers]


def _thumb_ctrls(params: LinkageParams, n_fingers: int, thumb_s: float) -> Tuple[float, float, float]:
    th = params.thumb

    def to_raw(v, rng):
        lo, hi = th.ctrl_range
        return float(lo + (v - rng[0]) / (rng[1] - rng[0]) * (hi - lo))

    return (to_raw(params.thumb_yaw(n_fingers), th.yaw_range),
            to_raw(th.opposition_pitch, th.pitch_range),
            ctrl_from_scalar(params, "thumb", thumb_s))


# ---------------------------------------------------------------------------
# Quality metrics
# ---------------------------------------------------------------------------

def grasp_plane_heights(tips: Mapping[str, np.ndarray], theta: float) -> Dict[str, float]:
    """Height of each tip in the hand frame rotated by the grasp tilt about Y."""
    ct, st = math.cos(theta), math.sin(theta)
    return {k: ct * float(p[2]) + st * float(p[0]) for k, p in tips.items()}


def z_span_of(tips: Mapping[str, np.ndarray], theta: float) -> float:
    """Mean |height deviation| of the tips from the thumb/index grasp plane."""
    h = grasp_plane_heights(tips, theta)
    ref = 0.5 * (h["thumb"] + h["index"])
    return float(np.mean([abs(v - ref) for v in h.values()]))


def tip_error_of(tips: Mapping[str, np.ndarray], targets: Mapping[str, np.ndarray]) -> float:
    return float(np.mean([np.linalg.norm(tips[k] - targets[k]) for k in targets]))


def grasp_quality(solution: GraspSolution, table: SweepTable) -> Tuple[float, float]:
    """Recompute (z_span, tip_error) in mm from the solution's configuration."""
    params = table.params
    targets = analytic_tips(table, solution.n_fingers, solution.s_star, solution.thumb_s)
    if solution.solver is Solver.ANALYTIC:
        tips = targets
    else:
        tips = joint_tips(params, solution.n_fingers, solution.joints)
    return z_span_of(tips, solution.theta_star), tip_error_of(tips, targets)


# ---------------------------------------------------------------------------
# Analytic solver
# ---------------------------------------------------------------------------

def _xz_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.hypot(d[..., 0], d[..., 2])


def analytic_tips(table: SweepTable, n_fingers: int, s_star: float, thumb_s: float) -> Dict[str, np.ndarray]:
    tips = {"thumb": table.tip(thumb_key(n_fingers), thumb_s)}
    for f in active_fingers(n_fingers):
        tips[f] = table.tip(f, s_star)
    return tips


def _centroid(table: SweepTable, n_fingers: int, s: float) -> np.ndarray:
    return np.mean([table.tip(f, s) for f in active_fingers(n_fingers)], axis=0)


def _reference_widths(table: SweepTable, n_fingers: int) -> np.ndarray:
    return _xz_dist(table.positions[thumb_key(n_fingers)], table.positions["index"])


_RANGE_CACHE: Dict[Tuple[int, int], Tuple[object, Tuple[float, float]]] = {}


def reachable_range(table: SweepTable, n_fingers: int) -> Tuple[float, float]:
    """(min, max) width in mm over which the solver succeeds.

    Two fingers: the endpoints of D(s). More fingers: widths D_ref(s) for
    which the thumb can also span that width to the shared finger centroid.
    """
    if n_fingers not in GRASP_FINGER_SETS:
        raise PlannerError(f"n_fingers must be in 2..5, got {n_fingers}")
    key = (id(table), n_fingers)
    hit = _RANGE_CACHE.get(key)
    if hit is not None and hit[0] is table:
        return hit[1]
    widths = _reference_widths(table, n_fingers)
    if n_fingers == 2:
        rng = (float(widths.min()), float(widths.max()))
    else:
        pos = table.positions
        cents = np.mean([pos[f] for f in active_fingers(n_fingers)], axis=0)      # (S, 3)
        thumb = pos[thumb_key(n_fingers)]                                          # (S, 3)
        dist = _xz_dist(thumb[None, :, :], cents[:, None, :])                     # (S, S_T)
        ok = (dist.min(axis=1) <= widths) & (widths <= dist.max(axis=1))
        if not ok.any():
            raise PlannerError(f"no reachable width for {n_fingers} fingers")
        rng = (float(widths[ok].min()), float(widths[ok].max()))
    _RANGE_CACHE[key] = (table, rng)
    return rng


def _out_of_range(table: SweepTable, spec: GraspSpec) -> PlannerError:
    lo, hi = reachable_range(table, spec.n_fingers)
    return PlannerError(f"width {spec.width:.3f} mm outside reachable range "
                        f"[{lo:.3f}, {hi:.3f}] mm for {spec.n_fingers} fingers")


def solve_width_analytic(table: SweepTable, spec: GraspSpec) -> GraspSolution:
    """Closure scalar by root finding on D(s) = W, then the coplanarity tilt.

    All non-thumb fingers share the index solution s*. For three or more
    fingers the thumb is solved on its own so that it spans W to the
    centroid of the active fingertips.
    """
    n = spec.n_fingers
    W = spec.width
    tkey = thumb_key(n)
    widths = _reference_widths(table, n)
    s_star = _root_on_grid(table, widths, lambda s: float(_xz_dist(table.tip(tkey, s), table.tip("index", s))), W)
    if s_star is None:
        raise _out_of_range(table, spec)
    if n == 2:
        thumb_s = s_star
        contact = table.tip("index", s_star)
    else:
        contact = _centroid(table, n, s_star)
        tdist = _xz_dist(table.positions[tkey], contact)
        thumb_s = _root_on_grid(table, tdist, lambda s: float(_xz_dist(table.tip(tkey, s), contact)), W)
        if thumb_s is None:
            raise _out_of_range(table, spec)
    thumb = table.tip(tkey, thumb_s)
    theta = tilt_from_d(thumb - contact) if W > 0 else 0.0
    tips = {"thumb": thumb}
    for f in active_fingers(n):
        tips[f] = table.tip(f, s_star)
    params = table.params
    return GraspSolution(
        width=W, n_fingers=n, s_star=float(s_star), thumb_s=float(thumb_s), theta_star=theta,
        thumb_ctrls=_thumb_ctrls(params, n, thumb_s),
        finger_ctrls={f: ctrl_from_scalar(params, f, s_star) for f in active_fingers(n)},
        z_span=z_span_of(tips, theta), tip_error=0.0, solver=Solver.ANALYTIC,
        tips=tips, targets=dict(tips),
        joints=_analytic_joints(params, n, s_star, thumb_s),
    )


def _analytic_joints(params: LinkageParams, n: int, s_star: float, thumb_s: float) -> Dict[str, Tuple[float, float]]:
    out = {"thumb": finger_joints(params.thumb, thumb_s)[:2]}
    for f in active_fingers(n):
        out[f] = finger_joints(params.finger(f), s_star)[:2]
    return out


# ---------------------------------------------------------------------------
# Differential-IK (QP) solver
# ---------------------------------------------------------------------------

def _frames(params: LinkageParams, n: int) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    th = params.thumb
    out = {"thumb": chain_frame(th, params.thumb_yaw(n), th.opposition_pitch, thumb=True)}
    for f in active_fingers(n):
        out[f] = chain_frame(params.finger(f))
    return out


def joint_tips(params: LinkageParams, n: int, joints: Mapping[str, Tuple[float, float]]) -> Dict[str, np.ndarray]:
    frames = _frames(params, n)
    return {k: chain_tip(params.finger(k), q[0], q[1], *frames[k]) for k, q in joints.items()}


def _tip_jacobian(fp, q1: float, b: float, ext: np.ndarray, curl: np.ndarray) -> np.ndarray:
    """d tip / d q_prox along the linearized coupling q_int = b * q_prox."""
    l1, l2 = fp.proximal_length, fp.intermediate_length
    q12 = q1 + b * q1
    da = l1 * math.cos(q1) + l2 * math.cos(q12) * (1.0 + b)
    db = -l1 * math.sin(q1) - l2 * math.sin(q12) * (1.0 + b)
    return da * curl + db * ext


def solve_width_qp(params: LinkageParams, spec: GraspSpec, settings: QPSettings = QPSettings(),
                   table: Optional[SweepTable] = None) -> GraspSolution:
    """Differential IK from the open hand toward the analytic fingertip targets.

    Each iteration solves min 1/2 |qdot|^2 subject to J qdot = e with the
    coupling rows qdot_int = b * qdot_prox. The coupling equalities are
    eliminated by parametrizing each finger by its proximal rate, the tip
    rows are solved by damped least squares, and the step is clipped to the
    per-joint limit and the joint bounds. The through-origin coupling ignores
    the linkage offset, so a residual tip error remains.
    """
    from .hand_model import build_sweep_table  # local: avoids a cold table build on import

    if table is None:
        table = build_sweep_table(params)
    ref = solve_width_analytic(table, spec)
    n = spec.n_fingers
    names = ("thumb",) + active_fingers(n)
    frames = _frames(params, n)
    fps = {k: params.finger(k) for k in names}
    # upper bound on q_prox from both the proximal and (coupled) intermediate ranges
    upper = {k: min(fp.joint_range[1], fp.intermediate_range[1] / fp.coupling_ratio_b) for k, fp in fps.items()}
    lower = {k: fp.joint_range[0] for k, fp in fps.items()}
    q = {k: 0.0 for k in names}
    tol_mm = settings.tip_tolerance * 1000.0
    targets = ref.targets
    flags = []
    iterations = 0

    def tips_of(qd):
        return {k: chain_tip(fps[k], qd[k], fps[k].coupling_ratio_b * qd[k], *frames[k]) for k in names}

    tips = tips_of(q)
    for it in range(settings.max_iterations):
        errs = {k: targets[k] - tips[k] for k in names}
        if max(np.linalg.norm(e) for e in errs.values()) < tol_mm:
            break
        iterations = it + 1
        # Block-diagonal after eliminating the coupling: one column per finger.
        max_dq = 0.0
        for k in names:
            jac = _tip_jacobian(fps[k], q[k], fps[k].coupling_ratio_b, *frames[k])
            jtj = float(jac @ jac) + settings.damping
            if jtj <= settings.damping * (1 + 1e-12):
                flags.append(f"degenerate:{k}")
            dq = float(jac @ errs[k]) / jtj
            dq = max(-settings.step_limit, min(settings.step_limit, dq))
            new = min(max(q[k] + dq, lower[k]), upper[k])
            max_dq = max(max_dq, abs(new - q[k]))
            q[k] = new
        tips = tips_of(q)
        if max_dq < settings.min_step:
            break
    joints = {k: (q[k], fps[k].coupling_ratio_b * q[k]) for k in names}
    theta = ref.theta_star
    return GraspSolution(
        width=spec.width, n_fingers=n, s_star=ref.s_star, thumb_s=ref.thumb_s, theta_star=theta,
        thumb_ctrls=ref.thumb_ctrls, finger_ctrls=dict(ref.finger_ctrls),
        z_span=z_span_of(tips, theta), tip_error=tip_error_of(tips, targets), solver=Solver.QP,
        iterations=iterations, tips=tips, targets=dict(targets), joints=joints,
        flags=tuple(sorted(set(flags))),
    )


def joint_space_distance(a: GraspSolution, b: GraspSolution) -> float:
    """Max |q_prox| difference over the shared fingers (rad)."""
    return max(abs(a.joints[k][0] - b.joints[k][0]) for k in a.joints if k in b.joints)


def width_sweep(table: SweepTable, n_fingers: int, n_points: int = 200,
                margin: float = 1e-6) -> np.ndarray:
    lo, hi = reachable_range(table, n_fingers)
    return np.linspace(lo + margin, hi - margin, n_points)


def timed_analytic(table: SweepTable, spec: GraspSpec) -> Tuple[GraspSolution, float]:
    t0 = time.perf_counter()
    sol = solve_width_analytic(table, spec)
    return sol, time.perf_counter() - t0
