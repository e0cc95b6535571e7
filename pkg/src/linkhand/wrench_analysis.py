"""Grasp wrench space, force-closure verdicts and task-wrench membership.

Contacts may be spatial (3-vector points and normals, 6D wrenches) or
planar (2-vector points and normals, wrenches (fx, fy, tau_z)). A pair of
point contacts can never be force closure in 6D, since torque about the line
through them is unresistable; the planar model is the one in which a
two-finger antipodal pinch is closed.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize, nnls
from scipy.stats import norm, qmc

SIMPLEX_TOL = 1e-9
MARGINAL_TOL = 1e-6
DEFAULT_EDGES = 8


class WrenchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Contacts and friction cones
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Contact:
    point: Tuple[float, ...]     # m, object frame
    normal: Tuple[float, ...]    # unit, pointing into the object
    mu: float = 0.5
    force_magnitude: float = 1.0

    def __post_init__(self):
        p, n = np.asarray(self.point, float), np.asarray(self.normal, float)
        if p.shape != n.shape or p.shape not in ((2,), (3,)):
            raise WrenchError("point and normal must both be 2- or 3-vectors")
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(n)):
            raise WrenchError("non-finite contact geometry")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise WrenchError(f"normal must be unit length, |n| = {np.linalg.norm(n):.12f}")
        if self.mu < 0:
            raise WrenchError("mu must be >= 0")

    @property
    def planar(self) -> bool:
        return len(self.point) == 2


def _tangent_basis(n: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


def cone_edges(contact: Contact, m: int = DEFAULT_EDGES) -> np.ndarray:
    """Unit edge directions of the linearized friction cone, shape (m, dim).

    Spatial contacts get m rays evenly spaced in azimuth; a planar cone has
    exactly two edges, so m is ignored there.
    """
    n = np.asarray(contact.normal, float)
    half = math.atan(contact.mu)
    c, s = math.cos(half), math.sin(half)
    if contact.planar:
        t = np.array([-n[1], n[0]])
        return np.array([c * n + s * t, c * n - s * t])
    if m < 3:
        raise WrenchError("need at least 3 cone edges")
    t1, t2 = _tangent_basis(n)
    phis = 2.0 * np.pi * np.arange(m) / m
    return np.array([c * n + s * (math.cos(p) * t1 + math.sin(p) * t2) for p in phis])


@dataclass(frozen=True)
class GraspWrenchSpace:
    primitives: np.ndarray     # (N, d), unit rows
    edges_per_contact: Tuple[int, ...]
    torque_scale: float

    @property
    def dim(self) -> int:
        return self.primitives.shape[1]


def characteristic_scale(contacts: Sequence[Contact]) -> float:
    r = max(float(np.linalg.norm(c.point)) for c in contacts)
    return 1.0 / r if r > 0 else 1.0


def build_gws(contacts: Sequence[Contact], m: int = DEFAULT_EDGES,
              torque_scale: Optional[float] = None) -> GraspWrenchSpace:
    """Primitive wrenches (e, lambda * p x e), each normalized to unit length.

    Torques are taken about the object-frame origin.
    """
    if not contacts:
        raise WrenchError("at least one contact required")
    dims = {c.planar for c in contacts}
    if len(dims) != 1:
        raise WrenchError("cannot mix planar and spatial contacts")
    lam = characteristic_scale(contacts) if torque_scale is None else float(torque_scale)
    if lam <= 0:
        raise WrenchError("torque_scale must be positive")
    rows, counts = [], []
    for c in contacts:
        p = np.asarray(c.point, float)
        edges = cone_edges(c, m)
        for e in edges:
            if c.planar:
                w = np.array([e[0], e[1], lam * (p[0] * e[1] - p[1] * e[0])])
            else:
                w = np.concatenate([e, lam * np.cross(p, e)])
            rows.append(w / np.linalg.norm(w))
        counts.append(len(edges))
    return GraspWrenchSpace(np.array(rows), tuple(counts), lam)


# ---------------------------------------------------------------------------
# Dense two-phase simplex
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LPResult:
    status: str            # "optimal" | "infeasible" | "unbounded"
    x: Optional[np.ndarray]
    objective: float
    phase1_residual: float


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r] -= T[r, col] * T[row]


def _run_simplex(T: np.ndarray, basis: List[int], n_cols: int, tol: float, max_iter: int) -> str:
    """Minimize the objective held in the last row (reduced costs), Bland's rule."""
    for _ in range(max_iter):
        cost = T[-1, :n_cols]
        entering = next((j for j in range(n_cols) if cost[j] < -tol), None)
        if entering is None:
            return "optimal"
        col = T[:-1, entering]
        ratios = [(T[i, -1] / col[i], basis[i], i) for i in range(len(col)) if col[i] > tol]
        if not ratios:
            return "unbounded"
        _, _, leave = min(ratios)
        _pivot(T, leave, entering)
        basis[leave] = entering
    raise WrenchError("simplex iteration limit reached")


def simplex(c: np.ndarray, A: np.ndarray, b: np.ndarray, tol: float = SIMPLEX_TOL,
            max_iter: int = 10000) -> LPResult:
    """min c.x subject to A x = b, x >= 0 (dense tableau, two phases)."""
    A = np.array(A, float)
    b = np.array(b, float)
    c = np.array(c, float)
    m, n = A.shape
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1
    # phase 1: artificials on every row
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    _run_simplex(T, basis, n + m, tol, max_iter)
    residual = max(-T[-1, -1], 0.0) + 0.0   # + 0.0 folds -0.0 into 0.0
    if residual > tol:
        return LPResult("infeasible", None, math.inf, residual)
    # drive remaining artificials out of the basis
    for i in range(m):
        if basis[i] >= n:
            j = next((j for j in range(n) if abs(T[i, j]) > tol), None)
            if j is not None:
                _pivot(T, i, j)
                basis[i] = j
    keep = [i for i in range(m) if basis[i] < n]
    T2 = np.zeros((len(keep) + 1, n + 1))
    T2[:-1, :n] = T[keep, :n]
    T2[:-1, -1] = T[keep, -1]
    basis2 = [basis[i] for i in keep]
    T2[-1, :n] = c
    for i, j in enumerate(basis2):
        T2[-1] -= c[j] * T2[i]
    status = _run_simplex(T2, basis2, n, tol, max_iter)
    if status == "unbounded":
        return LPResult("unbounded", None, -math.inf, residual)
    x = np.zeros(n)
    for i, j in enumerate(basis2):
        x[j] = T2[i, -1]
    return LPResult("optimal", x, float(c @ x), residual)


# ---------------------------------------------------------------------------
# Force closure and epsilon quality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QualityVerdict:
    force_closure: bool
    epsilon: float              # sampled min of the support function (see force_closure)
    direction_samples: int
    reason: str = ""
    interior_margin: float = 0.0   # LP optimum t: min alpha over a strictly positive combination

    def to_json_dict(self) -> dict:
        return {"force_closure": self.force_closure, "epsilon": self.epsilon,
                "direction_samples": self.direction_samples, "reason": self.reason}


def origin_interior_lp(W: np.ndarray) -> float:
    """max t s.t. sum a_i w_i = 0, sum a_i = 1, a_i >= t.

    The origin is interior to conv(W) iff W spans the space and t > 0.
    """
    N, d = W.shape
    # variables: alpha (N), t+ , t-, slack (N)   with alpha_i - t+ + t- - s_i = 0
    nv = 2 * N + 2
    A = np.zeros((d + 1 + N, nv))
    b = np.zeros(d + 1 + N)
    A[:d, :N] = W.T
    A[d, :N] = 1.0
    b[d] = 1.0
    for i in range(N):
        A[d + 1 + i, i] = 1.0
        A[d + 1 + i, N] = -1.0
        A[d + 1 + i, N + 1] = 1.0
        A[d + 1 + i, N + 2 + i] = -1.0
    c = np.zeros(nv)
    c[N], c[N + 1] = -1.0, 1.0
    res = simplex(c, A, b)
    if res.status != "optimal":
        return -math.inf
    return float(res.x[N] - res.x[N + 1])


def distance_to_hull(W: np.ndarray, point: Optional[np.ndarray] = None) -> float:
    """Euclidean distance from a point (default origin) to conv(rows of W)."""
    N, d = W.shape
    target = np.zeros(d) if point is None else np.asarray(point, float)
    big = 1e3
    A = np.vstack([W.T, big * np.ones((1, N))])
    rhs = np.concatenate([target, [big]])
    alpha, _ = nnls(A, rhs, maxiter=50 * N)
    alpha = alpha / alpha.sum()
    return float(np.linalg.norm(W.T @ alpha - target))


def sphere_directions(d: int, n: int, seed: int = 0) -> np.ndarray:
    """Deterministic low-discrepancy unit directions; a prefix of a longer draw."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pts = qmc.Halton(d, scramble=True, seed=seed).random(n)
    g = norm.ppf(np.clip(pts, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def support(W: np.ndarray, u: np.ndarray) -> np.ndarray:
    """h(u) = max_i w_i . u for each row of u."""
    return (np.atleast_2d(u) @ W.T).max(axis=1)


def _refine(W: np.ndarray, u0: np.ndarray) -> float:
    def f(x):
        nx = np.linalg.norm(x)
        return float(support(W, x / nx)[0]) if nx > 0 else math.inf

    res = minimize(f, u0, method="Nelder-Mead", options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 400})
    return min(float(res.fun), f(u0))


def force_closure(gws: GraspWrenchSpace, direction_samples: int = 512, seed: int = 0,
                  refine: bool = True) -> QualityVerdict:
    """Force-closure verdict with a sampled epsilon quality.

    The verdict is exact: a linear program decides whether the origin is
    strictly inside the primitive hull. The quality value is the minimum of
    the support function over Halton directions, each new running minimum
    polished by a local search. That minimum can only fall as the sample
    count grows. It over-estimates the true insphere radius by at most the
    sampling gap. Without force closure the quality is -distance(origin,
    hull), which is exact (0 when the origin lies on the boundary).
    """
    if direction_samples < 100:
        raise WrenchError("direction_samples must be >= 100")
    W = gws.primitives
    N, d = W.shape
    if N < d + 1:
        return QualityVerdict(False, -distance_to_hull(W), direction_samples,
                              f"{N} primitives cannot enclose the origin in {d}D")
    if np.linalg.matrix_rank(W, tol=1e-9) < d:
        return QualityVerdict(False, -distance_to_hull(W), direction_samples,
                              "primitives do not span the wrench space")
    t = origin_interior_lp(W)
    if t <= SIMPLEX_TOL:
        return QualityVerdict(False, -distance_to_hull(W), direction_samples,
                              "origin not strictly inside the wrench hull", t)
    U = sphere_directions(d, direction_samples, seed)
    h = support(W, U)
    eps = float(h.min())
    if refine:
        running = np.minimum.accumulate(h)
        records = np.nonzero(np.concatenate([[True], running[1:] < running[:-1]]))[0]
        for i in records:
            eps = min(eps, _refine(W, U[i]))
    return QualityVerdict(True, eps, direction_samples, "", t)


# ---------------------------------------------------------------------------
# Task-wrench membership
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskWrenchResult:
    status: str                      # "feasible" | "marginal" | "infeasible"
    alpha: Optional[np.ndarray]      # convex-combination certificate when feasible
    residual: float                  # phase-1 L1 infeasibility

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    def to_json_dict(self) -> dict:
        return {"status": self.status, "residual": self.residual,
                "alpha": None if self.alpha is None else [float(a) for a in self.alpha]}


def task_wrench_feasible(gws: GraspWrenchSpace, w_task: Sequence[float],
                         tol: float = SIMPLEX_TOL, marginal: float = MARGINAL_TOL) -> TaskWrenchResult:
    """Is w_task a convex combination of the primitives?

    Residuals inside (tol, marginal] are reported as marginal rather than
    forced to a verdict.
    """
    W = gws.primitives
    w = np.asarray(w_task, float)
    if w.shape != (W.shape[1],):
        raise WrenchError(f"task wrench must have {W.shape[1]} components")
    A = np.vstack([W.T, np.ones((1, W.shape[0]))])
    b = np.concatenate([w, [1.0]])
    res = simplex(np.zeros(W.shape[0]), A, b, tol=tol)
    if res.status == "optimal":
        return TaskWrenchResult("feasible", res.x, res.phase1_residual)
    if res.phase1_residual <= marginal:
        return TaskWrenchResult("marginal", None, res.phase1_residual)
    return TaskWrenchResult("infeasible", None, res.phase1_residual)


# ---------------------------------------------------------------------------
# Simulated vs measured finger forces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForceMismatch:
    per_finger: Dict[str, float]   # percent
    pooled: float                  # percent


def sim_real_force_compare(sim: Mapping[str, np.ndarray], real: Mapping[str, np.ndarray],
                           t_sim: Optional[np.ndarray] = None, t_real: Optional[np.ndarray] = None,
                           floor: float = 1e-6) -> ForceMismatch:
    """Mean relative error |real - sim| / |sim| in percent, per finger and pooled.

    With time bases given, both traces are resampled onto the sim samples
    inside the overlap window. Samples where the sim force is below
    ``floor`` are skipped.
    """
    fingers = sorted(set(sim) & set(real))
    if not fingers:
        raise WrenchError("no common fingers")
    per, pooled = {}, []
    for f in fingers:
        s = np.asarray(sim[f], float)
        r = np.asarray(real[f], float)
        if t_sim is not None and t_real is not None:
            lo, hi = max(t_sim[0], t_real[0]), min(t_sim[-1], t_real[-1])
            mask = (t_sim >= lo) & (t_sim <= hi)
            if hi <= lo or not mask.any():
                raise WrenchError("sim and real traces do not overlap in time")
            s, r = s[mask], np.interp(t_sim[mask], t_real, r)
        elif s.shape != r.shape:
            raise WrenchError("traces must share a time base")
        keep = np.abs(s) > floor
        if not keep.any():
            raise WrenchError(f"no usable samples for {f}")
        rel = np.abs(r[keep] - s[keep]) / np.abs(s[keep])
        per[f] = 100.0 * float(rel.mean())
        pooled.append(rel)
    return ForceMismatch(per, 100.0 * float(np.concatenate(pooled).mean()))


def pinch_force_fixture(seed: int = 3, duration: float = 4.0, rate: float = 163.0
                        ) -> Tuple[np.ndarray, Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Reconstructed three-finger pinch-and-lift force traces (sim, real).

    Synthetic data shaped like a tripod pinch: ramp to a hold plateau, a
    load bump at lift-off, then a steady hold. The measured traces sit about
    20 % off the simulated ones, with finger-specific sign and ripple.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, duration, 1.0 / rate)
    plateau = {"thumb": 3.0, "index": 1.8, "middle": 1.4}
    bias = {"thumb": 1.21, "index": 0.80, "middle": 1.19}
    sim, real = {}, {}
    for f in plateau:
        ramp = np.clip(t / 0.6, 0, 1)
        lift = 0.25 * np.exp(-0.5 * ((t - 2.0) / 0.2) ** 2)
        s = plateau[f] * (0.2 + 0.8 * ramp + lift)
        ripple = 1.0 + 0.03 * np.sin(2 * np.pi * 1.7 * t + rng.uniform(0, 2 * np.pi))
        sim[f] = s
        real[f] = s * bias[f] * ripple
    return t, sim, real


# ---------------------------------------------------------------------------
# JSON I/O
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContactSet:
    contacts: Tuple[Contact, ...]
    m: int = DEFAULT_EDGES
    torque_scale: Optional[float] = None

    def gws(self) -> GraspWrenchSpace:
        return build_gws(self.contacts, self.m, self.torque_scale)


def contact_set_from_json(text: str) -> ContactSet:
    try:
        d = json.loads(text)
        contacts = tuple(Contact(tuple(c["p"]), tuple(c["n"]), float(c.get("mu", 0.5)),
                                 float(c.get("f_n", 1.0))) for c in d["contacts"])
        lam = d.get("lambda")
        return ContactSet(contacts, int(d.get("m", DEFAULT_EDGES)), None if lam is None else float(lam))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise WrenchError(f"bad contact-set JSON: {exc}") from exc


def contact_set_to_json(cs: ContactSet) -> str:
    d = {"contacts": [{"p": list(c.point), "n": list(c.normal), "mu": c.mu, "f_n": c.force_magnitude}
                      for c in cs.contacts], "m": cs.m, "lambda": cs.torque_scale}
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def antipodal_fixture(mu: float = 0.5, radius: float = 0.02) -> ContactSet:
    """Planar two-finger pinch on a disc: contacts at (+-r, 0), normals inward."""
    return ContactSet((Contact((radius, 0.0), (-1.0, 0.0), mu), Contact((-radius, 0.0), (1.0, 0.0), mu)))
