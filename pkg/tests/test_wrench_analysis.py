import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog
from scipy.spatial import ConvexHull

from linkhand.wrench_analysis import (
    Contact, ContactSet, WrenchError, antipodal_fixture, build_gws, cone_edges, contact_set_from_json,
    contact_set_to_json, distance_to_hull, force_closure, origin_interior_lp, pinch_force_fixture,
    sim_real_force_compare, simplex, task_wrench_feasible,
)


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def planar_two_contact_closure(c1: Contact, c2: Contact) -> bool:
    """Classical planar test: the line through the contacts lies strictly inside both friction cones."""
    p1, p2 = np.asarray(c1.point), np.asarray(c2.point)
    d = p2 - p1
    if np.linalg.norm(d) == 0:
        return False
    d = d / np.linalg.norm(d)
    a1 = math.acos(np.clip(np.dot(c1.normal, d), -1, 1))
    a2 = math.acos(np.clip(np.dot(c2.normal, -d), -1, 1))
    return a1 < math.atan(c1.mu) and a2 < math.atan(c2.mu)


def hull_epsilon(W: np.ndarray) -> float:
    """Insphere radius about the origin from the facet equations of conv(W)."""
    hull = ConvexHull(W)
    return float(np.min(-hull.equations[:, -1]))


def linprog_member(W: np.ndarray, w: np.ndarray) -> bool:
    N = W.shape[0]
    A = np.vstack([W.T, np.ones((1, N))])
    b = np.concatenate([w, [1.0]])
    res = linprog(np.zeros(N), A_eq=A, b_eq=b, bounds=[(0, None)] * N, method="highs")
    return res.status == 0


def _unit(a):
    return (math.cos(a), math.sin(a))


def random_planar_pair(rng):
    p1 = rng.uniform(-1, 1, 2)
    p2 = rng.uniform(-1, 1, 2)
    toward = math.atan2(*(p2 - p1)[::-1])
    n1 = _unit(toward + rng.uniform(-1.2, 1.2))
    n2 = _unit(toward + math.pi + rng.uniform(-1.2, 1.2))
    mu = float(rng.uniform(0.1, 1.0))
    return Contact(tuple(p1), n1, mu), Contact(tuple(p2), n2, mu)


def random_spatial_contacts(rng, k):
    out = []
    for _ in range(k):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        out.append(Contact(tuple(-0.03 * n), tuple(n), float(rng.uniform(0.3, 0.9))))
    return out


# ---------------------------------------------------------------------------
# Force closure
# ---------------------------------------------------------------------------

def test_antipodal_fixture_is_force_closure():
    v = force_closure(antipodal_fixture().gws())
    assert v.force_closure and v.epsilon > 0


def test_single_contact_is_not_force_closure():
    v = force_closure(build_gws([Contact((0.02, 0.0), (-1.0, 0.0), 0.5)]))
    assert not v.force_closure and v.epsilon <= 0


def test_frictionless_antipodal_is_not_force_closure():
    v = force_closure(antipodal_fixture(mu=0.0).gws())
    assert not v.force_closure


def test_spatial_two_point_contacts_never_close():
    # Two point contacts cannot resist torque about the line joining them.
    cs = [Contact((0.02, 0, 0), (-1.0, 0, 0), 0.8), Contact((-0.02, 0, 0), (1.0, 0, 0), 0.8)]
    assert not force_closure(build_gws(cs)).force_closure


def test_planar_oracle_agreement_100_instances():
    rng = np.random.default_rng(2024)
    agree, closures = 0, 0
    for _ in range(100):
        c1, c2 = random_planar_pair(rng)
        ours = force_closure(build_gws([c1, c2]), refine=False).force_closure
        ref = planar_two_contact_closure(c1, c2)
        agree += ours == ref
        closures += ref
    assert agree == 100
    assert 10 < closures < 90   # both outcomes exercised


def test_planar_epsilon_matches_hull_oracle():
    gws = antipodal_fixture().gws()
    v = force_closure(gws, direction_samples=512)
    exact = hull_epsilon(gws.primitives)
    assert exact <= v.epsilon <= exact + 1e-6


def test_spatial_epsilon_upper_bounds_hull_oracle():
    rng = np.random.default_rng(7)
    gws = build_gws(random_spatial_contacts(rng, 4), m=6)
    v = force_closure(gws, direction_samples=2048)
    if not v.force_closure:
        pytest.skip("random grasp not in force closure")
    exact = hull_epsilon(gws.primitives)
    assert v.epsilon >= exact - 1e-9
    assert v.epsilon <= exact * 1.5


def test_epsilon_monotone_under_direction_refinement():
    rng = np.random.default_rng(3)
    gws = build_gws(random_spatial_contacts(rng, 5), m=6)
    eps = [force_closure(gws, direction_samples=n).epsilon for n in (128, 256, 512, 1024, 2048)]
    assert all(b <= a + 1e-15 for a, b in zip(eps, eps[1:]))


def test_non_closure_quality_is_minus_hull_distance():
    gws = build_gws([Contact((0.02, 0.0), (-1.0, 0.0), 0.3), Contact((0.0, 0.02), (0.0, -1.0), 0.3)])
    v = force_closure(gws)
    assert not v.force_closure
    assert v.epsilon == pytest.approx(-distance_to_hull(gws.primitives))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_lp_margin_sign_matches_verdict(seed):
    rng = np.random.default_rng(seed)
    c1, c2 = random_planar_pair(rng)
    gws = build_gws([c1, c2])
    t = origin_interior_lp(gws.primitives)
    assert (t > 1e-9) == planar_two_contact_closure(c1, c2)


def test_too_few_directions_rejected():
    with pytest.raises(WrenchError):
        force_closure(antipodal_fixture().gws(), direction_samples=10)


# ---------------------------------------------------------------------------
# Task-wrench membership and the simplex
# ---------------------------------------------------------------------------

def test_task_wrench_agrees_with_linprog_50_instances():
    rng = np.random.default_rng(99)
    agree = feasible = 0
    for _ in range(50):
        gws = build_gws(random_spatial_contacts(rng, 4), m=4)
        w = rng.normal(size=6) * rng.uniform(0.0, 0.1)
        ours = task_wrench_feasible(gws, w)
        ref = linprog_member(gws.primitives, w)
        agree += ours.feasible == ref
        feasible += ref
    assert agree == 50
    assert 0 < feasible < 50


def test_feasible_certificate_reconstructs_wrench():
    gws = antipodal_fixture().gws()
    w = np.array([0.0, 0.1, 0.0])
    r = task_wrench_feasible(gws, w)
    assert r.feasible
    assert np.all(r.alpha >= -1e-12) and r.alpha.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(gws.primitives.T @ r.alpha, w, atol=1e-9)


def test_task_wrench_dimension_checked():
    with pytest.raises(WrenchError):
        task_wrench_feasible(antipodal_fixture().gws(), [0.0, 1.0])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_simplex_matches_linprog_optimum(seed):
    rng = np.random.default_rng(seed)
    m, n = 3, 6
    A = rng.normal(size=(m, n))
    x0 = rng.uniform(0.1, 1.0, n)
    b = A @ x0                       # feasible by construction
    c = rng.uniform(0.0, 1.0, n)     # bounded below on x >= 0
    ours = simplex(c, A, b)
    ref = linprog(c, A_eq=A, b_eq=b, bounds=[(0, None)] * n, method="highs")
    assert ours.status == "optimal"
    assert ours.objective == pytest.approx(ref.fun, abs=1e-7)


def test_simplex_reports_infeasible():
    A = np.array([[1.0, 1.0]])
    assert simplex(np.zeros(2), A, np.array([-1.0])).status == "infeasible"


# ---------------------------------------------------------------------------
# Contacts, cones, JSON
# ---------------------------------------------------------------------------

@given(mu=st.floats(0.0, 2.0), m=st.integers(3, 12))
def test_cone_edges_at_friction_half_angle(mu, m):
    c = Contact((0.0, 0.0, 0.01), (0.0, 0.0, -1.0), mu)
    e = cone_edges(c, m)
    assert e.shape == (m, 3)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0)
    np.testing.assert_allclose(e @ np.array(c.normal), math.cos(math.atan(mu)), atol=1e-12)


@pytest.mark.parametrize("kw", [{"normal": (2.0, 0.0)}, {"mu": -0.1}, {"point": (0.0, 0.0, 0.0)},
                                {"point": (float("nan"), 0.0)}])
def test_contact_validation(kw):
    base = {"point": (0.01, 0.0), "normal": (-1.0, 0.0), "mu": 0.5}
    base.update(kw)
    with pytest.raises(WrenchError):
        Contact(**base)


def test_mixed_dimensions_rejected():
    with pytest.raises(WrenchError):
        build_gws([Contact((0.01, 0.0), (-1.0, 0.0)), Contact((0.0, 0.0, 0.01), (0.0, 0.0, -1.0))])


def test_contact_set_json_roundtrip():
    cs = antipodal_fixture()
    back = contact_set_from_json(contact_set_to_json(cs))
    assert back == ContactSet(cs.contacts, cs.m, cs.torque_scale)


@pytest.mark.parametrize("text", ["not json", json.dumps({"contacts": [{"p": [0, 0]}]}), "{}"])
def test_malformed_contact_json(text):
    with pytest.raises(WrenchError):
        contact_set_from_json(text)


# ---------------------------------------------------------------------------
# Simulated vs measured forces
# ---------------------------------------------------------------------------

def test_pinch_fixture_mismatch_near_twenty_percent():
    t, sim, real = pinch_force_fixture()
    m = sim_real_force_compare(sim, real, t, t)
    assert 15.0 < m.pooled < 25.0
    assert set(m.per_finger) == {"thumb", "index", "middle"}


def test_identical_traces_have_zero_mismatch():
    t, sim, _ = pinch_force_fixture()
    assert sim_real_force_compare(sim, sim).pooled == 0.0


def test_non_overlapping_time_bases_rejected():
    t, sim, real = pinch_force_fixture()
    with pytest.raises(WrenchError):
        sim_real_force_compare(sim, real, t, t + 100.0)
