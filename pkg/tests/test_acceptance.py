"""End-to-end acceptance checks.

Each test evaluates one criterion at its stated tolerance, prints a single
PASS/FAIL line (also repeated in the terminal summary) and then asserts.
"""

import hashlib
import math
import time

import numpy as np

from linkhand.actuator_sim import (
    CHARACTERIZATION_SETPOINTS, CHARACTERIZATION_SPEEDS, ConstantSpeed, ContactScene, SimConfig, characterize,
    make_profile, run_contact_trial, run_step_response,
)
from linkhand.calibration import (
    REFERENCE_COEFFS, default_sweep_path, fit_all, load_sweep_csv, newtons_to_raw, reference_models,
    raw_to_newtons,
)
from linkhand.cli import main
from linkhand.grasp_planner import (
    GraspSpec, Strategy, reachable_range, solve_width_qp, timed_analytic, width_sweep,
)
from linkhand.hand_model import build_sweep_table, default_params, tilt_span
from linkhand.hybrid_controller import (
    FINGER_SIGMA_N, ReleaseDetector, estimate_baseline, release_step, synthetic_release_traces,
)
from linkhand.strategy_bench import (
    FailureMode, default_context, load_catalog, run_benchmark, two_prop_ztest, wilson_ci,
)
from linkhand.wrench_analysis import (
    Contact, antipodal_fixture, build_gws, contact_set_to_json, force_closure, task_wrench_feasible,
)

from test_strategy_bench import wilson_oracle, ztest_oracle
from test_wrench_analysis import (
    linprog_member, planar_two_contact_closure, random_planar_pair, random_spatial_contacts,
)


def _verdict(log, number, title, checks, elapsed, limit):
    """Record and print one line; return the failing check names."""
    checks = dict(checks)
    if limit is not None:
        checks[f"runtime {elapsed:.2f}s < {limit:g}s"] = elapsed < limit
    failed = [k for k, ok in checks.items() if not ok]
    status = "PASS" if not failed else "FAIL"
    line = f"[{status}] criterion {number}: {title} ({elapsed:.2f} s)"
    if failed:
        line += " -- failed: " + "; ".join(failed)
    log.append(line)
    print(line)
    return failed


# ---------------------------------------------------------------------------
# 1. Calibration
# ---------------------------------------------------------------------------

def test_criterion_1_calibration(acceptance_log):
    t0 = time.perf_counter()
    fits = fit_all(load_sweep_csv(default_sweep_path()))
    checks = {}
    for finger, (a, b, r2) in REFERENCE_COEFFS.items():
        m = fits[finger]
        checks[f"{finger} slope {m.slope_a:.5f} within 5%"] = abs(m.slope_a - a) <= 0.05 * a
        checks[f"{finger} intercept {m.intercept_b:.3f} within 0.05 N"] = abs(m.intercept_b - b) <= 0.05
        checks[f"{finger} R2 {m.r_squared:.4f} within 0.005"] = abs(m.r_squared - r2) <= 0.005
    worst = 0
    for m in reference_models().values():
        for raw in range(1001):
            f = raw_to_newtons(m, raw)
            if not f.clamped:
                worst = max(worst, abs(newtons_to_raw(m, f.value).value - raw))
    checks[f"round trip worst {worst} raw <= 1"] = worst <= 1
    elapsed = time.perf_counter() - t0
    assert not _verdict(acceptance_log, 1, "calibration refit and raw/newton round trip", checks, elapsed, 1.0)


# ---------------------------------------------------------------------------
# 2. Step response
# ---------------------------------------------------------------------------

def test_criterion_2_step_response(acceptance_log):
    t0 = time.perf_counter()
    cfg = SimConfig()
    lat, rises, resid = [], [], []
    for v in range(100, 1001, 50):
        r = run_step_response(500, v, cfg)
        lat.append(r.latency)
        rises.append(r.rise_time)
        t = np.array([s.time for s in r.samples])
        p = np.array([s.position for s in r.samples])
        moving = (p < 1000 - 1e-9) & (p > 500 + 1e-9)
        coef = np.polyfit(t[moving], p[moving], 1)
        resid.append(float(np.max(np.abs(p[moving] - np.polyval(coef, t[moving])))))
    checks = {
        f"latency {min(lat) * 1e3:.1f}-{max(lat) * 1e3:.1f} ms within 66 +- 6.1 ms":
            all(abs(x - 0.066) <= 0.0061 for x in lat),
        f"rise {min(rises):.3f}-{max(rises):.3f} s in [0.18, 0.30]":
            all(x is not None and 0.18 <= x <= 0.30 for x in rises),
        f"linear-fit residual {max(resid):.2e} < 1 raw": max(resid) < 1.0,
    }
    elapsed = time.perf_counter() - t0
    assert not _verdict(acceptance_log, 2, "step latency, rise time and linear travel", checks, elapsed, 5.0)


# ---------------------------------------------------------------------------
# 3. Overshoot
# ---------------------------------------------------------------------------

def test_criterion_3_overshoot(acceptance_log):
    t0 = time.perf_counter()
    quiet = SimConfig().noiseless()
    scene = ContactScene(600.0, True)
    monotone = all(
        np.all(np.diff([run_contact_trial(ConstantSpeed(v), f, scene, quiet).overshoot
                        for v in CHARACTERIZATION_SPEEDS]) >= -1e-9)
        for f in CHARACTERIZATION_SETPOINTS)
    grid = characterize("overshoot", trials=20)
    assert len(grid) == (len(CHARACTERIZATION_SPEEDS) + 1) * len(CHARACTERIZATION_SETPOINTS)
    mean = {(r.speed, r.f_set): r.mean for r in grid}
    rel = [abs(mean[("hybrid", f)] - mean[("25", f)]) / mean[("25", f)] for f in CHARACTERIZATION_SETPOINTS]
    wins = total = 0
    for f in CHARACTERIZATION_SETPOINTS:
        for k in range(20):
            h = run_contact_trial(make_profile("hybrid", 625.0), f, scene, seed=k).completion_time
            c = run_contact_trial(ConstantSpeed(25), f, scene, seed=k).completion_time
            wins += h < c
            total += 1
    checks = {
        "zero-noise overshoot monotone in speed": monotone,
        f"hybrid vs constant-25 overshoot worst {max(rel) * 100:.1f}% <= 10%": max(rel) <= 0.10,
        f"hybrid faster in {wins}/{total} paired seeds (>= 95%)": wins >= 0.95 * total,
    }
    elapsed = time.perf_counter() - t0
    assert not _verdict(acceptance_log, 3, "contact overshoot grid and hybrid timing", checks, elapsed, 30.0)


# ---------------------------------------------------------------------------
# 4. Planner
# ---------------------------------------------------------------------------

def test_criterion_4_planner(acceptance_log):
    t0 = time.perf_counter()
    params = default_params()
    table = build_sweep_table(params, 512)
    lo, hi = reachable_range(table, 2)
    maxes = {n: reachable_range(table, n)[1] for n in (3, 4, 5)}
    zero_err, slowest, worst_jump, qp_means = True, 0.0, 0.0, {}
    for n in (2, 3, 4, 5):
        thetas = []
        for w in width_sweep(table, n, 200):
            # Best of 3 per width, so one scheduler stall does not count as solver cost.
            runs = [timed_analytic(table, GraspSpec(float(w), n)) for _ in range(3)]
            sol, dt = runs[0][0], min(r[1] for r in runs)
            zero_err &= sol.tip_error == 0.0
            slowest = max(slowest, dt)
            thetas.append(sol.theta_star)
        worst_jump = max(worst_jump, float(np.max(np.abs(np.diff(thetas)))))
        qp_means[n] = float(np.mean([solve_width_qp(params, GraspSpec(float(w), n), table=table).tip_error
                                     for w in width_sweep(table, n, 25)]))
    span = math.degrees(tilt_span(table))
    checks = {
        f"2-finger range ({lo:.1f}, {hi:.1f}) within 2 mm of (0, 110)": abs(lo) <= 2 and abs(hi - 110) <= 2,
        "3/4/5-finger max " + "/".join(f"{v:.1f}" for v in maxes.values()) + " within 2 mm of 100":
            all(abs(v - 100) <= 2 for v in maxes.values()),
        "analytic tip error exactly 0": zero_err,
        "QP mean tip error " + "/".join(f"{v:.2f}" for v in qp_means.values()) + " mm in [2, 4]":
            all(2.0 <= v <= 4.0 for v in qp_means.values()),
        f"slowest analytic solve {slowest * 1e6:.0f} us < 1 ms": slowest < 1e-3,
        f"theta* largest step {worst_jump:.4f} rad < 0.1 (continuous)": worst_jump < 0.1,
        f"index tilt span {span:.1f} deg within 49 +- 5": abs(span - 49) <= 5,
    }
    elapsed = time.perf_counter() - t0
    assert not _verdict(acceptance_log, 4, "grasp planner ranges, accuracy and speed", checks, elapsed, 10.0)


# ---------------------------------------------------------------------------
# 5. Wrench analysis
# ---------------------------------------------------------------------------

def test_criterion_5_wrench(acceptance_log):
    t0 = time.perf_counter()
    fixture_ok = force_closure(antipodal_fixture().gws()).force_closure
    single = force_closure(build_gws([Contact((0.02, 0.0), (-1.0, 0.0), 0.5)])).force_closure
    rng = np.random.default_rng(2024)
    planar = sum(force_closure(build_gws(list(pair)), refine=False).force_closure
                 == planar_two_contact_closure(*pair)
                 for pair in (random_planar_pair(rng) for _ in range(100)))
    rng = np.random.default_rng(99)
    lp = 0
    for _ in range(50):
        gws = build_gws(random_spatial_contacts(rng, 4), m=4)
        w = rng.normal(size=6) * rng.uniform(0.0, 0.1)
        lp += task_wrench_feasible(gws, w).feasible == linprog_member(gws.primitives, w)
    gws = build_gws(random_spatial_contacts(np.random.default_rng(3), 5), m=6)
    eps = [force_closure(gws, direction_samples=n).epsilon for n in (128, 256, 512, 1024, 2048)]
    checks = {
        "antipodal fixture in force closure": fixture_ok,
        "single contact not in force closure": not single,
        f"planar oracle agreement {planar}/100": planar == 100,
        f"task-wrench LP agreement {lp}/50": lp == 50,
        "epsilon non-increasing under refinement": all(b <= a + 1e-15 for a, b in zip(eps, eps[1:])),
    }
    elapsed = time.perf_counter() - t0
    assert not _verdict(acceptance_log, 5, "force closure, oracles and epsilon refinement", checks, elapsed, 20.0)


# ---------------------------------------------------------------------------
# 6. Release detector
# ---------------------------------------------------------------------------

def _fire_times(t, f, k):
    det = ReleaseDetector(estimate_baseline(t, f), FINGER_SIGMA_N, k)
    times = []
    for ti, fi in zip(t, f):
        det, fired = release_step(det, float(fi), float(ti))
        if fired:
            times.append(float(ti))
    return times


def test_criterion_6_release(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    spikes = synthetic_release_traces(1000, seed=60)
    flats = synthetic_release_traces(100, seed=61, flat_fraction=1.0)
    once = prem10 = prem3 = 0
    for tr in spikes:
        f = tr.force + rng.normal(0.0, FINGER_SIGMA_N, tr.t.size)
        f10, f3 = _fire_times(tr.t, f, 10), _fire_times(tr.t, f, 3)
        once += len(f10) == 1
        prem10 += bool(f10) and f10[0] < tr.spike_start
        prem3 += bool(f3) and f3[0] < tr.spike_start
    flat_fires = 0
    for tr in flats:
        flat_fires += len(_fire_times(tr.t, tr.force + rng.normal(0.0, FINGER_SIGMA_N, tr.t.size), 10))
    checks = {
        f"k=10 fires exactly once on {once}/1000 spike traces (>= 99%)": once >= 990,
        f"k=10 fires {flat_fires} times on flat traces (0)": flat_fires == 0,
        f"premature k=3 {prem3} > k=10 {prem10}": prem3 > prem10,
    }
    elapsed = time.perf_counter() - t0
    assert not _verdict(acceptance_log, 6, "release detector at finger-level noise", checks, elapsed, 5.0)


# ---------------------------------------------------------------------------
# 7. Strategy benchmark
# ---------------------------------------------------------------------------

def test_criterion_7_benchmark(acceptance_log):
    t0 = time.perf_counter()
    catalog = load_catalog()
    rep = run_benchmark(catalog, tuple(Strategy), trials_per_cell=10, seed=0, ctx=default_context())
    s = rep.strategies
    n_ok = all(x.n == 150 for x in s.values())
    heights = {o.name: o.grasp_point_height for o in catalog}
    small_cut = float(np.median(list(heights.values())))
    gc = rep.failures_by_object("naive", FailureMode.GROUND_COLLISION)
    gc_small = sum(v for k, v in gc.items() if heights[k] < small_cut)
    gc_total = sum(gc.values())
    stat_err = 0.0
    for k, n in [(130, 150), (123, 150), (72, 150), (7, 20)]:
        stat_err = max(stat_err, *(abs(a - b) for a, b in zip(wilson_ci(k, n), wilson_oracle(k, n))))
    for args in [(72, 150, 130, 150), (123, 150, 130, 150), (60, 150, 143, 150)]:
        r, (z, p) = two_prop_ztest(*args), ztest_oracle(*args)
        stat_err = max(stat_err, abs(r.z - z), abs(r.p_value - p))
    p27 = two_prop_ztest(123, 150, 130, 150).p_value
    checks = {
        "150 trials per strategy": n_ok,
        f"naive {s['naive'].rate:.3f} < reflex {s['reflex'].rate:.3f}, significant":
            s["naive"].rate < s["reflex"].rate and rep.significant("naive", "reflex"),
        f"naive {s['naive'].rate:.3f} < iterative {s['iterative'].rate:.3f}, significant":
            s["naive"].rate < s["iterative"].rate and rep.significant("naive", "iterative"),
        f"naive ground collisions on small-height objects {gc_small}/{gc_total}":
            gc_total > 0 and gc_small == gc_total,
        f"reflex mean time {s['reflex'].mean_time:.2f} s < iterative {s['iterative'].mean_time:.2f} s":
            s["reflex"].mean_time < s["iterative"].mean_time,
        f"Wilson/z-test worst oracle error {stat_err:.1e} <= 1e-6": stat_err <= 1e-6,
        f"reference-count p-value {p27:.3f} within 0.27 +- 0.03": abs(p27 - 0.27) <= 0.03,
    }
    elapsed = time.perf_counter() - t0
    assert not _verdict(acceptance_log, 7, "closure-strategy benchmark and statistics", checks, elapsed, 60.0)


# ---------------------------------------------------------------------------
# 8. Determinism
# ---------------------------------------------------------------------------

COMMANDS = [
    ["calibrate", "--out", "cal.json"],
    ["characterize", "step", "--out", "step.csv"],
    ["characterize", "overshoot", "--trials", "3", "--out", "over.csv"],
    ["characterize", "timing", "--trials", "3", "--out", "timing.csv"],
    ["plan", "55", "2", "--out", "plan_a.json"],
    ["plan", "40", "4", "qp", "--out", "plan_q.json"],
    ["bench", "--trials", "3", "--seed", "7", "--out", "bench"],
    ["wrench", "contacts.json", "--task-wrench", "0,0.1,0", "--out", "wrench.json"],
]


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_8_determinism(acceptance_log, tmp_path, monkeypatch):
    t0 = time.perf_counter()
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    digests, codes = [], []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        (d / "contacts.json").write_text(contact_set_to_json(antipodal_fixture()))
        monkeypatch.chdir(d)
        codes.extend(main(argv) for argv in COMMANDS)
        digests.append(_tree_digest(d))
    checks = {
        "every command exits 0": all(c == 0 for c in codes),
        f"{len(COMMANDS)} commands byte-identical on rerun": digests[0] == digests[1],
    }
    elapsed = time.perf_counter() - t0
    assert not _verdict(acceptance_log, 8, "byte-identical CLI reruns", checks, elapsed, None)

