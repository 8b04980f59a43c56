"""End-to-end acceptance checks, one test per criterion.

Each test records a single pass/fail line that is echoed in the terminal
summary.  Criteria 5, 6 and 8 share one cached experiment on the default
synthetic dataset (several minutes on one CPU).
"""

import hashlib
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy import integrate

from conftest import record_acceptance
from sacloc import autodiff as ad
from sacloc.cli import run
from sacloc.datagen import SynthConfig, load_dataset
from sacloc.experiment import read_results_csv
from sacloc.gradcheck import run_suites
from sacloc.metrics import Segment, interpolated_ap, students_t, temporal_iou
from sacloc.ot import AssignmentInstance, SinkhornConfig, entropic_gap_bound, exact_oracle, marginal_residuals, sinkhorn_solve
from sacloc.sac import action_aware_pool, fnorm_loss, sac_loss, smoothness_loss

EPS = 1e-3
SIZES = (4, 8, 16, 64, 128)
ALL_MODES = ("none", "predicted", "modality_only", "frame_only", "composed", "sac")


def acceptance_instances():
    """200 instances, 40 per size, costs uniform in [0, 1], marginals normalized to mass T."""
    rng = np.random.default_rng(20240611)
    out = []
    for T in SIZES:
        for _ in range(40):
            S = rng.uniform(0, 1, (2, T))
            a_m = rng.uniform(0.05, 1, 2)
            a_f = rng.uniform(0.05, 1, T)
            out.append(AssignmentInstance(S, a_m * T / a_m.sum(), a_f * T / a_f.sum()))
    return out


# ----------------------------------------------------------------------
# 1, 2: transport solver


def test_criterion_1_sinkhorn_feasibility():
    instances = acceptance_instances()
    t0 = time.perf_counter()
    worst = 0.0
    for inst in instances:
        res = sinkhorn_solve(inst, SinkhornConfig(epsilon=EPS, iterations=50))
        worst = max(worst, *marginal_residuals(res, inst))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 5.0
    record_acceptance(1, "sinkhorn feasibility", ok,
                      f"max residual {worst:.3g} (target < 1e-3), {elapsed:.2f}s (target < 5s)")
    assert ok


def test_criterion_2_oracle_gap():
    cases = [(inst, None) for inst in acceptance_instances() if inst.T <= 16]
    cases.append((AssignmentInstance([[0, 1], [1, 0]], [1, 1], [1, 1]), 0.0))
    cases.append((AssignmentInstance(np.array([[1, 2, 3], [3, 2, 1]]) / 3, [2, 1], [1, 1, 1]), 4 / 3))
    violations, worst_ratio = 0, 0.0
    named_ok = True
    for inst, expected in cases:
        _, exact = exact_oracle(inst)
        if expected is not None:
            named_ok &= abs(exact - expected) < 1e-12
        loss = sinkhorn_solve(inst, SinkhornConfig(epsilon=EPS, iterations=50)).loss
        bound = entropic_gap_bound(inst.T, EPS) + 1e-6
        gap = abs(loss - exact)
        worst_ratio = max(worst_ratio, gap / bound)
        violations += gap > bound
    ok = violations == 0 and named_ok
    record_acceptance(2, "oracle gap", ok,
                      f"{violations}/{len(cases)} instances exceed eps*T*ln(2T)+1e-6, worst gap/bound {worst_ratio:.2f}; "
                      f"named oracle values {'match' if named_ok else 'differ'}")
    assert ok


# ----------------------------------------------------------------------
# 3: gradients


def test_criterion_3_gradient_suite():
    t0 = time.perf_counter()
    results = run_suites(range(20), ("ot", "sac"))
    elapsed = time.perf_counter() - t0
    failed = [r for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    ok = not failed and elapsed < 60.0 and len(results) == 40
    record_acceptance(3, "gradient suite", ok,
                      f"{len(results) - len(failed)}/{len(results)} seed checks pass, max rel err {worst:.2e}, "
                      f"{elapsed:.1f}s (target < 60s)")
    assert ok


# ----------------------------------------------------------------------
# 4: formula oracles


def _pool_direct(F, k):
    T = len(F[0])
    n = max(1, math.floor(T * k + 1e-9))
    order = sorted(range(T), key=lambda t: (-math.hypot(*[row[t] for row in F]), t))[:n]
    return [sum(row[t] for t in order) / n for row in F]


def _smooth_direct(S, eta):
    T = len(S[0])
    top = [max(S[0][t], S[1][t]) for t in range(T)]
    d = sorted(top[t + 1] - top[t] for t in range(T - 1))
    n = max(1, min(math.floor(T * eta + 1e-9), T - 1))
    return -math.log(max(1 - sum(d[:n]) / n, 1e-8))


def _fnorm_direct(S):
    return -math.sqrt(sum(x * x for row in S for x in row)) / (2 * len(S[0]))


def _ap_direct(flags):
    p = [Fraction(sum(flags[:i + 1]), i + 1) for i in range(len(flags))]
    return float(sum(max(p[j:]) for j in range(len(p))) / len(p))


def _t_direct(a, b):
    n1, n2 = len(a), len(b)
    m1, m2 = sum(a) / n1, sum(b) / n2
    v1 = sum((x - m1) ** 2 for x in a) / (n1 - 1)
    v2 = sum((x - m2) ** 2 for x in b) / (n2 - 1)
    sp = math.sqrt(((n1 - 1) * v1 + (n2 - 1) * v2) / (n1 + n2 - 2))
    t = (m1 - m2) / (sp * math.sqrt(1 / n1 + 1 / n2))
    dof = n1 + n2 - 2
    c = math.gamma((dof + 1) / 2) / (math.sqrt(dof * math.pi) * math.gamma(dof / 2))
    tail, _ = integrate.quad(lambda x: c * (1 + x * x / dof) ** (-(dof + 1) / 2), abs(t), math.inf,
                             epsabs=1e-13, epsrel=1e-12)
    return t, 2 * tail


def test_criterion_4_formula_oracles():
    tol = 1e-6
    g = ad.Graph()
    rng = np.random.default_rng(4)
    errors = {}

    def err(name, got, want):
        errors[name] = max(errors.get(name, 0.0), float(np.max(np.abs(np.asarray(got) - np.asarray(want)))))

    F = np.array([[3.0, 0, 0, 1], [0, 1, 4, 0]])
    err("pool", action_aware_pool(g.constant(F), 0.5).value, [1.5, 2.0])
    for _ in range(20):
        F = rng.normal(size=(5, int(rng.integers(2, 40))))
        k = float(rng.uniform(0.05, 1))
        err("pool", action_aware_pool(g.constant(F), k).value, _pool_direct(F.tolist(), k))

    S = np.array([[0.1, 0.1, 0.1, 0.9], [0.0, 0.05, 0.0, 0.2]])
    err("smooth", smoothness_loss(g.constant(S), 0.8).value, -math.log(1 - 0.8 / 3))  # 0.3102
    err("smooth", smoothness_loss(g.constant(S), 0.8).value, _smooth_direct(S.tolist(), 0.8))
    for _ in range(20):
        S = rng.uniform(size=(2, int(rng.integers(2, 70))))
        err("smooth", smoothness_loss(g.constant(S), 0.8).value, _smooth_direct(S.tolist(), 0.8))

    err("fnorm", fnorm_loss(g.constant(np.ones((2, 3)))).value, -math.sqrt(6) / 6)  # -0.40825
    for _ in range(20):
        S = rng.uniform(size=(2, int(rng.integers(1, 70))))
        err("fnorm", fnorm_loss(g.constant(S)).value, _fnorm_direct(S.tolist()))

    err("sac_loss", sac_loss(g.constant(1.0), g.constant(0.2), g.constant(-0.3)).total.value, 1.017)
    for _ in range(20):
        o, s, f = rng.uniform(-5, 5, 3)
        err("sac_loss", sac_loss(g.constant(o), g.constant(s), g.constant(f)).total.value, o + 0.1 * s + 0.01 * f)

    err("temporal_iou", temporal_iou(Segment(0, 9, 1), Segment(5, 14, 1)), 1 / 3)
    for _ in range(50):
        a0, b0 = rng.integers(0, 50, 2)
        a1, b1 = a0 + rng.integers(0, 20), b0 + rng.integers(0, 20)
        fa, fb = set(range(a0, a1 + 1)), set(range(b0, b1 + 1))
        err("temporal_iou", temporal_iou(Segment(a0, a1, 1), Segment(b0, b1, 1)), len(fa & fb) / len(fa | fb))

    err("interpolated_ap", interpolated_ap([1, 0, 1]), 7 / 9)
    for _ in range(50):
        flags = rng.integers(0, 2, int(rng.integers(1, 30))).tolist()
        err("interpolated_ap", interpolated_ap(flags), _ap_direct(flags))

    rep = students_t([1, 2, 3], [2, 3, 4])
    err("students_t", rep.t, -1 / math.sqrt(2 / 3))  # -1.2247
    for _ in range(20):
        a, b = rng.normal(0, 1, int(rng.integers(2, 10))), rng.normal(0.5, 2, int(rng.integers(2, 10)))
        rep = students_t(a, b)
        t, p = _t_direct(a.tolist(), b.tolist())
        err("students_t", [rep.t, rep.p], [t, p])

    bad = {k: v for k, v in errors.items() if v > tol}
    ok = not bad and len(errors) == 7
    worst = max(errors, key=errors.get)
    record_acceptance(4, "formula oracles", ok,
                      f"{7 - len(bad)}/7 formulas within tolerance; largest deviation {errors[worst]:.1e} ({worst})")
    assert ok


# ----------------------------------------------------------------------
# 5, 6, 8: the end-to-end experiment


@pytest.fixture(scope="module")
def default_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("default_data")
    assert run(["synth", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def experiment(default_data, tmp_path_factory):
    main = tmp_path_factory.mktemp("exp_main")
    t0 = time.perf_counter()
    code_main = run(["experiment", "--data", str(default_data), "--out", str(main),
                     "--modes", "none", "sac", "--seeds", *map(str, range(6))])
    t_main = time.perf_counter() - t0
    ablation = tmp_path_factory.mktemp("exp_ablation")
    code_abl = run(["experiment", "--data", str(default_data), "--out", str(ablation),
                    "--modes", "predicted", "modality_only", "frame_only", "composed", "--seeds", "0",
                    "--no-figures"])
    return {"data": default_data, "main": main, "ablation": ablation, "codes": (code_main, code_abl),
            "seconds": t_main}


@pytest.mark.slow
def test_criterion_5_end_to_end_improvement(experiment):
    rows = [r for r in read_results_csv(experiment["main"] / "results.csv") if abs(r["iou"] - 0.5) < 1e-9]
    sac = [r["map"] for r in rows if r["method"] == "sac"]
    none = [r["map"] for r in rows if r["method"] == "none"]
    rep = students_t(sac, none)
    per_seed = experiment["seconds"] / 6
    ok = (experiment["codes"][0] == 0 and len(sac) == len(none) == 6
          and np.mean(sac) > np.mean(none) and rep.p < 0.05 and per_seed < 600)
    record_acceptance(5, "end-to-end improvement", ok,
                      f"mAP@0.5 sac {np.mean(sac):.2f} vs none {np.mean(none):.2f} over 6 seeds, "
                      f"t={rep.t:.2f}, p={rep.p:.2g}; {per_seed:.0f}s per seed pair")
    assert ok


@pytest.mark.slow
def test_criterion_6_modality_preference(experiment):
    synth = SynthConfig()
    labels = {r.id: r.label for r in load_dataset(experiment["data"], "test")}
    motion, appearance = [], []
    lines = (experiment["main"] / "modality_attention.csv").read_text().strip().splitlines()[1:]
    for line in lines:
        method, _, vid, app, mot = line.split(",")
        if method != "sac":
            continue
        if synth.modality_preference[labels[vid]] == "motion":
            motion.append(float(mot))
        else:
            appearance.append(float(app))
    ok = bool(motion and appearance) and np.mean(motion) > 0.5 and np.mean(appearance) > 0.5
    record_acceptance(6, "modality preference", ok,
                      f"mean motion weight on motion videos {np.mean(motion):.3f}, "
                      f"mean appearance weight on appearance videos {np.mean(appearance):.3f} (targets > 0.5)")
    assert ok


def _digest(root, skip=("run.log",)):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.mark.slow
def test_criterion_7_determinism(default_data, tmp_path):
    ok = True
    for name in ("a", "b"):
        ok &= run(["synth", "--out", str(tmp_path / name / "data")]) == 0
        ok &= run(["train", "--data", str(default_data), "--out", str(tmp_path / name / "run"),
                   "--epochs", "1", "--mode", "sac", "--seed", "3"]) == 0
        ok &= run(["eval", "--data", str(default_data), "--run", str(tmp_path / name / "run")]) == 0
    same = {part: _digest(tmp_path / "a" / part) == _digest(tmp_path / "b" / part) for part in ("data", "run")}
    same["data vs fixture"] = _digest(tmp_path / "a" / "data") == _digest(default_data)
    ok = ok and all(same.values())
    record_acceptance(7, "determinism", ok,
                      ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok


@pytest.mark.slow
def test_criterion_8_ablation_scaffold(experiment):
    rows = (read_results_csv(experiment["main"] / "results.csv")
            + read_results_csv(experiment["ablation"] / "results.csv"))
    modes = {r["method"] for r in rows}
    complete = all(sum(r["method"] == m for r in rows) % 7 == 0 for m in ALL_MODES)
    finite = all(math.isfinite(r["map"]) for r in rows)
    losses_finite = True
    for root in (experiment["main"], experiment["ablation"]):
        for log in root.glob("runs/*/loss_log.csv"):
            vals = [float(x) for line in log.read_text().splitlines()[1:] for x in line.split(",")[1:]]
            losses_finite &= all(math.isfinite(v) for v in vals)
    ok = experiment["codes"] == (0, 0) and modes == set(ALL_MODES) and complete and finite and losses_finite
    by_mode = {m: np.mean([r["map"] for r in rows if r["method"] == m and r["iou"] == 0.5]) for m in ALL_MODES}
    record_acceptance(8, "ablation scaffold", ok,
                      f"{len(modes)}/6 modes trained without NaN, {len(rows)} CSV rows; mAP@0.5 "
                      + " ".join(f"{m}={v:.1f}" for m, v in by_mode.items()))
    assert ok
