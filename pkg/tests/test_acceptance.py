"""Full-budget acceptance runs, one test per headline claim.

Each test prints a single [PASS]/[FAIL] summary line (outside capture) so the
suite doubles as a verification report. Budgets are sized so every criterion
stays under two minutes with a single worker.
"""

import math
import subprocess
import sys
from pathlib import Path

import numpy as np

from pathcurv import cylinder as cyl
from pathcurv import geometry as geo
from pathcurv import inequalities as ineq
from pathcurv import martingale as mg
from pathcurv import metricspace as ms
from pathcurv import montecarlo as mc
from pathcurv import pathspace as ps
from pathcurv.cli import run_config_text

ROOT = Path(__file__).resolve().parents[1]

FLAT1 = geo.parse_model("euclidean:n=1,kf=0")
FLAT2 = geo.parse_model("euclidean:n=2,kf=0")
OU = geo.parse_model("ou:n=1,kf=1")
CIRCLE = geo.parse_model("circle:l=6.283185307179586")
SPHERE = geo.parse_model("sphere2:r=1")


def _start(model):
    if isinstance(model, geo.Sphere2):
        x = np.zeros(3)
        x[0] = model.radius
        return x
    return np.zeros(model.dim)


def _one(rows, inequality):
    found = [r for r in rows if r.inequality == inequality]
    assert len(found) == 1, "expected exactly one %r row" % inequality
    return found[0]


def _announce(capsys, num, ok, detail):
    with capsys.disabled():
        print("\n[%s] criterion %d: %s" % ("PASS" if ok else "FAIL", num, detail))
    assert ok, "criterion %d: %s" % (num, detail)


def test_ito_isometry_basis_curves(capsys):
    """E[I_h^2] equals the H1 norm of h for 8 basis curves on every model."""
    worst = 0.0
    ok = True
    for model in (FLAT2, OU, CIRCLE, SPHERE):
        rows = ineq.check_ito_isometry(model, _start(model), 1.0, count=8,
                                       steps=64, n_paths=100_000, seed=0,
                                       workers=1)
        iso = [r for r in rows if r.inequality == "ito-isometry"]
        assert len(iso) == 8
        ok &= all(r.verdict == "pass" for r in iso)
        worst = max(worst, max(abs(r.z_score) for r in iso))
    _announce(capsys, 1, ok,
              "Ito isometry, 8 curves x 4 models, worst |z| = %.2f" % worst)


def test_flat_frequency_unity(capsys):
    """N[I_h] = 1 on the weightless flat model for h(t) = t v."""
    rows = ineq.check_r6_frequency(FLAT1, np.zeros(1), (0.25, 1.0, 4.0),
                                   n_paths=100_000, seed=105, workers=1)
    unity = [r for r in rows if r.inequality == "frequency-flat-unity"
             and r.testfn == "I_h:t*v"]
    assert len(unity) == 3
    ok = all(r.verdict == "pass" for r in unity)
    worst = max(abs(r.z_score) for r in unity)
    _announce(capsys, 2, ok,
              "flat N[I_h] = 1 at T = 0.25, 1, 4, worst |z| = %.2f" % worst)


def test_frequency_slope_extracts_curvature(capsys):
    """Short-time slope of N recovers -1/2 times the curvature constant."""
    times = (0.05, 0.1, 0.2)
    rows_ou = ineq.check_r6_frequency(OU, np.zeros(1), times,
                                      n_paths=100_000, seed=106,
                                      slope_tol=0.15, workers=1)
    rows_sp = ineq.check_r6_frequency(SPHERE, _start(SPHERE), times,
                                      n_paths=30_000, seed=107,
                                      slope_tol=0.2, workers=1)
    s_ou = _one(rows_ou, "frequency-slope")
    s_sp = _one(rows_sp, "frequency-slope")
    ok = (s_ou.verdict == "pass" and abs(s_ou.lhs + 0.5) <= 0.15
          and s_sp.verdict == "pass" and abs(s_sp.lhs + 0.5) <= 0.2)
    _announce(capsys, 3, ok,
              "N slope: ou %.3f +- %.3f (want -0.5 +- 0.15), "
              "sphere %.3f +- %.3f (want -0.5 +- 0.2)"
              % (s_ou.lhs, s_ou.lhs_se, s_sp.lhs, s_sp.lhs_se))


def test_finite_frequency_kernel(capsys):
    """Kernel frequency N(t): exact values on ou, short-time slope on sphere."""
    rows_ou = ineq.check_finite_frequency(OU, geo.ScalarFamily("linear"),
                                          np.zeros(1), (0.1, 0.5, 1.0),
                                          n_paths=100_000, seed=108, workers=1)
    vals = [r for r in rows_ou if r.inequality == "frequency-value"]
    assert len(vals) == 3
    # quadratic growth of N on the sphere pulls the fitted slope up fast,
    # so the grid sits close to zero where the linear term dominates
    rows_sp = ineq.check_finite_frequency(SPHERE,
                                          geo.ScalarFamily("linear", axis=2),
                                          _start(SPHERE), (0.02, 0.05, 0.1),
                                          n_paths=400_000, seed=109,
                                          slope_tol=0.15, workers=1)
    s = _one(rows_sp, "frequency-slope")
    ok = (all(r.verdict == "pass" for r in vals)
          and s.verdict == "pass" and abs(s.lhs - 0.5) <= 0.15)
    worst = max(abs(r.z_score) for r in vals)
    _announce(capsys, 4, ok,
              "ou N(t) = t/(1-e^-t) worst |z| = %.2f; sphere slope "
              "%.3f +- %.3f (want 0.5 +- 0.15)" % (worst, s.lhs, s.lhs_se))


def test_gradient_envelopes_and_estimator_agreement(capsys):
    """Forward gradient envelopes at exact kappa, the flat equality case, and
    stochastic-representation vs central-difference gradients."""
    cases = [
        (FLAT2, "linear:t=1,coef=2"),
        (FLAT2, "twopoint:t1=0.5,t2=1"),
        (OU, "twopoint:t1=0.5,t2=1"),
        (CIRCLE, "sin:t=1,freq=1"),
        (SPHERE, "linear:t=0.75,axis=2"),
    ]
    rows = []
    for model, spec in cases:
        F = cyl.parse_function(model, spec)
        rows += ineq.check_r2(model, F, _start(model), n_paths=100_000,
                              seed=110, workers=1)
        rows += ineq.check_r3(model, F, _start(model), n_paths=100_000,
                              seed=110, workers=1)
    ok_chain = ineq.worst_verdict(rows) == "pass"

    eq_rows = ineq.check_r2(FLAT1, cyl.parse_function(FLAT1, "linear:t=1,coef=2"),
                            np.zeros(1), n_paths=2_000, seed=0, workers=1)
    eq = _one(eq_rows, "parallel-gradient")
    ok_eq = (eq.equality and eq.verdict == "pass"
             and abs(eq.margin) <= 3.0 * eq.se + 1e-12)

    worst_z = 0.0
    n_exact = 0
    ok_agree = True
    for model, n in ((FLAT2, 40_000), (OU, 40_000), (CIRCLE, 40_000),
                     (SPHERE, 10_000)):
        x = _start(model)
        for F in cyl.random_cylinders(model, 10, 1.0, 7):
            _, ppb = cyl.pushforward_gradient_bismut(model, F, x, n, 11,
                                                     "acc5/bis")
            _, ppf = cyl.pushforward_gradient_fd(model, F, x, n, 11,
                                                 "acc5/fd")
            for i in range(model.dim):
                a = mc.accumulate(ppb[:, i], 11, "acc5/bis")
                b = mc.accumulate(ppf[:, i], 11, "acc5/fd")
                floor = 1e-9 * (1.0 + abs(a.mean) + abs(b.mean))
                comp = mc.compare_eq(a, b, tol=floor)
                ok_agree = ok_agree and comp.verdict == "pass"
                if comp.se > floor:
                    worst_z = max(worst_z, abs(comp.z))
                else:
                    # both estimators deterministic for this component, so
                    # the difference is pure roundoff under the floor
                    n_exact += 1
    ok = ok_chain and ok_eq and ok_agree
    _announce(capsys, 5, ok,
              "envelopes %s on 4 models; flat equality margin %.1e; "
              "estimators agree on 10 random functions/model, worst "
              "stochastic |z| = %.2f (%d components at roundoff)"
              % (ineq.worst_verdict(rows), eq.margin, worst_z, n_exact))


def test_quadratic_variation_identity_and_envelopes(capsys):
    """Instantaneous quadratic variation against the heat-flow closed form,
    then the integrated and pointwise envelope verdicts on every model."""
    F = cyl.parse_function(FLAT1, "sin:t=1")
    part = ps.refine_partition(ps.Partition(F.times), [0.25, 0.5])
    ens = ps.sample_paths(FLAT1, np.zeros(1), part, 100_000, 5, "acc6/qv", 1)
    ok_vals = True
    zs = []
    for t in (0.25, 0.5):
        iqv = mg.infinitesimal_qv(FLAT1, F, ens, t, inner=64, seed=5,
                                  tag="acc6/qv", workers=1)
        # semigroup of sin decays by e^{-s/2}; squaring the flowed gradient
        # and flowing again gives e^{-(T-t)} (1 + e^{-2t} cos 2x) / 2
        closed = math.exp(-(1.0 - t)) * (1.0 + math.exp(-2.0 * t)) / 2.0
        z = (iqv.value - closed) / iqv.se
        zs.append(z)
        ok_vals = ok_vals and abs(z) <= 3.0

    sphere32 = geo.parse_model("sphere2:r=1,substeps=32")
    r45_cases = [
        (FLAT1, "sin:t=1", (0.25, 0.5), 100_000, 64, 118),
        (OU, "sin:t=1", (0.25, 0.5), 100_000, 64, 119),
        (CIRCLE, "sin:t=1,freq=1", (0.5,), 100_000, 64, 120),
        (sphere32, "linear:t=0.5,axis=2", (0.25,), 2_000, 2_500, 5),
    ]
    verdicts = []
    for model, spec, times, n, inner, seed in r45_cases:
        F2 = cyl.parse_function(model, spec)
        rows = ineq.check_r4_r5(model, F2, _start(model), times, n_paths=n,
                                inner=inner, seed=seed, workers=1)
        verdicts.append(ineq.worst_verdict(rows))
    ok = ok_vals and all(v == "pass" for v in verdicts)
    _announce(capsys, 6, ok,
              "flat d[F]/dt vs closed form z = %.2f, %.2f; "
              "envelope verdicts %s" % (zs[0], zs[1], verdicts))


def test_understated_curvature_is_rejected(capsys):
    """Feeding kappa = 0.5 to the ou model (true bound 1) must fail, with the
    deterministic margin e^-1 - e^-1/2 on the reverse envelope."""
    F = cyl.parse_function(OU, "linear:t=2")
    rows = ineq.check_r2(OU, F, np.zeros(1), kappa=0.5, n_paths=20_000,
                         seed=121, workers=1)
    rev = _one(rows, "parallel-gradient-reverse")
    frozen = math.exp(-1.0) - math.exp(-0.5)
    ok = (ineq.worst_verdict(rows) == "fail" and rev.verdict == "fail"
          and rev.se == 0.0 and abs(rev.margin - frozen) < 1e-12)
    _announce(capsys, 7, ok,
              "understated kappa rejected, margin %.6f (oracle %.6f), se = %g"
              % (rev.margin, frozen, rev.se))


def test_martingale_moment_growth(capsys):
    """E|F^{s+g} - F^s|^{2k} grows like g^k with Gaussian-style prefactors."""
    F = cyl.parse_function(FLAT1, "linear:t=2")
    ok = True
    details = []
    for k in (1, 2):
        rows = ineq.check_martingale_moments(FLAT1, F, np.zeros(1), k, 0.5,
                                             (0.05, 0.1, 0.2, 0.4),
                                             n_paths=30_000, inner=1_000,
                                             seed=2, workers=1)
        exp_row = _one(rows, "moment-exponent")
        ok = (ok and ineq.worst_verdict(rows) == "pass"
              and abs(exp_row.lhs - k) <= 0.1 * k)
        details.append("k=%d exponent %.3f" % (k, exp_row.lhs))
    _announce(capsys, 8, ok,
              "moment growth %s (want 1 +- 0.1, 2 +- 0.2), prefactors bounded"
              % ", ".join(details))


def test_measure_change_identities(capsys):
    """E[Z] = 1 under the free law and the importance identity for u = x^2."""
    rows = []
    for x0 in (0.0, 2.0):
        rows += ineq.check_girsanov(OU, np.array([x0]), 1.0,
                                    n_paths=100_000, seed=3, workers=1)
    assert len(rows) == 4
    ok = ineq.worst_verdict(rows) == "pass"
    worst = max(abs(r.z_score) for r in rows)
    _announce(capsys, 9, ok,
              "measure change on ou at T = 1, starts 0 and 2, worst |z| = %.2f"
              % worst)


def test_log_sobolev_chain(capsys):
    """Entropy <= cosh-weighted middle <= outer energy chain, plus the
    Gaussian extremal whose entropy-to-energy ratio must stay above 0.95."""
    rows_f = ineq.check_r7_logsob(FLAT1, np.zeros(1), 1.0, (0.1, 0.3),
                                  n_paths=100_000, seed=4, lam=0.1, workers=1)
    rows_o = ineq.check_r7_logsob(OU, np.zeros(1), 1.0, (0.1, 0.3),
                                  n_paths=100_000, seed=4, workers=1)
    sharp = _one(rows_f, "logsob-sharpness")
    n_inc = sum(r.verdict == "inconclusive" for r in rows_o)
    ok = (ineq.worst_verdict(rows_f) == "pass"
          and all(r.verdict != "fail" for r in rows_o)
          and sharp.verdict == "pass"
          and sharp.rhs >= 0.95 - 3.0 * sharp.rhs_se)
    _announce(capsys, 10, ok,
              "chain holds on flat and ou (%d ou rows inside noise); "
              "extremal ratio %.4f >= 0.95" % (n_inc, sharp.rhs))


def test_cone_holonomy_defects_and_flat_agreement(capsys, tmp_path):
    """Holonomy angles, parallelogram defects, parallel-norm ratios, the
    2 pi cone against the plane, and the branching-probe report."""
    ok_h = True
    for ell in (math.pi, 2 * math.pi, 3 * math.pi):
        hol = ms.cone_holonomy(ms.ConeSpace(ell), loops=1)
        ok_h = ok_h and abs(ms.angle_diff(hol, 2 * math.pi - ell)) <= 1e-9

    rng = np.random.default_rng(11)
    base = rng.normal(size=(32, 2))
    u = rng.normal(size=(32, 2))
    v = rng.normal(size=(32, 2))
    quad = np.stack([base, base + u, base + u + v, base + v], axis=1)
    rep = ms.epsilon_parallelogram_defect(FLAT2, quad)
    ok_flat = (float(np.max(np.abs(rep.e))) <= 1e-9
               and float(np.max(rep.eps)) <= 1e-9)

    scales = (1e-2, 5e-3, 2.5e-3)
    geo_s = ms.geodesic_between(SPHERE, np.array([1.0, 0.0, 0.0]),
                                np.array([0.0, 1.0, 0.0]),
                                ps.Partition.uniform(1.0, 16))
    var_s = ms.build_parallel_variation(SPHERE, geo_s,
                                        np.array([0.0, 0.0, 1.0]), scales)
    cone_pi = ms.ConeSpace(math.pi)
    geo_c = ms.geodesic_between(cone_pi, cone_pi.point(1.0, 0.0),
                                cone_pi.point(1.2, 1.0),
                                ps.Partition.uniform(1.0, 16))
    var_c = ms.build_parallel_variation(cone_pi, geo_c, np.array([1.0, 0.0]),
                                        scales)
    ratios = np.concatenate([ms.parallel_norm_check(var_s),
                             ms.parallel_norm_check(var_c)])
    ok_norm = bool(np.all(ratios < 1e-3))

    cone_flat = ms.ConeSpace(2 * math.pi)
    worst = 0.0
    for _ in range(64):
        r1, r2 = rng.uniform(0.2, 2.0, size=2)
        t1, t2 = rng.uniform(0.0, 2 * math.pi, size=2)
        p, q = cone_flat.point(r1, t1), cone_flat.point(r2, t2)
        cp = np.array([r1 * math.cos(t1), r1 * math.sin(t1)])
        cq = np.array([r2 * math.cos(t2), r2 * math.sin(t2)])
        worst = max(worst, abs(float(cone_flat.distance(p, q))
                               - float(np.linalg.norm(cp - cq))))
        mid = ms.geodesic_between(cone_flat, p, q,
                                  ps.Partition.uniform(1.0, 2)).vertices[1]
        cm = np.array([mid[0] * math.cos(mid[1]), mid[0] * math.sin(mid[1])])
        worst = max(worst, float(np.linalg.norm(cm - 0.5 * (cp + cq))))
        w = rng.normal(size=2)
        got = cone_flat.transport(p[None, :], q[None, :], w[None, :])[0]
        rot1 = np.array([[math.cos(t1), -math.sin(t1)],
                         [math.sin(t1), math.cos(t1)]])
        rot2 = np.array([[math.cos(t2), -math.sin(t2)],
                         [math.sin(t2), math.cos(t2)]])
        want = rot2.T @ (rot1 @ w)
        worst = max(worst, float(np.max(np.abs(got - want))))
    ok_shared = worst <= 1e-9

    text = (ROOT / "configs" / "acceptance" / "br-probe.conf").read_text()
    code, manifest = run_config_text(text, 1,
                                     output_override=str(tmp_path / "br.csv"),
                                     echo=False)
    report = (tmp_path / "br.csv").read_text()
    ok_probe = code != 2 and "parallel-slope" in report

    ok = ok_h and ok_flat and ok_norm and ok_shared and ok_probe
    _announce(capsys, 11, ok,
              "holonomy to 1e-9; flat defects %.1e; norm ratios < %.1e; "
              "2pi cone vs plane to %.1e; branching probe emitted its report"
              % (float(np.max(rep.eps)), float(ratios.max()), worst))


def test_suite_reproducible_across_worker_counts(capsys, tmp_path):
    """The reduced replica suite produces bit-identical CSVs at 1 and 8
    workers, run from separate working directories."""
    suite_dir = ROOT / "configs" / "suite-small"
    results = {}
    for w in (1, 8):
        cwd = tmp_path / ("w%d" % w)
        cwd.mkdir()
        proc = subprocess.run(
            [sys.executable, "-m", "pathcurv.cli", "suite", str(suite_dir),
             "--workers", str(w)],
            cwd=cwd, capture_output=True, text=True, timeout=300)
        results[w] = (proc.returncode, sorted((cwd / "out").glob("*.csv")))
    code1, csvs1 = results[1]
    code8, csvs8 = results[8]
    same_names = [p.name for p in csvs1] == [p.name for p in csvs8]
    identical = same_names and all(a.read_bytes() == b.read_bytes()
                                   for a, b in zip(csvs1, csvs8))
    ok = code1 == 0 and code8 == 0 and len(csvs1) == 14 and identical
    _announce(capsys, 12, ok,
              "%d result tables bit-identical across workers 1 vs 8 "
              "(exits %d, %d)" % (len(csvs1), code1, code8))
