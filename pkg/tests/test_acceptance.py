"""Acceptance suite: the twelve end-to-end criteria at their stated tolerances.

Each test prints one line ``[acceptance NN] PASS|FAIL <title>`` with the
measured values, then asserts. Run on its own with::

    pytest tests/test_acceptance.py -v
    python tests/test_acceptance.py
"""
import math
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from enkbf_lab.enkbf import Ensemble, Variant, check_deterministic_recursions, enkbf_step, \
    init_ensemble, run_enkbf
from enkbf_lab.errors import NumericalBlowUp
from enkbf_lab.experiments import ExperimentSpec, run_experiment
from enkbf_lab.kbf import run_kbf
from enkbf_lab.mlmc import MlConfig, ml_estimate
from enkbf_lab.model import Model, ModelGenSpec, make_ou_model
from enkbf_lab.paths import aggregate, aggregate_increments, simulate_truth_and_observations
from enkbf_lab.rng import derive_stream
from enkbf_lab.stats import fit_log2
from enkbf_lab.unbiased import UnbiasedConfig, make_pmf, unbiased_estimate, xi_increment

pytestmark = pytest.mark.slow


def report(capsys, number, title, checks, elapsed, limit):
    """Print the verdict line for one criterion and assert it."""
    ok = all(good for _, good, _ in checks) and elapsed < limit
    verdict = "PASS" if ok else "FAIL"
    line = f"[acceptance {number:02d}] {verdict} {title} ({elapsed:.1f} s, limit {limit:g} s)"
    details = [f"    {'ok  ' if good else 'FAIL'} {name}: {info}" for name, good, info in checks]
    with capsys.disabled():
        print("\n" + "\n".join([line, *details]))
    assert ok, "\n".join([line, *details])


def in_range(value, lo, hi):
    return lo <= value <= hi


def test_01_riccati_fixed_point(capsys):
    t0 = time.perf_counter()
    m = Model.scalar(-1.0, 1.0, 1.0, 1.0)
    rec = simulate_truth_and_observations(m, 20, 12, derive_stream(1))
    P = run_kbf(rec, 12, m).final.cov[0, 0]
    elapsed = time.perf_counter() - t0
    root = math.sqrt(2.0) - 1.0
    report(capsys, 1, "Riccati fixed point", [
        ("terminal covariance", abs(P - root) < 1e-3, f"{P:.6f} vs {root:.6f}")], elapsed, 1.0)


def test_02_recursion_identities(capsys):
    t0 = time.perf_counter()
    gen = derive_stream(2).generator()
    worst_mean, worst_cov = 0.0, 0.0
    for case in range(200):
        n = int(gen.integers(2, 17))
        d = int(gen.integers(1, 4))
        level = int(gen.integers(3, 8))
        m = make_ou_model(ModelGenSpec(d, d, seed=case))
        s = derive_stream(2, [case])
        e = Ensemble(s.child(0).normals((n, d)) * gen.uniform(0.1, 3) + gen.normal(0, 5, d),
                     level, Variant.DETERMINISTIC)
        mg, cg = check_deterministic_recursions(e, s.child(1).normals(d), m,
                                                s.child(2).normals((n, d)))
        worst_mean, worst_cov = max(worst_mean, mg), max(worst_cov, cg)
    elapsed = time.perf_counter() - t0
    report(capsys, 2, "mean/covariance recursion identities (200 cases)", [
        ("max mean gap < 1e-10", worst_mean < 1e-10, f"{worst_mean:.2e}"),
        ("max cov gap < 1e-9", worst_cov < 1e-9, f"{worst_cov:.2e}")], elapsed, 5.0)


def test_03_telescoping_identity(capsys):
    t0 = time.perf_counter()
    m = make_ou_model(ModelGenSpec(2, 2, seed=0))
    rec = simulate_truth_and_observations(m, 1, 6, derive_stream(3))
    gen = derive_stream(3, [1]).generator()
    worst = 0.0
    for i in range(100):
        variant = ("deterministic", "vanilla")[i % 2]
        cfg = UnbiasedConfig.default(variant, "st", l_max=3, p_max=4, N0=25, T=1)
        l, p = int(gen.integers(0, 4)), int(gen.integers(0, 5))
        res = xi_increment(l, p, cfg, rec, m, derive_stream(3, [2, i]))
        total = sum(res.xi_at(s) for s in range(p + 1))
        worst = max(worst, float(np.max(np.abs(total - res.partials[p]))))
    elapsed = time.perf_counter() - t0
    report(capsys, 3, "telescoping identity (100 draws)", [
        ("max |sum Xi - D_p| <= 1e-12", worst <= 1e-12, f"{worst:.2e}")], elapsed, 30.0)


def test_04_zero_gain_reduction(capsys):
    t0 = time.perf_counter()
    m = Model(A=[[-0.5, 0.2], [0.0, -1.0]], C=[[0.0, 0.0]], R1=np.eye(2), R2=[[1.0]],
              m0=[1.0, -1.0], P0=np.eye(2))
    rec = simulate_truth_and_observations(m, 25, 2, derive_stream(4))
    dY = aggregate_increments(rec, 2)
    s = derive_stream(5)
    ev = init_ensemble(10, m, 2, "vanilla", s.child(0))
    ed = init_ensemble(10, m, 2, "deterministic", s.child(0))
    identical = np.array_equal(ev.particles, ed.particles)
    for k in range(dY.shape[0]):
        ev = enkbf_step(ev, dY[k], m, s.child(1, k))
        ed = enkbf_step(ed, dY[k], m, s.child(1, k))
        identical &= np.array_equal(ev.particles, ed.particles)
    run_v = run_enkbf("vanilla", 10, 2, rec, m, derive_stream(6))[0].particles
    run_d = run_enkbf("deterministic", 10, 2, rec, m, derive_stream(6))[0].particles
    elapsed = time.perf_counter() - t0
    report(capsys, 4, "C=0 variants coincide", [
        ("bit-identical after each of 100 steps", bool(identical), f"{dY.shape[0]} steps"),
        ("bit-identical full runs", np.array_equal(run_v, run_d), "run_enkbf, 100 steps")],
        elapsed, 1.0)


def test_05_increment_conservation(capsys):
    t0 = time.perf_counter()
    exact = True
    for i in range(50):
        d = 1 + i % 3
        m = make_ou_model(ModelGenSpec(d, d, seed=i))
        rec = simulate_truth_and_observations(m, 1, 8, derive_stream(50, [i]))
        direct = aggregate_increments(rec, 2)
        staged = aggregate(aggregate_increments(rec, 5), 3)
        exact &= np.array_equal(direct, staged)
        exact &= np.array_equal(aggregate(aggregate(rec.dY, 3), 3), direct)
    elapsed = time.perf_counter() - t0
    report(capsys, 5, "aggregation associativity (50 records)", [
        ("levels 8 -> 5 -> 2 equals 8 -> 2", bool(exact), "exact equality")], elapsed, 1.0)


def test_06_second_moment_rates(capsys, tmp_path):
    t0 = time.perf_counter()
    res = run_experiment(ExperimentSpec("second-moment", out_dir=str(tmp_path)))
    elapsed = time.perf_counter() - t0
    checks = []
    for variant, fits in res.fits.items():
        for axis in ("l", "p"):
            s = fits[axis]["slope"]
            checks.append((f"{variant} slope vs {axis} in [-1.5, -0.6]", in_range(s, -1.5, -0.6),
                           f"{s:.3f} (r2 {fits[axis]['r_squared']:.3f})"))
    report(capsys, 6, "second-moment rates", checks, elapsed, 600.0)


def test_07_bias_rates(capsys, tmp_path):
    t0 = time.perf_counter()
    res = run_experiment(ExperimentSpec("bias", out_dir=str(tmp_path)))
    elapsed = time.perf_counter() - t0
    checks = []
    for variant, fits in res.fits.items():
        s = fits["dt"]["slope"]
        checks.append((f"{variant} slope vs dt in [0.65, 1.35]", in_range(s, 0.65, 1.35),
                       f"{s:.3f} (r2 {fits['dt']['r_squared']:.3f})"))
        s = fits["N"]["slope"]
        checks.append((f"{variant} slope vs p in [-1.35, -0.65]", in_range(s, -1.35, -0.65),
                       f"{s:.3f} (r2 {fits['N']['r_squared']:.3f})"))
    report(capsys, 7, "bias rates", checks, elapsed, 600.0)


def test_08_unbiasedness_against_oracle(capsys):
    t0 = time.perf_counter()
    m = Model.scalar(-1.0, 1.0, 1.0, 1.0, m0=2.0)
    rec = simulate_truth_and_observations(m, 1, 4, derive_stream(80))
    checks = []
    for code, variant in enumerate(("deterministic", "vanilla")):
        cfg = UnbiasedConfig(variant, "st", make_pmf("geometric", 3, "L", 4, 1, 0.5),
                             make_pmf("geometric", 3, "P", 4, 1, 0.5), N0=16, l_start=1, T=1,
                             M=5000)
        # exhaustive truncated telescope: per-cell means of Xi over 2000 replicates
        # blown-up draws are dropped and counted, the same rule the estimator applies
        oracle, oracle_var, dropped = 0.0, 0.0, 0
        for l in range(4):
            for p in range(4):
                vals = []
                for r in range(2000):
                    try:
                        vals.append(xi_increment(l, p, cfg, rec, m,
                                                 derive_stream(81, [code, l, p, r])).xi[0])
                    except NumericalBlowUp:
                        dropped += 1
                xs = np.array(vals)
                oracle += xs.mean()
                oracle_var += xs.var(ddof=1) / xs.size
        # the comparison only means something if the oracle itself is sharp
        rel = math.sqrt(oracle_var) / abs(oracle)
        checks.append((f"{variant} oracle relative SE < 0.02", rel < 0.02,
                       f"{rel:.4f}, {dropped} draws dropped"))
        for est, seed in (("st", 82 + 2 * code), ("cs", 83 + 2 * code)):
            res = unbiased_estimate(replace(cfg, estimator=est), rec, m, seed)
            se = math.sqrt(res.estimate_variance[0] + oracle_var)
            z = (res.estimate[0] - oracle) / se
            checks.append((f"{variant} {est} within 3 SE", abs(z) < 3.0,
                           f"{res.estimate[0]:.5f} vs oracle {oracle:.5f}, z {z:+.2f}, "
                           f"failures {res.failures}"))
    elapsed = time.perf_counter() - t0
    report(capsys, 8, "unbiasedness vs truncated-telescope oracle", checks, elapsed, 900.0)


def test_09_mse_vs_cost(capsys, tmp_path):
    t0 = time.perf_counter()
    res = run_experiment(ExperimentSpec("mse-vs-cost", out_dir=str(tmp_path)))
    elapsed = time.perf_counter() - t0
    checks = []
    for variant, fits in res.fits.items():
        s = fits["ml"]["slope"]
        checks.append((f"{variant} MLEnKBF slope in [-1.3, -0.8]", in_range(s, -1.3, -0.8),
                       f"{s:.3f} (r2 {fits['ml']['r_squared']:.3f})"))
        for est in ("st", "cs"):
            s = fits[est]["slope"]
            checks.append((f"{variant} {est} slope in [-1.35, -0.85]",
                           in_range(s, -1.35, -0.85),
                           f"{s:.3f} (r2 {fits[est]['r_squared']:.3f})"))
            comps = [c for c in res.comparisons if c["variant"] == variant
                     and c["unbiased"] == est]
            wins = sum(c["ml_cheaper"] for c in comps)
            ratios = ", ".join(f"{c['ratio']:.3g}" for c in comps)
            checks.append((f"{variant} MLEnKBF vs {est} cost ratio <= 1.25 in >= 3 of 4",
                           len(comps) == 4 and wins >= 3, f"{wins}/{len(comps)} [{ratios}]"))
    report(capsys, 9, "MSE-vs-cost slopes and matched-MSE cost", checks, elapsed, 1800.0)


def test_10_particle_consistency(capsys):
    t0 = time.perf_counter()
    m = make_ou_model(ModelGenSpec(2, 2, seed=0))
    level = 5
    rec = simulate_truth_and_observations(m, 10, level, derive_stream(100))
    Ns = [1 << k for k in range(6, 13)]
    checks = []
    for code, variant in enumerate(Variant):
        ref = run_kbf(rec, level, m, variant.form).final.mean
        errs = []
        for n in Ns:
            sq = [np.sum((run_enkbf(variant, n, level, rec, m,
                                    derive_stream(101, [code, n, r]))[1] - ref) ** 2)
                  for r in range(50)]
            errs.append(math.sqrt(np.mean(sq)))
        f = fit_log2(Ns, errs)
        checks.append((f"{variant.value} slope in [-0.7, -0.3]", in_range(f.slope, -0.7, -0.3),
                       f"{f.slope:.3f} (r2 {f.r_squared:.3f})"))
    elapsed = time.perf_counter() - t0
    report(capsys, 10, "EnKBF consistency in N", checks, elapsed, 300.0)


REPRO_SPECS = {
    "second-moment": dict(d_x=2, T=2, l_start=2, levels=(0, 2), p_levels=(0, 2), N0=8,
                          replicates=30),
    "bias": dict(d_x=2, T=2, l_start=2, levels=(2, 4), p_levels=(0, 2), N0=8, bias_n=64,
                 replicates=30, dt_replicates=30, n_records=2),
    "mse-vs-cost": dict(d_x=2, T=2, l_start=2, levels=(2, 3), l_max=1, p_max=2,
                        m_values=(4, 8), replicates=30),
}


def test_11_reproducibility(capsys, tmp_path):
    t0 = time.perf_counter()
    checks = []
    for kind, kw in REPRO_SPECS.items():
        dirs = []
        for label, threads in (("t1", 1), ("t4", 4), ("t2", 2), ("t1again", 1)):
            out = tmp_path / kind / label
            run_experiment(ExperimentSpec(kind, master_seed=11, threads=threads,
                                          out_dir=str(out), **kw))
            dirs.append(out)
        names = sorted(p.name for p in dirs[0].iterdir())
        same = all(sorted(p.name for p in d.iterdir()) == names and
                   all((d / n).read_bytes() == (dirs[0] / n).read_bytes() for n in names)
                   for d in dirs[1:])
        checks.append((f"{kind} outputs bit-identical", same,
                       f"{len(names)} files, threads 1/4/2/1"))
    elapsed = time.perf_counter() - t0
    report(capsys, 11, "reproducibility across thread counts", checks, elapsed, 120.0)


def test_12_d500_smoke(capsys):
    t0 = time.perf_counter()
    m = make_ou_model(ModelGenSpec(500, 500, block_size=10, seed=0))
    rec = simulate_truth_and_observations(m, 10, 4, derive_stream(120))
    checks = []
    for variant in ("deterministic", "vanilla"):
        cfg = MlConfig(3, 4, {3: 16, 4: 8}, variant, T=10)
        # explicit Euler needs the gain term P^N S dt to stay small; report its size at t = 0
        e0 = init_ensemble(16, m, 3, variant, derive_stream(121, [3, 0]))
        rho = max(abs(np.linalg.eigvals(np.cov(e0.particles.T) @ m.S * 2.0 ** -3)))
        try:
            res = ml_estimate(cfg, rec, m, derive_stream(121))
            ok = bool(np.all(np.isfinite(res.estimate)))
            info = f"cost {res.cost:g}, |estimate| {np.linalg.norm(res.estimate):.3f}"
        except NumericalBlowUp as exc:
            ok, info = False, f"NumericalBlowUp: {exc}"
        checks.append((f"{variant} ml_estimate completes", ok,
                       f"{info}; initial spectral radius of P^N S dt at level 3: {rho:.1f}"))
    elapsed = time.perf_counter() - t0
    report(capsys, 12, "d=500 multilevel smoke test", checks, elapsed, 120.0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
