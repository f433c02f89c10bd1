"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records a one-line verdict ("C<n> PASS|FAIL: ...") that the
conftest hook prints in the terminal summary, then asserts it.
"""

import math
import time

import jax.numpy as jnp
import numpy as np
import pytest

from commap.cli import main
from commap.data import (
    MissionConfig, SplitSpec, make_splits, preset, regression_view, simulate_mission,
)
from commap.evaluation import (
    EvalConfig, compare_methods, fit_method, nll_metric, predict_method, ratio_metric,
)
from commap.kernel import KernelParams
from commap.laplace_gpc import GpcConfig, fit_gpc_laplace
from commap.noisy_input import NiConfig, elbo_nn, init_net, ni_objective, ni_params
from commap.optim import finite_difference_check, gh_nodes, grad_elbo
from commap.regression import GprConfig, fit_gpr, fit_svgpr
from commap.svgpc import (
    LatentMoments, SparseConfig, classifier_params, expected_loglik_gh, fit_svgpc,
    svgpc_objective,
)

from oracles import quad_expected_loglik, two_event_log_joint


@pytest.fixture()
def verdict(record_property):
    def record(n, ok, detail):
        line = f"C{n} {'PASS' if ok else 'FAIL'}: {detail}"
        record_property("acceptance", line)
        print(line)
        assert ok, line
    return record


def test_c1_quadrature_oracle(verdict):
    worst, where = 0.0, None
    elapsed = 0.0
    for mu in (-4, -2, 0, 1, 2, 4):
        for sigma in (0.1, 0.5, 1, 2, 3):
            for y in (0, 1):
                t = time.perf_counter()
                got = expected_loglik_gh(LatentMoments(float(mu), float(sigma)), y, 20)
                elapsed += time.perf_counter() - t
                err = abs(got - quad_expected_loglik(mu, sigma, y))
                if err > worst:
                    worst, where = err, (mu, sigma, y)
    ok = worst <= 1e-6 and elapsed < 1.0
    verdict(1, ok, f"max |GH20 - quad| = {worst:.2e} at (mu, sigma, y) = {where}, "
                   f"tolerance 1e-6; runtime {elapsed:.3f} s")


def test_c2_gradient_contract(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(8, 4)), (np.arange(8) % 2).astype(float)
    nodes, weights = gh_nodes(20)

    cfg = SparseConfig()
    p = classifier_params(X[:2].copy(), cfg, 4)
    p = p.with_values(p.values + 0.1 * rng.normal(size=len(p)))
    obj = svgpc_objective(p, 8, nodes, weights, cfg.jitter)
    f = lambda flat: obj(flat, jnp.asarray(X), jnp.asarray(y))
    rel_sv, _ = finite_difference_check(f, p.values, grad_elbo(f, p))

    V = rng.uniform(0.05, 0.3, (8, 4))
    ncfg = NiConfig(hidden_units=5)
    q = ni_params(X[:2].copy(), init_net(X, y, V, ncfg, 4), ncfg, 4)
    nobj = ni_objective(q, 8, nodes, weights, ncfg.jitter, ncfg.prior_sd**2, False)
    eps = jnp.asarray(rng.standard_normal((1, 8, 4)))
    g = lambda flat: nobj(flat, jnp.asarray(X), jnp.asarray(y), jnp.asarray(V), eps)
    rel_ni, _ = finite_difference_check(g, q.values, grad_elbo(g, q))
    elapsed = time.perf_counter() - t0
    ok = rel_sv.max() <= 1e-4 and rel_ni.max() <= 1e-4 and elapsed < 10
    verdict(2, ok, f"max relative error elbo_svgpc {rel_sv.max():.1e}, elbo_nn {rel_ni.max():.1e} "
                   f"(tolerance 1e-4); runtime {elapsed:.1f} s")


def test_c3_bound(verdict):
    t0 = time.perf_counter()
    X, y, V = np.array([[-0.4], [0.6]]), np.array([1.0, 0.0]), np.array([[0.2], [0.3]])
    log_joint = two_event_log_joint(X[:, 0], y, V[:, 0], 1.0, 1.0, 0.01, 9.0)
    cfg = NiConfig()
    params = ni_params(np.array([[-0.5], [0.5]]), init_net(X, y, V, cfg, 1), cfg, 1)
    elbo = elbo_nn(X, y, V, params, cfg, samples=20_000, seed=0)
    gap = log_joint - elbo
    elapsed = time.perf_counter() - t0
    ok = gap > 1e-3 and elapsed < 60
    verdict(3, ok, f"ELBO_NN {elbo:.5f} <= log p(y, x~) {log_joint:.5f}, gap {gap:.4f} "
                   f"(oracle tolerance 1e-3); runtime {elapsed:.1f} s")


def test_c4_exactness(verdict):
    ds = simulate_mission(MissionConfig(n_events=60, success_offset=5.0), seed=0)
    X, snr = regression_view(ds)
    m = fit_gpr(X, snr, GprConfig(optimize=False), KernelParams(np.ones(4), 1.0, 0.0))
    interp = np.max(np.abs(m.predict(X).mean - snr))
    probe = simulate_mission(MissionConfig(n_events=100), seed=1).X
    var = m.predict(probe).variance
    prior = 1.0 * m.standardizer.y_sd**2
    ok = interp <= 1e-8 and np.all(var <= prior * (1 + 1e-12)) and np.all(var >= 0)
    verdict(4, ok, f"max interpolation error {interp:.1e} dB (tolerance 1e-8); "
                   f"max variance / prior {var.max() / prior:.6f} on 100 probes")


def test_c5_sparse_dense_consistency(verdict):
    fixed = dict(inducing_fraction=1.0, learn_hyperparameters=False, learn_inducing=False)
    t0 = time.perf_counter()
    ds = simulate_mission(MissionConfig(n_events=100, success_offset=1.0,
                                        success_range_slope=0.003), seed=0)
    X, y = ds.X, ds.labels
    Q = simulate_mission(MissionConfig(n_events=100), seed=1).X
    gpc = fit_gpc_laplace(X, y, GpcConfig(optimize=False), KernelParams(np.ones(4), 1.0, 1e-2))
    sv = fit_svgpc(X, y, SparseConfig(batch_size=100, **fixed), Z=X)
    mad = np.mean(np.abs(sv.predict(Q).probability - gpc.predict(Q).probability))
    t1 = time.perf_counter()

    reg = simulate_mission(MissionConfig(n_events=120, success_offset=5.0), seed=2)
    Xr, yr = regression_view(reg)
    Xr, yr = Xr[:50], yr[:50]
    gpr = fit_gpr(Xr, yr, GprConfig(optimize=False), KernelParams(np.ones(4), 1.0, 0.1))
    svr = fit_svgpr(Xr, yr, SparseConfig(epochs=10_000, batch_size=50, **fixed), Z=Xr)
    Qr = reg.X[50:100]
    rms = math.sqrt(np.mean((svr.predict(Qr).mean - gpr.predict(Qr).mean) ** 2))
    t2 = time.perf_counter()
    ok = mad <= 0.05 and rms <= 0.05 and t1 - t0 < 120 and t2 - t1 < 120
    verdict(5, ok, f"SVGPC vs GPC mean |dp| {mad:.4f} (tol 0.05, {t1 - t0:.0f} s); "
                   f"SVGPR vs GPR RMS {rms:.4f} dB (tol 0.05, {t2 - t1:.0f} s)")


def test_c6_classification_vs_regression(verdict):
    t0 = time.perf_counter()
    ds = simulate_mission(preset("mixed"), seed=0)
    cmp = compare_methods(ds, SplitSpec(20, seed=0), ["GPR", "SVGPR", "GPC", "SVGPC"])
    r = cmp.reports
    gpr = r["GPR"].mean_ratio(r["GPR"].best_threshold)
    svgpr = r["SVGPR"].mean_ratio(r["SVGPR"].best_threshold)
    gpc, svgpc = r["GPC"].mean_ratio(), r["SVGPC"].mean_ratio()
    elapsed = time.perf_counter() - t0
    ok = gpc >= gpr - 0.01 and svgpc >= svgpr - 0.01 and elapsed < 15 * 60
    verdict(6, ok, f"GPC {gpc:.4f} vs best-threshold GPR {gpr:.4f} "
                   f"({r['GPR'].best_threshold:g} dB); SVGPC {svgpc:.4f} vs SVGPR {svgpr:.4f} "
                   f"({r['SVGPR'].best_threshold:g} dB); runtime {elapsed / 60:.1f} min")


def test_c7_noisy_inputs(verdict):
    t0 = time.perf_counter()
    rows = []
    for s in range(10):
        ds = simulate_mission(preset("mixed"), seed=s)
        train, val = make_splits(ds, SplitSpec(1, seed=s))[0]
        cfg = EvalConfig().with_seed(s)
        row = []
        for m in ("SVGPC", "NI-NN"):
            p = predict_method(m, fit_method(m, ds, train, cfg), ds, val).value
            row += [nll_metric(p, ds.labels[val]), ratio_metric(p, ds.labels[val], 0.5)]
        rows.append(row)
    sv_nll, sv_ratio, ni_nll, ni_ratio = np.mean(rows, axis=0)
    elapsed = time.perf_counter() - t0
    ok = ni_nll <= sv_nll and ni_ratio >= sv_ratio - 0.01 and elapsed < 30 * 60
    verdict(7, ok, f"NLL NI-NN {ni_nll:.4f} vs SVGPC {sv_nll:.4f}; ratio NI-NN {ni_ratio:.4f} "
                   f"vs SVGPC {sv_ratio:.4f} - 0.01; 10 seeds, runtime {elapsed / 60:.1f} min")


def test_c8_threshold_fragility(verdict):
    ds = simulate_mission(preset("favourable"), seed=0)
    counts = ds.class_counts()
    cmp = compare_methods(ds, SplitSpec(20, seed=0), ["GPR", "GPC"])
    gpr, gpc = cmp.reports["GPR"], cmp.reports["GPC"]
    gain = gpr.mean_ratio(gpr.best_threshold) - gpr.mean_ratio(9.8)
    gpc_gap = gpc.mean_ratio(gpc.best_threshold) - gpc.mean_ratio(0.5)
    ok = gpr.best_threshold < 9.8 and gain >= 0.1 and gpc_gap <= 0.05
    verdict(8, ok, f"class counts {counts[1]}/{counts[0]}; GPR ratio at {gpr.best_threshold:g} dB "
                   f"exceeds 9.8 dB by {gain:.4f} (need >= 0.1); GPC best "
                   f"({gpc.best_threshold:g}) minus 0.5 = {gpc_gap:.4f} (need <= 0.05)")


def test_c9_determinism(verdict, tmp_path):
    def pipeline(out):
        fast = ["--seed", "5", "--out-dir", str(out)]
        train = ["--epochs", "30", "--predict-samples", "20"]
        assert main(["simulate", "--n-events", "80", *fast]) == 0
        data = str(out / "events.csv")
        for m in ("gpr", "svgpr", "gpc", "svgpc", "ni-nn"):
            assert main(["train", "--data", data, "--method", m, *train, *fast]) == 0
        assert main(["evaluate", "--data", data, "--splits", "2", *train, *fast]) == 0
        assert main(["heatmap", "--model", str(out / "model_svgpc.json"), "--resolution", "8",
                     *fast]) == 0
        return sorted(p.name for p in out.iterdir())

    a, b = tmp_path / "a", tmp_path / "b"
    names = pipeline(a)
    assert pipeline(b) == names
    differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    verdict(9, not differ, f"{len(names)} artifacts compared byte for byte; differing: "
                           f"{differ or 'none'}")


def test_c10_metric_identities(verdict):
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 500)
    nll_err = abs(nll_metric(np.full(500, 0.5), y) - math.log(2))
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        p, lab, th = rng.normal(10, 5, n), rng.integers(0, 2, n), rng.normal(10, 5)
        tp = sum(1 for a, b in zip(p, lab) if a >= th and b == 1)
        tn = sum(1 for a, b in zip(p, lab) if a < th and b == 0)
        mismatches += ratio_metric(p, lab, th) != (tp + tn) / n
    ok = nll_err <= 1e-12 and mismatches == 0
    verdict(10, ok, f"|nll(0.5) - ln 2| = {nll_err:.1e}; ratio mismatches vs confusion counts "
                    f"{mismatches}/1000")
