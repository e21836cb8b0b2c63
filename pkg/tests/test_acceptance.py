"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import json
import time

import numpy as np
import pytest

from sjlgm.cli import main
from sjlgm.data import AdjacencyGraph, JointDataset, write_dataset
from sjlgm.diagnostics import cox_snell_residuals
from sjlgm.inference import InferenceOptions, fit, log_hyper_posterior, log_hyper_prior
from sjlgm.model import JointModel, ModelSpec, Priors
from sjlgm.simulation import censoring_rate_for, run_study, scenario
from sjlgm.spatial import CarStructure, sample_car_field
from sjlgm.splines import SplineConfig, evaluate_basis

from conftest import dense_gaussian_posterior, make_joint, make_longitudinal, report_criterion

EB = InferenceOptions(strategy="eb", densities="none")
SURV_ONLY = dict(outcomes="survival", random_effects="none", linkage="none", spatial=False)


@pytest.fixture(scope="module")
def scenario_one_study():
    c = scenario("1", K=100, n_k=20)
    t0 = time.perf_counter()
    rep = run_study(c, ["I", "III", "IV"], M=20, options=EB, samples=1000)
    return rep, time.perf_counter() - t0


def test_criterion_01_gaussian_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(10):
        d = make_longitudinal(s, N=10 + 4 * s, p1=1 + s % 3)
        spec = ModelSpec(outcomes="longitudinal", linkage="none", spatial=False, spline_nknots=s % 3)
        f = fit(spec, d, InferenceOptions(densities="none"))
        part = f.parts[0]
        assert part.model.layout.dim <= 200 and d.n_subjects <= 50
        g = part.grid
        first, second = [], []
        for a in g.approximations:
            # independent dense oracle at each hyperparameter point, mixed with the same weights
            mu, cov = dense_gaussian_posterior(part.model, a.hyper)
            first.append(mu)
            second.append(np.diag(cov) + mu ** 2)
        mean = g.weights @ np.array(first)
        sd = np.sqrt(g.weights @ np.array(second) - mean ** 2)
        worst = max(worst, np.max(np.abs(mean - np.array(f.latent["mean"]))),
                    np.max(np.abs(sd - np.array(f.latent["sd"]))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and elapsed < 10.0
    report_criterion(1, ok, f"max marginal error {worst:.2e} (< 1e-8), {elapsed:.2f} s (< 10 s)")
    assert ok


def test_criterion_02_conjugate_hyperposterior():
    rng = np.random.default_rng(0)
    n, eps = 12, 1e-3
    y = 0.7 + 1.3 * rng.normal(size=n)
    d = JointDataset.from_arrays([f"s{i:02d}" for i in range(n)], np.zeros(n, dtype=int), AdjacencyGraph.lattice(1, 1),
                                 long_subject=np.arange(n), long_time=np.linspace(0, 1, n), long_y=y)
    spec = ModelSpec(outcomes="longitudinal", random_effects="none", linkage="none", spatial=False,
                     spline_degree=None, priors=Priors(fixed_effect_precision=eps))
    model = JointModel(spec, d, None)
    thetas = np.linspace(-2.0, 2.0, 21)
    t0 = time.perf_counter()
    lp = np.array([log_hyper_posterior(model, [t]) for t in thetas])
    elapsed = time.perf_counter() - t0

    def log_evidence(theta):
        S = np.exp(-theta) * np.eye(n) + np.ones((n, n)) / eps
        _, logdet = np.linalg.slogdet(S)
        return -0.5 * (n * np.log(2 * np.pi) + logdet + y @ np.linalg.solve(S, y))

    exact = np.array([log_evidence(t) + log_hyper_prior(spec, np.array([t])) for t in thetas])
    err = np.max(np.abs(np.diff(lp) - np.diff(exact)))
    ok = err < 1e-10 and elapsed < 1.0
    report_criterion(2, ok, f"max difference error {err:.2e} (< 1e-10), {elapsed:.3f} s (< 1 s)")
    assert ok


def test_criterion_03_scenario_one_recovery(scenario_one_study):
    rep, elapsed = scenario_one_study
    rows = {r.parameter: r for r in rep.scores() if r.model == "IV"}
    limits = {"beta0": 0.10, "beta:x1": 0.10, "beta:x2": 0.10, "gamma1": 0.25, "gamma2": 0.25}
    ok = len(rep.failures["IV"]) == 0 and all(abs(rows[p].rbias) <= lim for p, lim in limits.items())
    detail = ", ".join(f"{p} {rows[p].rbias:+.3f}" for p in limits)
    report_criterion(3, ok, f"Model IV Rbias: {detail}; study {elapsed / 60:.1f} min")
    assert ok


def test_criterion_04_model_ranking(scenario_one_study):
    rep, _ = scenario_one_study
    crit = rep.criteria
    frac = {}
    for key in ("dic", "waic"):
        wins = [crit["IV"][r][key] < crit["III"][r][key] and crit["IV"][r][key] < crit["I"][r][key]
                for r in range(20) if crit["IV"][r] and crit["III"][r] and crit["I"][r]]
        frac[key] = sum(wins) / 20
    ok = frac["dic"] >= 0.8 and frac["waic"] >= 0.8
    report_criterion(4, ok, f"IV lowest: DIC {frac['dic']:.0%}, WAIC {frac['waic']:.0%} (>= 80%)")
    assert ok


def test_criterion_05_linkage_bias_signature(scenario_one_study):
    rep, _ = scenario_one_study
    g3 = np.array([e["gamma1"] for e in rep.estimates["III"] if e])
    g4 = np.array([e["gamma1"] for e in rep.estimates["IV"] if e])
    f3 = float(np.mean(np.abs(g3) > 1.5)) * g3.size / 20
    f4 = float(np.mean(np.abs(g4) < 1.2)) * g4.size / 20
    ok = f3 >= 0.7 and f4 == 1.0
    report_criterion(5, ok, f"III |gamma1| > 1.5 in {f3:.0%} (>= 70%), mean {g3.mean():.3f}; "
                            f"IV |gamma1| < 1.2 in {f4:.0%}, mean {g4.mean():.3f}")
    assert ok


def test_criterion_06_scenario_two_direction():
    c = scenario("2", K=27, n_k=20)
    assert c.graph().region_count == 27
    rep = run_study(c, ["IV"], M=10, options=EB, criteria=False)
    ests = [e for e in rep.estimates["IV"] if e]
    shape = np.array([e["shape"] for e in ests])
    g2 = np.array([e["gamma2"] for e in ests])
    ok = len(ests) == 10 and 1.6 <= shape.mean() <= 2.4 and bool(np.all(g2 < 0))
    report_criterion(6, ok, f"shape mean {shape.mean():.3f} in [1.6, 2.4] (range {shape.min():.3f}..{shape.max():.3f}); "
                            f"gamma2 < 0 in {np.sum(g2 < 0)}/{len(ests)}")
    assert ok


def test_criterion_07_spline_properties():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    failures = 0
    for _ in range(1000):
        d = int(rng.integers(0, 5))
        lo = rng.uniform(-2.0, 1.0)
        hi = lo + rng.uniform(0.5, 4.0)
        knots = np.unique(rng.uniform(lo, hi, size=int(rng.integers(0, 7))))
        c = SplineConfig(d, tuple(float(k) for k in knots), (lo, hi))
        t = np.sort(rng.uniform(lo, hi, size=50))
        B = evaluate_basis(c, t)
        tv = np.asarray(c.knot_vector)
        unity = np.allclose(B.sum(axis=1), 1.0, atol=1e-12) and np.all(B >= -1e-15)
        # B_j vanishes outside [t_j, t_{j+d+1}]
        j = np.arange(B.shape[1])
        outside = (t[:, None] < tv[j][None, :]) | (t[:, None] > tv[j + d + 1][None, :])
        local = np.all(B[outside] == 0.0)
        linear = True
        if d >= 1:
            greville = np.array([tv[k + 1:k + d + 1].mean() for k in j])
            linear = np.allclose(B @ greville, t, atol=1e-10 * (1 + abs(hi)))
        failures += not (unity and local and linear)
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and elapsed < 5.0
    report_criterion(7, ok, f"{1000 - failures}/1000 configurations, {elapsed:.2f} s (< 5 s)")
    assert ok


def test_criterion_08_cox_snell_calibration():
    passes, sups = 0, []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        N = 1000
        x = rng.normal(size=N)
        T = (rng.exponential(size=N) / np.exp(0.3 + 0.5 * x)) ** (1.0 / 1.7)
        rate = censoring_rate_for(T, 0.40)
        C = rng.exponential(1.0 / rate, size=N)
        d = JointDataset.from_arrays(
            [f"s{i:04d}" for i in range(N)], np.zeros(N, dtype=int), AdjacencyGraph.lattice(1, 1),
            surv_time=np.minimum(T, C), surv_event=(T <= C).astype(int), surv_x=x[:, None],
            surv_covariate_names=["x1"],
        )
        sup = cox_snell_residuals(fit(ModelSpec(**SURV_ONLY), d, EB), samples=200, seed=seed).sup_distance
        sups.append(sup)
        passes += sup < 0.08
    ok = passes >= 45
    report_criterion(8, ok, f"sup < 0.08 in {passes}/50 seeds (>= 45), median sup {np.median(sups):.4f}")
    assert ok


def test_criterion_09_car_sampler():
    g = AdjacencyGraph.lattice(1, 2)
    zeta, tau, n = 0.5, 2.0, 100_000
    s = CarStructure(g, zeta=zeta, tau=tau)
    x = sample_car_field(s, 9, size=n)
    # closed form: Q = tau((1 - zeta) I + zeta (D - W)) with D - W = [[1, -1], [-1, 1]]
    Q = tau * ((1 - zeta) * np.eye(2) + zeta * np.array([[1.0, -1.0], [-1.0, 1.0]]))
    S = np.linalg.inv(Q)
    se = np.sqrt((S ** 2 + np.outer(np.diag(S), np.diag(S))) / n)
    z = np.abs(np.cov(x.T) - S) / se
    ok = bool(np.all(z < 3))
    report_criterion(9, ok, f"max |error| / SE = {z.max():.2f} (< 3) at {n} draws")
    assert ok


def test_criterion_10_determinism(tmp_path):
    d = make_joint(21, rows=1, cols=2, n_k=8)
    lp, sp, gp = (str(tmp_path / n) for n in ("long.csv", "surv.csv", "graph.txt"))
    write_dataset(d, lp, sp, gp)

    def outputs(out):
        man = json.loads((out / "manifest.json").read_text())
        return {k: (out / k).read_bytes() for k in man["outputs"]}

    runs = {
        "fit": ["fit", "--model", "xi", "--strategy", "ccd", "--criteria-samples", "200",
                "--long", lp, "--surv", sp, "--graph", gp],
        "simulate": ["simulate", "--scenario", "1", "--K", "4", "--nk", "5", "--M", "2", "--models", "I,IV",
                     "--criteria-samples", "100"],
    }
    same = {}
    for name, cmd in runs.items():
        a = tmp_path / f"{name}_a"
        assert main(cmd + ["--threads", "1", "--out", str(a)]) == 0
        b = tmp_path / f"{name}_b"
        assert main(["rerun", str(a / "manifest.json"), "--threads", "4", "--out", str(b)]) == 0
        same[name] = outputs(a) == outputs(b) and len(outputs(a)) > 0
    ok = all(same.values())
    report_criterion(10, ok, "bitwise identical reruns at --threads 1 vs 4: "
                             + ", ".join(f"{k} {'yes' if v else 'no'}" for k, v in same.items()))
    assert ok
