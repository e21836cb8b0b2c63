import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad

from sjlgm.data import AdjacencyGraph, JointDataset
from sjlgm.inference import InferenceOptions, fit
from sjlgm.model import (
    PRESET_NAMES,
    HyperParameters,
    JointModel,
    ModelError,
    ModelSpec,
    build_latent_layout,
    decode_theta,
    encode_hyper,
    hyper_names,
    joint_loglik,
    linear_predictors,
    log_hyper_prior,
    preset,
    read_model_config,
)

from conftest import make_joint


def single_subject(y=None, T=None, event=1):
    g = AdjacencyGraph.lattice(1, 1)
    kw = {}
    if y is not None:
        kw.update(long_subject=[0], long_time=[0.0], long_y=[y])
    if T is not None:
        kw.update(surv_time=[T], surv_event=[event])
    return JointDataset.from_arrays(["a"], [0], g, **kw)


def shaped_dataset(N, K, p1, p2, seed=0):
    rng = np.random.default_rng(seed)
    g = AdjacencyGraph.lattice(1, K)
    t = rng.uniform(0, 1, N)
    return JointDataset.from_arrays(
        [f"s{i}" for i in range(N)], np.arange(N) % K, g,
        long_subject=np.arange(N), long_time=t, long_y=rng.normal(size=N), long_x=rng.normal(size=(N, p1)),
        surv_time=t + 1.0, surv_event=np.ones(N, dtype=int), surv_x=rng.normal(size=(N, p2)),
        long_covariate_names=[f"x{j}" for j in range(p1)], surv_covariate_names=[f"w{j}" for j in range(p2)],
    )


class TestLayout:
    def test_scenario_one_dimension(self):
        d = shaped_dataset(2000, 100, 2, 1)
        assert build_latent_layout(preset("xi", spline_nknots=1), d).dim == 2 + 5 + 4000 + 100 + 2

    def test_application_dimension(self):
        d = shaped_dataset(500, 27, 3, 3)
        assert build_latent_layout(preset("xi", spline_nknots=1), d).dim == 3 + 5 + 1000 + 27 + 4

    def test_no_random_effects_no_spatial(self):
        d = shaped_dataset(50, 3, 2, 1)
        lay = build_latent_layout(preset("N", spline_nknots=1), d)
        assert lay.dim == 2 + 5 + 1 + 1

    def test_names_and_order(self):
        d = shaped_dataset(3, 2, 1, 1)
        lay = build_latent_layout(preset("xi", spline_nknots=0, spline_degree=1), d)
        assert lay.names == [
            "beta:x0", "spline[0]", "spline[1]",
            "b0[s0]", "b1[s0]", "b0[s1]", "b1[s1]", "b0[s2]", "b1[s2]",
            "nu[0]", "nu[1]", "alpha:(Intercept)", "alpha:w0",
        ]

    def test_external_round_trip(self):
        d = shaped_dataset(10, 3, 2, 1)
        lay = build_latent_layout(preset("xi", spline_nknots=1), d)
        x = np.random.default_rng(1).normal(size=lay.dim)
        xb, xt = lay.from_external(x)
        assert_allclose(lay.to_external(xb, xt), x)

    def test_unknown_covariate(self):
        d = shaped_dataset(10, 3, 2, 1)
        with pytest.raises(ModelError, match="not in dataset"):
            JointModel(preset("xi", long_covariates=("nope",)), d)


class TestLinearPredictors:
    def test_zero_field(self):
        d = make_joint(0)
        m = JointModel(preset("xi"), d)
        ey, et = linear_predictors(m, np.zeros(m.layout.dim), (1.0, -1.0))
        assert np.all(ey == 0) and np.all(et == 0)

    def test_linkage_dot_product(self):
        d = single_subject(y=0.0, T=1.0)
        m = JointModel(ModelSpec(spatial=False, spline_degree=None), d)
        x = np.zeros(m.layout.dim)
        x[m.layout.name_index["b0[a]"]] = 1.0
        _, et = linear_predictors(m, x, (1.0, -1.0))
        assert_allclose(et, [1.0])

    def test_derivative_in_b0_is_gamma1(self):
        d = make_joint(1)
        m = JointModel(preset("xi"), d)
        rng = np.random.default_rng(0)
        x = rng.normal(size=m.layout.dim)
        j = m.layout.name_index["b0[p004]"]
        e = np.zeros_like(x)
        e[j] = 1e-3
        _, a = linear_predictors(m, x + e, (0.7, -0.3))
        _, b = linear_predictors(m, x - e, (0.7, -0.3))
        fd = (a - b) / 2e-3
        assert_allclose(fd[4], 0.7, rtol=1e-10)
        assert_allclose(np.delete(fd, 4), 0.0, atol=1e-9)


class TestJointLoglik:
    def test_single_gaussian_observation(self):
        m = JointModel(ModelSpec(outcomes="longitudinal", random_effects="none", linkage="none",
                                 spatial=False, spline_degree=None), single_subject(y=0.0))
        val, _, _ = joint_loglik(m, np.zeros(m.layout.dim), [0.0])
        assert_allclose(val, -0.5 * np.log(2 * np.pi))

    def test_single_weibull_event(self):
        m = JointModel(ModelSpec(outcomes="survival", random_effects="none", linkage="none", spatial=False),
                       single_subject(T=1.0))
        val, _, _ = joint_loglik(m, np.zeros(m.layout.dim), [0.0])
        assert_allclose(val, -1.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_and_hessian_match_finite_differences(self, seed):
        d = make_joint(seed, rows=1, cols=2, n_k=4)
        m = JointModel(preset("xi", spline_nknots=1), d)
        rng = np.random.default_rng(seed)
        x = 0.3 * rng.normal(size=m.layout.dim)
        theta = rng.normal(scale=0.3, size=len(hyper_names(m.spec)))
        val, g, H = joint_loglik(m, x, theta)
        h = 1e-5
        fd_g = np.empty_like(x)
        fd_H = np.empty((x.size, x.size))
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = h
            vp, gp, _ = joint_loglik(m, x + e, theta)
            vm, gm, _ = joint_loglik(m, x - e, theta)
            fd_g[j] = (vp - vm) / (2 * h)
            fd_H[:, j] = (gp - gm) / (2 * h)
        assert np.max(np.abs(fd_g - g)) / np.max(np.abs(g)) < 1e-6
        assert np.max(np.abs(fd_H - H)) / np.max(np.abs(H)) < 1e-6

    def test_survival_curvature_negative(self):
        d = make_joint(5)
        m = JointModel(preset("xi"), d)
        x = np.random.default_rng(0).normal(size=m.layout.dim)
        _, _, H = joint_loglik(m, x, np.zeros(len(hyper_names(m.spec))))
        assert np.linalg.eigvalsh(H).max() < 1e-9
        theta = np.zeros(len(hyper_names(m.spec)))
        P = m.prior_dense(m.hyper(theta)) - H
        assert np.linalg.eigvalsh(P).min() > 0

    def test_quadratic_without_survival(self):
        d = make_joint(2)
        m = JointModel(preset("xi", outcomes="longitudinal", linkage="none", spatial=False), d)
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=m.layout.dim)
        dx = rng.normal(size=m.layout.dim)
        theta = rng.normal(scale=0.2, size=len(hyper_names(m.spec)))
        v0, g0, H0 = joint_loglik(m, x0, theta)
        v1, _, _ = joint_loglik(m, x0 + dx, theta)
        assert_allclose(v1, v0 + g0 @ dx + 0.5 * dx @ H0 @ dx, rtol=1e-12)

    def test_clamp_is_logged(self, caplog):
        d = single_subject(T=1.0)
        m = JointModel(ModelSpec(outcomes="survival", random_effects="none", linkage="none", spatial=False), d)
        x = np.zeros(m.layout.dim)
        x[m.layout.name_index["alpha:(Intercept)"]] = 50.0
        with caplog.at_level(logging.WARNING):
            val, _, _ = joint_loglik(m, x, [0.0])
        assert np.isfinite(val)
        assert "clamped" in caplog.text


class TestPriorPrecision:
    def test_no_spatial_block(self):
        d = make_joint(0)
        with_sp = JointModel(preset("xi"), d)
        without = JointModel(preset("ix"), d)
        n = len(hyper_names(with_sp.spec))
        Q1, _ = with_sp.prior_precision(with_sp.hyper(np.zeros(n)))
        Q2, _ = without.prior_precision(without.hyper(np.zeros(n - 1)))
        assert Q1.shape[0] - Q2.shape[0] == d.n_regions

    def test_identity_blocks(self):
        h = HyperParameters(prec_b0=1.0, prec_b1=1.0, rho=0.0, q=2)
        assert_allclose(h.D_inv, np.eye(2))

    def test_scenario_one_covariance(self):
        spec = preset("xi")
        theta = encode_hyper(spec, prec_b0=1.0, prec_b1=1.0, rho=0.5)
        h = decode_theta(spec, theta)
        assert_allclose(h.D, [[1.0, 0.5], [0.5, 1.0]])
        assert_allclose(h.D_inv, [[4 / 3, -2 / 3], [-2 / 3, 4 / 3]])
        assert_allclose(h.logdet_D_inv, np.log(np.linalg.det(h.D_inv)))

    def test_logdet_matches_dense(self):
        d = make_joint(3)
        m = JointModel(preset("xi", zeta=None), d)
        theta = np.random.default_rng(0).normal(scale=0.5, size=len(hyper_names(m.spec)))
        Q, ld = m.prior_precision(m.hyper(theta))
        assert_allclose(ld, np.linalg.slogdet(Q.toarray())[1], rtol=1e-12)

    def test_random_theta_gives_positive_definite_D(self):
        rng = np.random.default_rng(0)
        spec = preset("xi")
        for _ in range(50):
            h = decode_theta(spec, rng.normal(scale=3, size=len(hyper_names(spec))))
            assert np.linalg.eigvalsh(h.D).min() > 0
            assert 0 < h.zeta < 1 and h.prec_spatial > 0 and h.shape > 0


class TestHyperPrior:
    def test_log_precision_prior_integrates_to_one(self):
        spec = ModelSpec(outcomes="longitudinal", random_effects="none", linkage="none", spatial=False)
        total, _ = quad(lambda t: np.exp(log_hyper_prior(spec, [t])), -40, 20, limit=200)
        assert_allclose(total, 1.0, rtol=1e-6)

    def test_encode_decode_round_trip(self):
        spec = preset("xi", zeta=None)
        theta = encode_hyper(spec, prec_obs=2.0, shape=1.5, prec_b0=0.5, prec_b1=3.0, rho=-0.2,
                             prec_spatial=12.0, zeta=0.7, gamma1=0.3, gamma2=-0.4)
        h = decode_theta(spec, theta)
        assert_allclose([h.prec_obs, h.shape, h.prec_b0, h.prec_b1, h.rho, h.prec_spatial, h.zeta],
                        [2.0, 1.5, 0.5, 3.0, -0.2, 12.0, 0.7])
        assert_allclose(h.gamma, (0.3, -0.4))


class TestSpecs:
    @pytest.mark.parametrize("kw", [
        dict(random_effects="none", linkage="b0"),
        dict(random_effects="intercept", linkage="b1"),
        dict(separate=True, linkage="both"),
        dict(zeta=1.0),
        dict(outcomes="survival", linkage="b0"),
    ])
    def test_inconsistent_specs(self, kw):
        with pytest.raises(ModelError):
            ModelSpec(**kw)

    def test_simulation_presets(self):
        assert preset("I").separate and not preset("I").spatial
        assert preset("II").separate and preset("II").spatial
        assert preset("III").linkage == "both" and not preset("III").spatial
        assert preset("IV").linkage == "both" and preset("IV").spatial
        assert preset("IV").random_effects == preset("xi").random_effects

    def test_separate_submodels(self):
        parts = preset("II").submodels()
        assert [p.outcomes for p in parts] == ["longitudinal", "survival"]
        assert parts[1].q == 0 and parts[1].spatial

    def test_dict_round_trip(self):
        s = preset("vi", spline_knots=(0.3, 0.6), fixed_hyper=(("gamma2", 0.0),))
        assert ModelSpec.from_dict(s.to_dict()) == s

    def test_config_file(self, tmp_path):
        p = tmp_path / "m.cfg"
        p.write_text("# model\nbase = ix\nspline_nknots = 2\nzeta = estimate\nfixed.gamma1 = 0.5\n"
                     "prior.gamma_var = 4\nlong_covariates = x1\n")
        s = read_model_config(p)
        assert s.linkage == "both" and not s.spatial and s.zeta is None
        assert s.spline_nknots == 2 and s.long_covariates == ("x1",)
        assert dict(s.fixed_hyper) == {"gamma1": 0.5}
        assert s.priors.gamma_var == 4.0

    def test_config_file_errors_cite_line(self, tmp_path):
        p = tmp_path / "m.cfg"
        p.write_text("base = xi\nbogus = 1\n")
        with pytest.raises(ModelError, match=":2"):
            read_model_config(p)

    def test_all_presets_fit_micro_dataset(self):
        d = make_joint(4, rows=1, cols=3, n_k=5)
        dims = {}
        opts = InferenceOptions(strategy="eb", densities="none")
        for name in PRESET_NAMES:
            r = fit(preset(name, spline_nknots=1), d, opts)
            assert np.all(np.isfinite(r.latent["mean"]))
            dims[name] = len(r.latent["name"])
        N, K = d.n_subjects, d.n_regions
        assert dims["i"] - dims["N"] == N
        assert dims["iv"] - dims["N"] == K
        assert dims["x"] - dims["iv"] == 2 * N
        assert dims["xi"] == dims["x"] == dims["vi"] == dims["v"]
        assert dims["vii"] == dims["viii"] == dims["ix"] == dims["xi"] - K
