"""Residuals, survival curves, subject predictions and regional risk."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .criteria import _part_draws, allocate_draws
from .splines import evaluate_basis


@dataclass(frozen=True)
class KaplanMeierCurve:
    """Product-limit estimate.

    ``times`` are the distinct event times; ``survival[i]`` is S just after
    ``times[i]`` and ``at_risk[i]``/``events[i]`` the counts at that time.
    """

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Right-continuous step function evaluated at ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.times, t, side="right")
        s = np.concatenate([[1.0], self.survival])
        return s[idx]


def kaplan_meier(times, events) -> KaplanMeierCurve:
    t = np.asarray(times, dtype=float)
    d = np.asarray(events, dtype=int)
    if t.size == 0:
        raise ValueError("empty input")
    if t.shape != d.shape:
        raise ValueError("times and events must have the same length")
    order = np.argsort(t, kind="stable")
    t, d = t[order], d[order]
    ut, first = np.unique(t, return_index=True)
    n = t.size
    at_risk = n - first
    ev = np.add.reduceat(d, first)
    has = ev > 0
    ut, at_risk, ev = ut[has], at_risk[has], ev[has]
    surv = np.cumprod(1.0 - ev / at_risk)
    return KaplanMeierCurve(ut, surv, at_risk, ev)


def _mixture_mean(part):
    w = part.grid.weights
    xb = sum(wi * a.xb for wi, a in zip(w, part.grid.approximations))
    xt = sum(wi * a.xt for wi, a in zip(w, part.grid.approximations))
    return xb, xt


def _hyper_mean(fit, label, default):
    try:
        return fit.hyper_summary(label).mean
    except KeyError:
        return default


def _long_part(fit):
    for p in fit.parts:
        if p.spec.has_long:
            return p
    raise ValueError("fit has no longitudinal submodel")


def _surv_part(fit):
    for p in fit.parts:
        if p.spec.has_surv:
            return p
    raise ValueError("fit has no survival submodel")


def standardized_marginal_residuals(fit, data=None) -> np.ndarray:
    """``(y - x'beta - g(s)) / sqrt(z' D z + sigma^2)`` per longitudinal record.

    Uses posterior means of the fixed effects, spline coefficients, ``D``
    and ``sigma^2``. Without random effects the scale is ``sigma``.
    """
    part = _long_part(fit)
    model = part.model
    _, xt = _mixture_mean(part)
    mu = model.X @ xt[: model.pb]
    s2 = _hyper_mean(fit, "sigma^2", None)
    if s2 is None:
        s2 = 1.0 / _hyper_mean(fit, "1/sigma^2", 1.0)
    var = np.full(model.n_obs, s2)
    if model.q:
        D = posterior_D(part)
        var = var + np.einsum("ij,jk,ik->i", model.Z, D, model.Z)
    return (model.y - mu) / np.sqrt(var)


def posterior_D(part) -> np.ndarray:
    """Posterior-mixture mean of the random-effect covariance matrix."""
    g = part.grid
    return sum(w * a.hyper.D for w, a in zip(g.weights, g.approximations))


@dataclass
class CoxSnellReport:
    residuals: np.ndarray
    events: np.ndarray
    km: KaplanMeierCurve
    sup_distance: float


def cox_snell_residuals(fit, data=None, samples: int = 1000, seed: int = 0) -> CoxSnellReport:
    """Posterior-mean cumulative hazard at each observed time.

    The report compares the Kaplan-Meier curve of the residuals (with the
    original censoring indicators) to the unit-exponential survival
    function; ``sup_distance`` is the largest gap at the curve's jumps.
    """
    part = _surv_part(fit)
    model = part.model
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    acc = np.zeros(model.N)
    total = 0
    L = model.layout
    for h, xb, xt in _part_draws(part, samples, rng):
        eta = xt[:, L.alpha] @ model.X2.T
        if model.q:
            g = h.gamma_vec
            if np.any(g != 0):
                eta += xb @ g
        if model.K:
            eta += xt[:, L.nu][:, model.region]
        acc += np.exp(np.minimum(eta, 35.0) + h.shape * model.logT[None, :]).sum(axis=0)
        total += xt.shape[0]
    r = acc / total
    return _cs_report(r, model.delta.astype(int))


def _cs_report(r, events) -> CoxSnellReport:
    km = kaplan_meier(r, events)
    s_before = np.concatenate([[1.0], km.survival[:-1]])
    ref = np.exp(-km.times)
    sup = float(max(np.max(np.abs(km.survival - ref), initial=0.0), np.max(np.abs(s_before - ref), initial=0.0)))
    return CoxSnellReport(r, events, km, sup)


def cox_snell_from_truth(cumhaz, events) -> CoxSnellReport:
    """Report for residuals supplied directly (e.g. the true ``H(T)``)."""
    return _cs_report(np.asarray(cumhaz, dtype=float), np.asarray(events, dtype=int))


@dataclass
class SubjectPrediction:
    subject_id: str
    times: np.ndarray
    traj_mean: np.ndarray
    traj_lo: np.ndarray
    traj_hi: np.ndarray
    surv_median: np.ndarray
    surv_lo: np.ndarray
    surv_hi: np.ndarray


def predict_subject(fit, data, subject_id: str, horizon, samples: int = 1000, seed: int = 0) -> SubjectPrediction:
    """Posterior predictive summaries of one subject's trajectory and survival curve."""
    horizon = np.asarray(horizon, dtype=float)
    part0 = fit.parts[0]
    if subject_id not in part0.model.data.subject_index:
        raise KeyError(f"unknown subject {subject_id!r}")
    i = part0.model.data.subject_index[subject_id]
    n_h = horizon.size
    traj = np.zeros((0, n_h))
    surv = np.zeros((0, n_h))
    for k, part in enumerate(fit.parts):
        model = part.model
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 13, k]))
        chunks_t, chunks_s = [], []
        if model.spec.has_long:
            Bs = evaluate_basis(model.spline, horizon) if model.spline is not None else np.ones((n_h, 1))
            pc = model.pb - Bs.shape[1]
            xrow = model.data.long_x[model.obs_subject == i][:1]
            cols = [model.data.long_covariate_names.index(n.split(":", 1)[1]) for n in model.layout.beta_names[:pc]]
            xc = xrow[0, cols] if xrow.size else np.zeros(pc)
            Xh = np.hstack([np.broadcast_to(xc, (n_h, pc)), Bs])
            Zh = np.column_stack([np.ones(n_h), horizon])[:, : model.q]
        for h, xb, xt in _part_draws(part, samples, rng):
            if model.spec.has_long:
                eta = xt[:, : model.pb] @ Xh.T
                if model.q:
                    eta += xb[:, i, :] @ Zh.T
                chunks_t.append(eta)
            if model.spec.has_surv:
                L = model.layout
                et = xt[:, L.alpha] @ model.X2[i]
                if model.q:
                    et = et + xb[:, i, :] @ h.gamma_vec
                if model.K:
                    et = et + xt[:, L.nu][:, model.region[i]]
                with np.errstate(divide="ignore"):
                    logt = np.log(horizon)
                H = np.exp(np.minimum(et, 35.0)[:, None] + h.shape * logt[None, :])
                chunks_s.append(np.exp(-H))
        if chunks_t:
            traj = np.vstack(chunks_t)
        if chunks_s:
            surv = np.vstack(chunks_s)
    def q(a, p):
        return np.quantile(a, p, axis=0) if a.size else np.full(n_h, np.nan)
    return SubjectPrediction(
        subject_id, horizon,
        traj.mean(axis=0) if traj.size else np.full(n_h, np.nan), q(traj, 0.025), q(traj, 0.975),
        q(surv, 0.5), q(surv, 0.025), q(surv, 0.975),
    )


@dataclass
class RegionRisk:
    region: np.ndarray
    n_subjects: np.ndarray
    lambda_hat: np.ndarray  # NaN for regions without subjects
    exp_nu: np.ndarray


def region_risk(fit, data=None) -> RegionRisk:
    """Per-region mean subject risk and the posterior mean of ``exp(nu_k)``.

    The subject risk is ``exp(x2'alpha + gamma'b + nu_k)`` at posterior
    means of ``alpha``, ``gamma``, ``b`` and ``nu``.
    """
    part = _surv_part(fit)
    model = part.model
    K = model.data.n_regions
    xb, xt = _mixture_mean(part)
    L = model.layout
    g = part.grid
    gamma = sum(w * a.hyper.gamma_vec for w, a in zip(g.weights, g.approximations)) if model.q else np.zeros(0)
    eta = model.X2 @ xt[L.alpha]
    if model.q:
        eta = eta + xb @ gamma
    if model.K:
        eta = eta + xt[L.nu][model.region]
        en = np.zeros(K)
        for w, a in zip(g.weights, g.approximations):
            vb, vt = a.factor.marginal_variances()
            en += w * np.exp(a.xt[L.nu] + 0.5 * vt[L.nu])
    else:
        en = np.ones(K)
    lam_i = np.exp(eta)
    counts = np.bincount(model.region, minlength=K)
    sums = np.bincount(model.region, lam_i, K)
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return RegionRisk(np.arange(K), counts, lam, en)


__all__ = [
    "KaplanMeierCurve", "kaplan_meier", "standardized_marginal_residuals", "cox_snell_residuals",
    "cox_snell_from_truth", "CoxSnellReport", "predict_subject", "SubjectPrediction", "region_risk",
    "RegionRisk", "posterior_D", "allocate_draws",
]
