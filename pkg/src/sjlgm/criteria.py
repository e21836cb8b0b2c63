"""DIC and WAIC from draws of the mixture posterior approximation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import LOG_2PI, HyperParameters, JointModel

MIN_SAMPLES = 100
CHUNK = 100


def allocate_draws(weights, n: int) -> np.ndarray:
    """Split ``n`` draws across integration points proportionally (largest remainder)."""
    w = np.asarray(weights, dtype=float)
    raw = w * n
    k = np.floor(raw).astype(int)
    short = n - int(k.sum())
    if short:
        order = np.lexsort((np.arange(len(w)), -(raw - k)))
        k[order[:short]] += 1
    return k


def batch_pointwise_loglik(model: JointModel, xb, xt, h: HyperParameters):
    """Pointwise log-likelihood for a batch of latent draws.

    ``xb`` has shape ``(n, N, q)`` and ``xt`` shape ``(n, m)``. Returns
    ``(n, n_obs)`` and ``(n, N_surv)`` arrays.
    """
    n = xt.shape[0]
    ll_y = np.zeros((n, 0))
    if model.n_obs:
        eta = xt[:, : model.pb] @ model.X.T
        if model.q:
            eta += np.einsum("jq,njq->nj", model.Z, xb[:, model.obs_subject, :])
        r = model.y[None, :] - eta
        ll_y = -0.5 * LOG_2PI + 0.5 * np.log(h.prec_obs) - 0.5 * h.prec_obs * r * r
    ll_t = np.zeros((n, 0))
    if model.spec.has_surv:
        L = model.layout
        eta = xt[:, L.alpha] @ model.X2.T
        if model.q:
            g = h.gamma_vec
            if np.any(g != 0):
                eta += xb @ g
        if model.K:
            eta += xt[:, L.nu][:, model.region]
        logw = np.minimum(eta, 35.0) + h.shape * model.logT[None, :]
        ll_t = model.delta[None, :] * (np.log(h.shape) + (h.shape - 1.0) * model.logT[None, :] + eta) - np.exp(np.minimum(logw, 700.0))
    return ll_y, ll_t


def _units(model: JointModel, ll_y, ll_t, unit: str):
    if unit == "record":
        return np.hstack([ll_y, ll_t])
    if unit == "subject":
        n = ll_y.shape[0] if ll_y.size else ll_t.shape[0]
        out = np.zeros((n, model.N))
        if ll_y.size:
            for j in range(n):
                out[j] = np.bincount(model.obs_subject, ll_y[j], model.N)
        if ll_t.size:
            out += ll_t
        return out
    raise ValueError(f"unknown pointwise unit {unit!r}")


class _Stream:
    """Running log-mean-exp, mean and variance per unit across chunks of draws."""

    def __init__(self):
        self.n = 0
        self.lmax = None
        self.lsum = None
        self.mean = None
        self.m2 = None

    def add(self, L: np.ndarray):
        k = L.shape[0]
        if k == 0:
            return
        cmax = L.max(axis=0)
        csum = np.exp(L - cmax).sum(axis=0)
        cmean = L.mean(axis=0)
        cm2 = ((L - cmean) ** 2).sum(axis=0)
        if self.n == 0:
            self.n, self.lmax, self.lsum, self.mean, self.m2 = k, cmax, csum, cmean, cm2
            return
        nmax = np.maximum(self.lmax, cmax)
        self.lsum = self.lsum * np.exp(self.lmax - nmax) + csum * np.exp(cmax - nmax)
        self.lmax = nmax
        tot = self.n + k
        d = cmean - self.mean
        self.mean = self.mean + d * k / tot
        self.m2 = self.m2 + cm2 + d * d * self.n * k / tot
        self.n = tot

    @property
    def lppd(self):
        return self.lmax + np.log(self.lsum) - np.log(self.n)

    @property
    def var(self):
        return self.m2 / (self.n - 1)


def _part_draws(part, samples: int, rng: np.random.Generator):
    """Yield ``(h, xb, xt)`` chunks of joint draws for one fitted part."""
    grid = part.grid
    counts = allocate_draws(grid.weights, samples)
    for a, k in zip(grid.approximations, counts):
        done = 0
        while done < k:
            c = min(CHUNK, k - done)
            zb, zt = a.factor.sample(rng, c)
            yield a.hyper, a.xb[None] + zb, a.xt[None] + zt
            done += c


def _posterior_mean_point(part):
    """Mixture-mean latent field and weight-averaged theta."""
    grid = part.grid
    w = grid.weights
    xb = sum(wi * a.xb for wi, a in zip(w, grid.approximations))
    xt = sum(wi * a.xt for wi, a in zip(w, grid.approximations))
    theta = w @ grid.points
    return part.model.hyper(theta), xb, xt


@dataclass
class CriteriaEstimate:
    dic: float
    pd: float
    dic_mc_se: float
    waic: float
    pwaic: float
    dbar: float
    dhat: float
    pointwise_var_min: float
    n_units: int
    extra: dict = field(default_factory=dict)


def compute_criteria(fit, data=None, samples: int = 1000, seed: int = 0, unit: str = "record") -> CriteriaEstimate:
    """DIC and WAIC from ``samples`` mixture draws per fitted part.

    Deviance is the conditional likelihood given the latent field. For
    separate-submodel fits the parts' contributions are added.
    """
    if samples < MIN_SAMPLES:
        raise ValueError(f"at least {MIN_SAMPLES} posterior samples are required, got {samples}")
    dbar = dhat = 0.0
    dev_var = 0.0
    lppd = pw = 0.0
    vmin = np.inf
    units = 0
    for k, part in enumerate(fit.parts):
        model = part.model
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), k]))
        stream = _Stream()
        devs = []
        for h, xb, xt in _part_draws(part, samples, rng):
            ll_y, ll_t = batch_pointwise_loglik(model, xb, xt, h)
            devs.append(-2.0 * (ll_y.sum(axis=1) + ll_t.sum(axis=1)))
            stream.add(_units(model, ll_y, ll_t, unit))
        devs = np.concatenate(devs)
        h, xb, xt = _posterior_mean_point(part)
        ll_y, ll_t = batch_pointwise_loglik(model, xb[None], xt[None], h)
        dh = -2.0 * float(ll_y.sum() + ll_t.sum())
        dbar += float(devs.mean())
        dev_var += float(devs.var(ddof=1))
        dhat += dh
        if stream.n and stream.mean.size:
            lppd += float(stream.lppd.sum())
            v = stream.var
            pw += float(v.sum())
            vmin = min(vmin, float(v.min()))
            units += v.size
    if units == 0:
        raise ValueError("WAIC is undefined without data")
    pd = dbar - dhat
    return CriteriaEstimate(
        dic=2 * dbar - dhat, pd=pd, dic_mc_se=2.0 * float(np.sqrt(dev_var / samples)),
        waic=-2.0 * (lppd - pw), pwaic=pw, dbar=dbar, dhat=dhat,
        pointwise_var_min=vmin, n_units=units, extra={"pd_negative": pd < 0},
    )


def compute_dic(fit, data=None, samples: int = 1000, seed: int = 0):
    """``(DIC, pD, Monte Carlo standard error of DIC)``."""
    c = compute_criteria(fit, data, samples, seed)
    return c.dic, c.pd, c.dic_mc_se


def compute_waic(fit, data=None, samples: int = 1000, seed: int = 0, unit: str = "record"):
    """``(WAIC, pWAIC)`` with record-level (default) or subject-level units."""
    c = compute_criteria(fit, data, samples, seed, unit)
    return c.waic, c.pwaic


def attach_criteria(fit, samples: int = 1000, seed: int = 0, unit: str = "record") -> CriteriaEstimate:
    c = compute_criteria(fit, None, samples, seed, unit)
    fit.criteria = {"dic": c.dic, "pd": c.pd, "dic_mc_se": c.dic_mc_se, "waic": c.waic, "pwaic": c.pwaic,
                    "samples": samples, "seed": seed, "unit": unit, "pd_negative": bool(c.pd < 0)}
    return c


def _strength(diff: float) -> str:
    d = abs(diff)
    if d > 10:
        return "strong"
    if d >= 5:
        return "meaningful"
    return "negligible"


@dataclass
class ComparisonReport:
    rows: list  # dicts with model, dic, pd, waic, pwaic, flag
    pairs: list  # dicts with a, b, d_dic, d_waic, dic_strength, waic_strength

    def best(self, key: str = "dic") -> str:
        return min(self.rows, key=lambda r: r[key])["model"]


def compare_models(fits: dict, samples: int = 1000, seed: int = 0, unit: str = "record") -> ComparisonReport:
    """DIC/WAIC table over named fits with pairwise differences annotated."""
    rows = []
    for name, f in fits.items():
        c = compute_criteria(f, None, samples, seed, unit)
        rows.append({"model": name, "dic": c.dic, "pd": c.pd, "waic": c.waic, "pwaic": c.pwaic,
                     "flag": "negative_pd" if c.pd < 0 else ""})
    pairs = []
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            a, b = rows[i], rows[j]
            dd, dw = b["dic"] - a["dic"], b["waic"] - a["waic"]
            pairs.append({"a": a["model"], "b": b["model"], "d_dic": dd, "d_waic": dw,
                          "dic_strength": _strength(dd), "waic_strength": _strength(dw)})
    return ComparisonReport(rows, pairs)
