"""Deterministic approximate inference for the latent Gaussian joint model.

For each hyperparameter vector theta the latent field is approximated by a
Gaussian centred at the conditional mode, found by Newton iterations. The
hyperparameter posterior is approximated by::

    log pi(theta | data) ~ log lik(x*) - x*'Q x*/2 + logdet(Q)/2 - logdet(P)/2 + log pi(theta)

where ``P`` is the posterior precision at the mode ``x*``. A set of
integration points around the maximiser ``theta*`` (grid, central composite
design, or the mode alone) then yields mixture approximations of every
latent marginal.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.optimize as sopt
from scipy.interpolate import CubicSpline
from scipy.special import ndtr, owens_t

from .data import JointDataset
from .gmrf import ArrowFactor
from .model import (
    HyperParameters,
    JointModel,
    ModelSpec,
    encode_hyper,
    hyper_names,
    log_hyper_prior,
    natural_transforms,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("auto", "grid", "ccd", "eb")
CORRECTIONS = ("gaussian", "simplified_laplace")
QUANTILES = (0.025, 0.5, 0.975)

_BOUNDS = {
    "log_prec_obs": (-20.0, 20.0),
    "log_shape": (-3.0, 3.0),
    "log_prec_b0": (-20.0, 20.0),
    "log_prec_b1": (-20.0, 20.0),
    "z_rho": (-5.0, 5.0),
    "log_prec_spatial": (-20.0, 20.0),
    "logit_zeta": (-10.0, 10.0),
    "gamma1": (-30.0, 30.0),
    "gamma2": (-30.0, 30.0),
}


class ConvergenceError(RuntimeError):
    """Newton or hyperparameter optimisation failed to converge."""


class FitStageError(RuntimeError):
    """A fit failed; the message names the stage."""


_EVAL_ERRORS = (ConvergenceError, np.linalg.LinAlgError, FloatingPointError)


@dataclass(frozen=True)
class InferenceOptions:
    strategy: str = "auto"
    correction: str = "gaussian"
    newton_tol: float = 1e-6
    newton_maxiter: int = 50
    fd_step: float = 1e-4
    hess_step: float = 5e-3
    opt_maxiter: int = 200
    opt_gtol: float = 1e-3
    grid_step: float = 1.0
    grid_kmax: int = 5
    grid_drop: float = 6.0
    ccd_f0: float = 1.1
    n_abscissa: int = 75
    threads: int = 1
    theta0: tuple[tuple[str, float], ...] = ()
    densities: str = "tail"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.correction not in CORRECTIONS:
            raise ValueError(f"unknown correction {self.correction!r}")
        if self.densities not in ("tail", "all", "none"):
            raise ValueError("densities must be 'tail', 'all' or 'none'")
        object.__setattr__(self, "theta0", tuple((str(k), float(v)) for k, v in dict(self.theta0).items()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta0"] = dict(self.theta0)
        return d


# -- Gaussian approximation --------------------------------------------------

@dataclass
class GaussianApproximation:
    """Gaussian approximation of the latent field at one theta."""

    theta: np.ndarray
    hyper: HyperParameters
    xb: np.ndarray
    xt: np.ndarray
    factor: ArrowFactor
    log_post: float
    loglik: float
    iterations: int
    grad_norm: float

    @property
    def model(self) -> JointModel:
        return self.factor.model

    @property
    def mode(self) -> np.ndarray:
        """Mode in external latent ordering."""
        return self.model.layout.to_external(self.xb, self.xt)

    @property
    def precision_logdet(self) -> float:
        return self.factor.logdet

    def marginal_sd(self) -> np.ndarray:
        vb, vt = self.factor.marginal_variances()
        return np.sqrt(self.model.layout.to_external(vb, vt))


def _objective(model, h, Qt, xb, xt):
    ll, gb, gt, w = model.loglik_grad(xb, xt, h)
    Qxt = Qt @ xt
    Qxb = xb @ h.D_inv if model.q else xb
    f = ll - 0.5 * (float(xt @ Qxt) + float(np.sum(xb * Qxb)))
    return f, gb - Qxb, gt - Qxt, w, ll


def gaussian_approximation(
    model: JointModel,
    theta,
    warm_start: tuple[np.ndarray, np.ndarray] | GaussianApproximation | None = None,
    tol: float = 1e-6,
    maxiter: int = 50,
) -> GaussianApproximation:
    """Newton iterations for the conditional mode with step halving.

    Converges when the gradient max-norm drops below ``tol``; raises
    :class:`ConvergenceError` after ``maxiter`` iterations.
    """
    theta = np.asarray(theta, dtype=float).copy()
    h = model.hyper(theta)
    Qt = model.prior_tail_dense(h)
    if isinstance(warm_start, GaussianApproximation):
        warm_start = (warm_start.xb, warm_start.xt)
    if warm_start is None:
        xb, xt = model.initial_latent(h)
    else:
        xb, xt = np.array(warm_start[0], dtype=float), np.array(warm_start[1], dtype=float)
    f, gb, gt, w, ll = _objective(model, h, Qt, xb, xt)
    it = 0
    gmax = np.inf
    while True:
        gmax = max(np.abs(gb).max(initial=0.0), np.abs(gt).max(initial=0.0))
        if gmax < tol:
            break
        if it >= maxiter:
            raise ConvergenceError(f"Newton did not converge in {maxiter} iterations (max|grad|={gmax:.3g})")
        try:
            fac = ArrowFactor(model, h, w, Qt)
        except np.linalg.LinAlgError as e:
            raise ConvergenceError(f"Newton step failed: {e}") from None
        db, dt = fac.solve(gb, gt)
        dmax = max(np.abs(db).max(initial=0.0), np.abs(dt).max(initial=0.0))
        xmax = max(np.abs(xb).max(initial=0.0), np.abs(xt).max(initial=0.0))
        if dmax < 1e-13 * (1.0 + xmax):
            logger.debug("Newton step negligible at max|grad|=%.3g; accepting mode", gmax)
            break
        step = 1.0
        while True:
            nb, nt = xb + step * db, xt + step * dt
            try:
                res = _objective(model, h, Qt, nb, nt)
            except FloatingPointError:
                res = None
            if res is not None and res[0] >= f - 1e-12 * (1.0 + abs(f)):
                break
            step *= 0.5
            if step < 1e-10:
                raise ConvergenceError("Newton line search failed")
        xb, xt = nb, nt
        f, gb, gt, w, ll = res
        it += 1
    if gmax < tol and gmax > 0:
        # one polishing step: quadratic convergence takes the mode well below tol
        db, dt = ArrowFactor(model, h, w, Qt).solve(gb, gt)
        try:
            res = _objective(model, h, Qt, xb + db, xt + dt)
        except FloatingPointError:
            res = None
        if res is not None and res[0] >= f - 1e-12 * (1.0 + abs(f)):
            xb, xt = xb + db, xt + dt
            f, gb, gt, w, ll = res
            gmax = max(np.abs(gb).max(initial=0.0), np.abs(gt).max(initial=0.0))
    fac = ArrowFactor(model, h, w, Qt)
    lp = f + 0.5 * model.prior_logdet(h) - 0.5 * fac.logdet + log_hyper_prior(model.spec, theta)
    return GaussianApproximation(theta, h, xb, xt, fac, float(lp), float(ll), it, float(gmax))


def _robust_approximation(model, theta, start, opts: InferenceOptions) -> GaussianApproximation:
    try:
        return gaussian_approximation(model, theta, start, opts.newton_tol, opts.newton_maxiter)
    except ConvergenceError:
        if start is None:
            raise
        logger.info("warm-started Newton failed at theta=%s; retrying from zero", np.round(theta, 4))
        return gaussian_approximation(model, theta, None, opts.newton_tol, opts.newton_maxiter)


def log_hyper_posterior(model: JointModel, theta, warm_start=None, tol: float = 1e-6) -> float:
    """Laplace approximation of the unnormalised log posterior of theta."""
    return gaussian_approximation(model, theta, warm_start, tol).log_post


# -- hyperparameter exploration ------------------------------------------------

class _Evaluator:
    """Memoised, optionally threaded evaluation of the hyperposterior."""

    def __init__(self, model: JointModel, opts: InferenceOptions):
        self.model = model
        self.opts = opts
        self.cache: dict[bytes, float] = {}
        self.n_evals = 0

    def _pool_map(self, fn, items):
        if self.opts.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.opts.threads) as ex:
                return list(ex.map(fn, items))
        return [fn(it) for it in items]

    def approx_many(self, thetas, start) -> list[GaussianApproximation]:
        def one(t):
            return _robust_approximation(self.model, t, start, self.opts)

        out = self._pool_map(one, [np.asarray(t, dtype=float) for t in thetas])
        self.n_evals += len(out)
        return out

    def lp_many(self, thetas, start) -> np.ndarray:
        thetas = [np.asarray(t, dtype=float) for t in thetas]
        keys = [t.tobytes() for t in thetas]
        todo = [(k, t) for k, t in dict(zip(keys, thetas)).items() if k not in self.cache]
        if todo:
            res = self.approx_many([t for _, t in todo], start)
            for (k, _), a in zip(todo, res):
                self.cache[k] = a.log_post
        return np.array([self.cache[k] for k in keys])


def initial_theta(model: JointModel, opts: InferenceOptions | None = None) -> np.ndarray:
    """Moment-based starting values on the transformed scale."""
    nat = {}
    if model.n_obs:
        beta, *_ = np.linalg.lstsq(model.X, model.y, rcond=None)
        r = model.y - model.X @ beta
        v = max(float(r @ r) / max(model.n_obs - model.pb, 1), 1e-8)
        nat["prec_obs"] = 2.0 / v if model.q else 1.0 / v
        nat["prec_b0"] = 2.0 / v
        nat["prec_b1"] = 2.0 / v
    theta = encode_hyper(model.spec, **nat)
    names = hyper_names(model.spec)
    if opts is not None:
        for k, v in opts.theta0:
            if k in names:
                theta[names.index(k)] = v
    return theta


@dataclass
class HyperGrid:
    """Integration points in theta space with normalised weights."""

    names: list[str]
    theta_star: np.ndarray
    hessian: np.ndarray | None
    points: np.ndarray
    log_post: np.ndarray
    weights: np.ndarray
    strategy: str
    design_weights: np.ndarray | None = None
    z: np.ndarray | None = None
    approximations: list[GaussianApproximation] = field(default_factory=list, repr=False)
    optimizer: dict = field(default_factory=dict)
    marginal_lines: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def star_index(self) -> int:
        return int(np.flatnonzero(np.all(self.points == self.theta_star, axis=1))[0])

    @property
    def covariance(self) -> np.ndarray | None:
        if self.hessian is None:
            return None
        return np.linalg.inv(self.hessian)


def _fd_gradient(ev: _Evaluator, theta, h, start):
    m = theta.size
    pts = []
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        pts += [theta + e, theta - e]
    lp = ev.lp_many(pts, start)
    return (lp[0::2] - lp[1::2]) / (2 * h)


def fd_hessian(fun_many, theta, h) -> np.ndarray:
    """Central finite-difference Hessian from a batched function."""
    m = theta.size
    pts = [theta]
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        pts += [theta + e, theta - e]
    pairs = list(itertools.combinations(range(m), 2))
    for j, k in pairs:
        ej, ek = np.zeros(m), np.zeros(m)
        ej[j], ek[k] = h, h
        pts += [theta + ej + ek, theta + ej - ek, theta - ej + ek, theta - ej - ek]
    v = fun_many(pts)
    f0 = v[0]
    H = np.zeros((m, m))
    for k in range(m):
        H[k, k] = (v[1 + 2 * k] - 2 * f0 + v[2 + 2 * k]) / h ** 2
    base = 1 + 2 * m
    for n, (j, k) in enumerate(pairs):
        a, b, c, d = v[base + 4 * n: base + 4 * n + 4]
        H[j, k] = H[k, j] = (a - b - c + d) / (4 * h * h)
    return H


def find_mode(model: JointModel, opts: InferenceOptions, ev: _Evaluator | None = None):
    """Maximise the hyperposterior by quasi-Newton with finite-difference gradients.

    Returns ``(theta_star, approximation_at_theta_star, info)``.
    """
    names = hyper_names(model.spec)
    ev = ev or _Evaluator(model, opts)
    theta0 = initial_theta(model, opts)
    if not names:
        a = gaussian_approximation(model, theta0, None, opts.newton_tol, opts.newton_maxiter)
        return theta0, a, {"iterations": 0, "evaluations": 1, "converged": True, "message": "no free hyperparameters"}
    anchor = {"approx": _robust_approximation(model, theta0, None, opts)}
    ev.cache[theta0.tobytes()] = anchor["approx"].log_post

    def fun_grad(theta):
        theta = np.asarray(theta, dtype=float)
        try:
            a = _robust_approximation(model, theta, anchor["approx"], opts)
            ev.n_evals += 1
            ev.cache[theta.tobytes()] = a.log_post
            g = _fd_gradient(ev, theta, opts.fd_step, a)
        except _EVAL_ERRORS as e:
            # reject the trial point so the line search backtracks
            logger.info("hyperposterior evaluation failed at theta=%s (%s)", np.round(theta, 4), e)
            return abs(anchor["approx"].log_post) * 10 + 1e10, np.zeros_like(theta)
        anchor["approx"] = a
        return -a.log_post, -g

    bounds = [_BOUNDS[n] for n in names]
    theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
    res = sopt.minimize(
        fun_grad, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": opts.opt_maxiter, "gtol": opts.opt_gtol, "ftol": 1e-13, "maxcor": 20},
    )
    theta_star = np.asarray(res.x, dtype=float)
    gnorm = float(np.max(np.abs(res.jac))) if res.jac is not None else np.nan
    converged = bool(res.success) or gnorm < 10 * opts.opt_gtol
    info = {"iterations": int(res.nit), "evaluations": int(ev.n_evals), "converged": converged,
            "message": str(res.message), "grad_max": gnorm}
    if not converged:
        raise ConvergenceError(f"hyperparameter optimisation did not converge: {res.message} (max|grad|={gnorm:.3g})")
    # canonical mode: cold start, so refits from the saved theta reproduce it exactly
    a_star = gaussian_approximation(model, theta_star, None, opts.newton_tol, 200)
    return theta_star, a_star, info


def _ccd_design(m: int, f0: float) -> np.ndarray:
    """Centre, axial and (fractional) factorial points, all non-centre at radius ``f0*sqrt(m)``."""
    r = f0 * np.sqrt(m)
    pts = [np.zeros(m)]
    for k in range(m):
        for s in (1.0, -1.0):
            e = np.zeros(m)
            e[k] = s * r
            pts.append(e)
    nb = min(m, 5)
    base = np.array(list(itertools.product((1.0, -1.0), repeat=nb)))
    cols = [base[:, j] for j in range(nb)]
    gens = [c for size in (nb, nb - 1, 3) for c in itertools.combinations(range(nb), size) if size >= 2]
    for j in range(m - nb):
        cols.append(np.prod(base[:, list(gens[j])], axis=1))
    corners = np.column_stack(cols) * f0
    pts.extend(corners)
    pts = np.array(pts)
    _, idx = np.unique(np.round(pts, 12), axis=0, return_index=True)
    return pts[np.sort(idx)]


def explore_hypergrid(
    model: JointModel,
    strategy: str = "auto",
    opts: InferenceOptions | None = None,
) -> HyperGrid:
    """Locate ``theta*`` and build integration points with weights.

    ``grid`` walks each standardised axis in steps of ``grid_step`` up to
    ``grid_kmax`` steps while the log-posterior stays within ``grid_drop``
    of the maximum, then evaluates the tensor product of the retained
    ranges. ``ccd`` places a central composite design in the eigenbasis of
    the inverse Hessian. ``eb`` keeps ``theta*`` alone.
    """
    opts = opts or InferenceOptions()
    names = hyper_names(model.spec)
    m = len(names)
    if strategy == "auto":
        strategy = "eb" if m == 0 else ("grid" if m <= 2 else "ccd")
    if m > 10:
        raise ValueError("at most 10 hyperparameters are supported")
    ev = _Evaluator(model, opts)
    theta_star, a_star, info = find_mode(model, opts, ev)

    if strategy == "eb" or m == 0:
        return HyperGrid(names, theta_star, None, theta_star[None, :].copy(), np.array([a_star.log_post]),
                         np.array([1.0]), "eb", approximations=[a_star], optimizer=info)

    def lp_many(pts):
        return ev.lp_many(pts, a_star)

    H = -fd_hessian(lp_many, theta_star, opts.hess_step)
    H = 0.5 * (H + H.T)
    wv, V = np.linalg.eigh(H)
    if np.any(wv <= 0):
        logger.warning("hyperposterior Hessian not positive definite at theta*; clipping eigenvalues")
        wv = np.maximum(wv, 1e-6 * max(wv.max(), 1.0))
        H = (V * wv) @ V.T
    Sigma = np.linalg.inv(H)
    lp_star = a_star.log_post

    if strategy == "grid":
        sd = np.sqrt(np.diag(Sigma))
        step = opts.grid_step
        ranges = []
        for k in range(m):
            kept = [0]
            for sgn in (1, -1):
                for j in range(1, opts.grid_kmax + 1):
                    t = theta_star.copy()
                    t[k] += sgn * j * step * sd[k]
                    if lp_many([t])[0] < lp_star - opts.grid_drop:
                        break
                    kept.append(sgn * j)
            ranges.append(sorted(kept))
        Z = np.array(list(itertools.product(*ranges)), dtype=float) * step
        pts = theta_star[None, :] + Z * sd[None, :]
        lp = lp_many(list(pts))
        keep = lp >= lp_star - opts.grid_drop
        keep[np.all(Z == 0, axis=1)] = True
        Z, pts, lp = Z[keep], pts[keep], lp[keep]
        dw = np.ones(len(lp))
    elif strategy == "ccd":
        Z = _ccd_design(m, opts.ccd_f0)
        rot = V * (1.0 / np.sqrt(wv))[None, :]
        pts = theta_star[None, :] + Z @ rot.T
        lp = lp_many(list(pts))
        n = len(Z)
        f0 = opts.ccd_f0
        dw = np.ones(n)
        if n > 1:
            ratio = np.exp(0.5 * m * f0 * f0) / ((n - 1) * (f0 * f0 - 1.0))
            dw[1:] = ratio
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    pts[np.all(Z == 0, axis=1)] = theta_star
    logw = np.log(dw) + lp - lp.max()
    wts = np.exp(logw - logw.max())
    wts /= wts.sum()
    approx = []
    for p in pts:
        if np.array_equal(p, theta_star):
            approx.append(a_star)
        else:
            approx.append(None)
    todo = [i for i, a in enumerate(approx) if a is None]
    for i, a in zip(todo, ev.approx_many([pts[i] for i in todo], a_star)):
        approx[i] = a
    grid = HyperGrid(names, theta_star, H, pts, lp, wts, strategy, dw, Z, approx, optimizer=info)
    if strategy == "ccd":
        grid.marginal_lines = _ccd_marginal_lines(ev, a_star, theta_star, Sigma)
    info["evaluations"] = ev.n_evals
    return grid


def _ccd_marginal_lines(ev, a_star, theta_star, Sigma) -> dict:
    """Log-posterior along the conditional-mean line of each coordinate."""
    out = {}
    ts = np.array([-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0])
    all_pts, spans = [], []
    for j in range(len(theta_star)):
        sd = np.sqrt(Sigma[j, j])
        u = Sigma[:, j] / Sigma[j, j]
        pts = [theta_star + u * t * sd for t in ts]
        pts[3] = theta_star
        spans.append((len(all_pts), sd))
        all_pts += pts
    lp = ev.lp_many(all_pts, a_star)
    for j, (s0, sd) in enumerate(spans):
        out[j] = (theta_star[j] + ts * sd, lp[s0: s0 + len(ts)])
    return out


# -- marginals -------------------------------------------------------------------

@dataclass
class MarginalSummary:
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float

    def as_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "q025": self.q025, "q50": self.q50, "q975": self.q975}


@dataclass
class LatentMarginal:
    name: str
    abscissa: np.ndarray
    density: np.ndarray
    summary: MarginalSummary


def _skewnorm_params(mean, sd, skew):
    """Skew-normal ``(loc, scale, shape)`` with the given first three moments."""
    g = np.clip(skew, -0.99, 0.99)
    ag = np.abs(g) ** (2.0 / 3.0)
    delta = np.sign(g) * np.sqrt((np.pi / 2) * ag / (ag + ((4 - np.pi) / 2) ** (2.0 / 3.0)))
    shape = delta / np.sqrt(1 - delta ** 2)
    scale = sd / np.sqrt(1 - 2 * delta ** 2 / np.pi)
    loc = mean - scale * delta * np.sqrt(2 / np.pi)
    return loc, scale, shape


def _component_cdf(x, loc, scale, shape):
    z = (x - loc) / scale
    if shape is None:
        return ndtr(z)
    return ndtr(z) - 2.0 * owens_t(z, shape)


def _component_pdf(x, loc, scale, shape):
    z = (x - loc) / scale
    phi = np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi) / scale
    if shape is None:
        return phi
    return 2.0 * phi * ndtr(shape * z)


class MixtureMarginals:
    """Per-coordinate mixtures over integration points.

    Arrays have shape ``(R, n)`` for ``R`` points and ``n`` coordinates;
    ``shape`` holds skew-normal shape parameters or ``None`` (Gaussian).
    """

    def __init__(self, weights, loc, scale, shape=None, mean=None, sd=None):
        self.w = np.asarray(weights, dtype=float)
        self.loc = np.atleast_2d(loc)
        self.scale = np.atleast_2d(scale)
        self.shape = None if shape is None else np.atleast_2d(shape)
        # component moments
        self.cmean = self.loc if mean is None else np.atleast_2d(mean)
        self.csd = self.scale if sd is None else np.atleast_2d(sd)

    @property
    def mean(self) -> np.ndarray:
        return self.w @ self.cmean

    @property
    def sd(self) -> np.ndarray:
        m = self.mean
        v = self.w @ (self.csd ** 2 + self.cmean ** 2) - m ** 2
        return np.sqrt(np.maximum(v, 0.0))

    def _params(self, x, cols):
        # component arrays broadcast against x, whose last axis indexes coordinates
        cols = slice(None) if cols is None else cols
        R = len(self.w)

        def shaped(a):
            a = a[:, cols]
            return a.reshape((R,) + (1,) * (x.ndim - 1) + a.shape[1:])

        sh = None if self.shape is None else shaped(self.shape)
        return shaped(self.loc), shaped(self.scale), sh

    def cdf(self, x, cols=None):
        x = np.asarray(x, dtype=float)
        loc, scale, sh = self._params(x, cols)
        return np.einsum("r,r...->...", self.w, _component_cdf(x[None], loc, scale, sh))

    def pdf(self, x, cols=None):
        x = np.asarray(x, dtype=float)
        loc, scale, sh = self._params(x, cols)
        return np.einsum("r,r...->...", self.w, _component_pdf(x[None], loc, scale, sh))

    def quantiles(self, probs=QUANTILES) -> np.ndarray:
        """Quantiles by vectorised bisection on the mixture distribution function."""
        lo = np.min(self.cmean - 10 * self.csd, axis=0)
        hi = np.max(self.cmean + 10 * self.csd, axis=0)
        if len(self.w) == 1 and self.shape is None:
            from scipy.special import ndtri

            return np.array([self.loc[0] + self.scale[0] * ndtri(p) for p in probs])
        out = []
        for p in probs:
            a, b = lo.copy(), hi.copy()
            for _ in range(60):
                mid = 0.5 * (a + b)
                below = self.cdf(mid) < p
                a = np.where(below, mid, a)
                b = np.where(below, b, mid)
            out.append(0.5 * (a + b))
        return np.array(out)

    def abscissa(self, j: int, n: int = 75) -> np.ndarray:
        lo = np.min(self.cmean[:, j] - 6 * self.csd[:, j])
        hi = np.max(self.cmean[:, j] + 6 * self.csd[:, j])
        return np.linspace(lo, hi, n)


def _sla_tail(a: GaussianApproximation):
    """Simplified-Laplace mean shift and skewness for every tail coordinate.

    Returns ``(shift, skew)`` in standardised units. Only survival records
    have a non-zero third derivative (``-exp(eta) T^shape``).
    """
    model = a.model
    fac = a.factor
    m = model.m
    if not model.spec.has_surv:
        return np.zeros(m), np.zeros(m)
    L = model.layout
    N = model.N
    eta = model.eta_surv(a.xb, a.xt, a.hyper)
    w, _ = model.cumhaz(eta, a.hyper)
    d3 = -w
    G = np.zeros((m, N))
    G[L.alpha] = model.X2.T
    if model.K:
        G[L.nu.start + model.region, np.arange(N)] += 1.0
    extra = 0.0
    g = a.hyper.gamma_vec
    if model.q and np.any(g != 0):
        Eg = np.einsum("iqc,q->ic", fac.E, g)
        np.add.at(G, (model.compact_cols, np.broadcast_to(np.arange(N)[:, None], model.compact_cols.shape)), -Eg)
        extra = np.einsum("q,iqr,r->i", g, fac.Ainv, g)
    St = fac.tail_cov
    Cov = St @ G  # (m, N)
    v = np.einsum("mi,mi->i", G, Cov) + extra
    sj = np.sqrt(np.diag(St))
    b = Cov / sj[:, None]
    cond_var = np.maximum(v[None, :] - b ** 2, 0.0)
    g1 = 0.5 * np.sum(d3[None, :] * cond_var * b, axis=1)
    g3 = np.sum(d3[None, :] * b ** 3, axis=1)
    return g1 + 0.5 * g3, g3


def latent_mixture(grid: HyperGrid, correction: str = "gaussian") -> MixtureMarginals:
    """Mixture marginals for every latent coordinate (external order)."""
    mus, sds, shapes, locs, scales = [], [], [], [], []
    use_sla = correction == "simplified_laplace"
    for a in grid.approximations:
        mu = a.mode
        sd = a.marginal_sd()
        mus.append(mu)
        sds.append(sd)
        if use_sla:
            shift, skew = _sla_tail(a)
            te = a.model.layout.tail_external
            sk = np.zeros_like(mu)
            mu = mu.copy()
            mu[te] = mu[te] + sd[te] * shift
            sk[te] = skew
            mus[-1] = mu
            loc, scale, shp = _skewnorm_params(mu, sd, sk)
            locs.append(loc)
            scales.append(scale)
            shapes.append(shp)
    if use_sla:
        return MixtureMarginals(grid.weights, np.array(locs), np.array(scales), np.array(shapes),
                                mean=np.array(mus), sd=np.array(sds))
    return MixtureMarginals(grid.weights, np.array(mus), np.array(sds))


def latent_marginal(j, grid: HyperGrid, correction: str = "gaussian", n_abscissa: int = 75,
                    mixture: MixtureMarginals | None = None) -> LatentMarginal:
    """Marginal density and summaries of latent coordinate ``j`` (index or name)."""
    layout = grid.approximations[0].model.layout
    if isinstance(j, str):
        if j not in layout.name_index:
            raise IndexError(f"unknown latent coordinate {j!r}")
        j = layout.name_index[j]
    if not 0 <= j < layout.dim:
        raise IndexError(f"latent index {j} out of range [0, {layout.dim})")
    mix = mixture or latent_mixture(grid, correction)
    x = mix.abscissa(j, n_abscissa)
    cols = np.array([j])
    dens = mix.pdf(x[:, None], cols)[:, 0]
    q = mix.quantiles()[:, j]
    s = MarginalSummary(float(mix.mean[j]), float(mix.sd[j]), float(q[0]), float(q[1]), float(q[2]))
    return LatentMarginal(layout.names[j], x, dens, s)


@dataclass
class HyperMarginal:
    name: str
    theta_abscissa: np.ndarray
    theta_density: np.ndarray
    internal: MarginalSummary
    natural: dict  # label -> (MarginalSummary, abscissa, density)
    degenerate: bool = False


_trap = getattr(np, "trapezoid", None) or np.trapz


def _summaries_from_density(x, logd, name):
    xf = np.linspace(x[0], x[-1], 801)
    if len(x) >= 3:
        ld = CubicSpline(x, logd)(xf)
    else:
        ld = np.interp(xf, x, logd)
    d = np.exp(ld - ld.max())
    d /= _trap(d, xf)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(xf))])
    cdf /= cdf[-1]
    qs = np.interp(QUANTILES, cdf, xf)
    natural = {}
    trap = _trap
    mean = float(trap(xf * d, xf))
    sd = float(np.sqrt(max(trap((xf - mean) ** 2 * d, xf), 0.0)))
    for label, g, inc in natural_transforms(name):
        gx = g(xf)
        gm = float(trap(gx * d, xf))
        gs = float(np.sqrt(max(trap((gx - gm) ** 2 * d, xf), 0.0)))
        gq = g(qs) if inc else g(qs[::-1])
        jac = np.abs(np.gradient(gx, xf))
        nd = d / np.maximum(jac, 1e-300)
        order = np.argsort(gx)
        natural[label] = (MarginalSummary(gm, gs, float(gq[0]), float(gq[1]), float(gq[2])), gx[order][::10], nd[order][::10])
    return xf[::10], d[::10], MarginalSummary(mean, sd, float(qs[0]), float(qs[1]), float(qs[2])), natural


def hyper_marginal(j, grid: HyperGrid) -> HyperMarginal:
    """Posterior marginal of hyperparameter ``j`` with natural-scale summaries."""
    if isinstance(j, str):
        j = grid.names.index(j)
    name = grid.names[j]
    t0 = grid.theta_star[j]
    if grid.strategy == "eb" or grid.size == 1:
        warnings.warn(f"single-point grid: {name} summarised by a point mass", RuntimeWarning, stacklevel=2)
        nat = {}
        for label, g, _ in natural_transforms(name):
            v = float(g(np.array(t0)))
            nat[label] = (MarginalSummary(v, 0.0, v, v, v), np.array([v]), np.array([np.inf]))
        s = MarginalSummary(float(t0), 0.0, float(t0), float(t0), float(t0))
        return HyperMarginal(name, np.array([t0]), np.array([np.inf]), s, nat, degenerate=True)
    if grid.strategy == "grid":
        z = np.round(grid.z[:, j], 9)
        levels = np.unique(z)
        mass = np.array([grid.weights[z == lv].sum() for lv in levels])
        x = np.array([grid.points[np.flatnonzero(z == lv)[0], j] for lv in levels])
        logd = np.log(np.maximum(mass, 1e-300))
        if len(x) < 3:
            sd = np.sqrt(grid.covariance[j, j])
            x = t0 + sd * np.linspace(-4, 4, 9)
            logd = -0.5 * ((x - t0) / sd) ** 2
    else:
        x, logd = grid.marginal_lines[j]
    xa, da, s, nat = _summaries_from_density(np.asarray(x, float), np.asarray(logd, float), name)
    return HyperMarginal(name, xa, da, s, nat)


# -- fit ---------------------------------------------------------------------------

@dataclass
class PartFit:
    spec: ModelSpec
    model: JointModel
    grid: HyperGrid


@dataclass
class FitResult:
    """Outcome of :func:`fit`.

    ``latent`` maps each summary column (``name, mean, sd, q025, q50, q975``)
    to a list; ``hyper`` holds one row per hyperparameter and natural-scale
    label. Separate-submodel fits keep one :class:`PartFit` per submodel.
    """

    spec: ModelSpec
    options: InferenceOptions
    parts: list[PartFit]
    latent: dict
    hyper: list[dict]
    latent_densities: dict = field(default_factory=dict)
    hyper_densities: dict = field(default_factory=dict)
    criteria: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def latent_summary(self, name: str) -> MarginalSummary:
        i = self.latent["name"].index(name)
        return MarginalSummary(*(self.latent[k][i] for k in ("mean", "sd", "q025", "q50", "q975")))

    def hyper_summary(self, label: str) -> MarginalSummary:
        for row in self.hyper:
            if row["label"] == label:
                return MarginalSummary(row["mean"], row["sd"], row["q025"], row["q50"], row["q975"])
        raise KeyError(label)

    def estimate(self, name: str) -> float:
        """Posterior mean of a latent coordinate or natural-scale hyperparameter."""
        if name in self.latent["name"]:
            return self.latent_summary(name).mean
        return self.hyper_summary(name).mean

    @property
    def log_evidence(self) -> float:
        """Sum over parts of the log normalising constant of the integration weights."""
        tot = 0.0
        for p in self.parts:
            g = p.grid
            lw = g.log_post + (np.log(g.design_weights) if g.design_weights is not None else 0.0)
            tot += float(lw.max() + np.log(np.sum(np.exp(lw - lw.max()))))
        return tot

    def to_json_dict(self) -> dict:
        parts = []
        for p in self.parts:
            g = p.grid
            parts.append({
                "spec": p.spec.to_dict(),
                "hyper_names": g.names,
                "strategy": g.strategy,
                "theta_star": g.theta_star.tolist(),
                "hessian": None if g.hessian is None else g.hessian.tolist(),
                "points": g.points.tolist(),
                "log_post": g.log_post.tolist(),
                "weights": g.weights.tolist(),
                "design_weights": None if g.design_weights is None else g.design_weights.tolist(),
                "z": None if g.z is None else g.z.tolist(),
                "spline": None if p.model.spline is None else {
                    "degree": p.model.spline.degree,
                    "interior_knots": list(p.model.spline.interior_knots),
                    "boundary": list(p.model.spline.boundary)},
                "optimizer": g.optimizer,
            })
        return {
            "format": "sjlgm-fit/1",
            "spec": self.spec.to_dict(),
            # thread count does not affect results and is left out for reproducibility
            "options": {k: v for k, v in self.options.to_dict().items() if k != "threads"},
            "parts": parts,
            "latent": self.latent,
            "hyper": self.hyper,
            "latent_densities": {k: {"abscissa": list(v[0]), "density": list(v[1])} for k, v in self.latent_densities.items()},
            "hyper_densities": {k: {"abscissa": list(v[0]), "density": list(v[1])} for k, v in self.hyper_densities.items()},
            "criteria": self.criteria,
            "log_evidence": self.log_evidence,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(_finite(self.to_json_dict()), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path, data: JointDataset) -> "FitResult":
        """Reload a saved fit and rebuild its Gaussian approximations on ``data``."""
        from .splines import SplineConfig

        with open(path) as fh:
            d = json.load(fh)
        spec = ModelSpec.from_dict(d["spec"])
        opts = InferenceOptions(**d["options"])
        parts = []
        for pd in d["parts"]:
            pspec = ModelSpec.from_dict(pd["spec"])
            spl = pd.get("spline")
            spline = SplineConfig(spl["degree"], tuple(spl["interior_knots"]), tuple(spl["boundary"])) if spl else None
            model = JointModel(pspec, data, spline)
            pts = np.array(pd["points"], dtype=float).reshape(len(pd["weights"]), len(pd["hyper_names"]))
            ts = np.array(pd["theta_star"], dtype=float)
            a_star = gaussian_approximation(model, ts, None, opts.newton_tol, 200)
            approx = []
            for p in pts:
                approx.append(a_star if np.array_equal(p, ts) else
                              _robust_approximation(model, p, a_star, opts))
            g = HyperGrid(
                list(pd["hyper_names"]), ts, None if pd["hessian"] is None else np.array(pd["hessian"]),
                pts, np.array(pd["log_post"]), np.array(pd["weights"]), pd["strategy"],
                None if pd["design_weights"] is None else np.array(pd["design_weights"]),
                None if pd["z"] is None else np.array(pd["z"]), approx, pd.get("optimizer", {}),
            )
            parts.append(PartFit(pspec, model, g))
        ld = {k: (np.array(v["abscissa"]), np.array(v["density"])) for k, v in d["latent_densities"].items()}
        hd = {k: (np.array(v["abscissa"]), np.array(v["density"])) for k, v in d["hyper_densities"].items()}
        return cls(spec, opts, parts, d["latent"], d["hyper"], ld, hd, d.get("criteria", {}))


def _finite(obj):
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.generic):
        return _finite(obj.item())
    return obj


def summarize_part(part: PartFit, opts: InferenceOptions):
    """Latent and hyperparameter summaries for one fitted submodel."""
    grid = part.grid
    layout = part.model.layout
    mix = latent_mixture(grid, opts.correction)
    q = mix.quantiles()
    latent = {
        "name": list(layout.names),
        "mean": mix.mean.tolist(),
        "sd": mix.sd.tolist(),
        "q025": q[0].tolist(),
        "q50": q[1].tolist(),
        "q975": q[2].tolist(),
    }
    dens = {}
    if opts.densities != "none":
        idx = layout.tail_external if opts.densities == "tail" else np.arange(layout.dim)
        for j in idx:
            x = mix.abscissa(int(j), opts.n_abscissa)
            dens[layout.names[j]] = (x, mix.pdf(x[:, None], np.array([j]))[:, 0])
    hyper, hdens = [], {}
    with warnings.catch_warnings():
        if grid.strategy == "eb":
            warnings.simplefilter("ignore", RuntimeWarning)
        for j, name in enumerate(grid.names):
            hm = hyper_marginal(j, grid)
            s = hm.internal
            hyper.append({"name": name, "label": name, "scale": "internal", **s.as_dict()})
            if not hm.degenerate:
                hdens[name] = (hm.theta_abscissa, hm.theta_density)
            for label, (ns, xa, da) in hm.natural.items():
                hyper.append({"name": name, "label": label, "scale": "natural", **ns.as_dict()})
                if not hm.degenerate:
                    hdens[label] = (xa, da)
    # fixed hyperparameters are reported as point values
    for name, val in part.spec.fixed_hyper:
        for label, g, _ in natural_transforms(name):
            v = float(g(np.array(val)))
            hyper.append({"name": name, "label": label, "scale": "fixed", "mean": v, "sd": 0.0,
                          "q025": v, "q50": v, "q975": v})
    return latent, hyper, dens, hdens


def fit(spec: ModelSpec, data: JointDataset, options: InferenceOptions | None = None,
        splines: Sequence | None = None) -> FitResult:
    """Fit ``spec`` to ``data``; separate specs fit each submodel independently."""
    opts = options or InferenceOptions()
    t0 = time.perf_counter()
    parts = []
    timing = {}
    for k, sub in enumerate(spec.submodels()):
        stage = "model setup"
        try:
            model = JointModel(sub, data, None if splines is None else splines[k])
            stage = "hyperparameter exploration"
            ts = time.perf_counter()
            grid = explore_hypergrid(model, opts.strategy, opts)
            timing[f"{sub.name}:explore"] = time.perf_counter() - ts
        except Exception as e:  # noqa: BLE001 - re-raised with the stage name
            raise FitStageError(f"fit of {sub.name} failed during {stage}: {e}") from e
        parts.append(PartFit(sub, model, grid))
    latent = {k: [] for k in ("name", "mean", "sd", "q025", "q50", "q975")}
    hyper, ld, hd = [], {}, {}
    ts = time.perf_counter()
    try:
        for p in parts:
            lat, hy, dens, hdens = summarize_part(p, opts)
            for k in latent:
                latent[k].extend(lat[k])
            hyper.extend(hy)
            ld.update(dens)
            hd.update(hdens)
    except Exception as e:  # noqa: BLE001
        raise FitStageError(f"fit of {spec.name} failed during marginal summaries: {e}") from e
    timing["summaries"] = time.perf_counter() - ts
    timing["total"] = time.perf_counter() - t0
    return FitResult(spec, opts, parts, latent, hyper, ld, hd, {}, timing)
