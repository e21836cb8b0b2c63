"""Joint model specification, latent layout, priors and likelihood.

Longitudinal submodel::

    y_ij = x1_i' beta + g(s_ij) + z_ij' b_i + e_ij,   e_ij ~ N(0, sigma^2)

with ``g`` a clamped B-spline whose first coefficient absorbs the intercept,
``z_ij = (1, s_ij)`` and ``b_i ~ N(0, D)``.

Survival submodel (Weibull proportional hazards)::

    h_i(t) = shape * t^(shape-1) * exp(x2_i' alpha + gamma' b_i + nu_k(i))

with ``nu`` a proper-Besag field. The linkage coefficients ``gamma`` are
treated as hyperparameters, so the latent field is Gaussian given theta.

Internally the latent vector is split into the per-subject random effects
``xb`` with shape ``(N, q)`` and the tail ``xt = [beta, nu, alpha]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .data import JointDataset
from .spatial import CarStructure
from .splines import SplineConfig, basis_dimension, evaluate_basis, make_config

logger = logging.getLogger(__name__)

ETA_CLAMP = 35.0
LOG_2PI = float(np.log(2 * np.pi))

RANDOM_EFFECTS = {"none": 0, "intercept": 1, "intercept_slope": 2}
LINKAGES = ("none", "b0", "b1", "both")
OUTCOMES = ("joint", "longitudinal", "survival")


class ModelError(ValueError):
    """Specification inconsistent with itself or with the data."""


@dataclass(frozen=True)
class Priors:
    """Hyperprior settings.

    Precisions get ``Gamma(prec_shape, prec_rate)`` on their natural scale.
    The remaining entries are normal variances on the transformed scale.
    """

    prec_shape: float = 1.0
    prec_rate: float = 5e-5
    log_shape_var: float = 100.0
    gamma_var: float = 10.0
    z_rho_var: float = 3.0
    logit_zeta_var: float = 3.0
    fixed_effect_precision: float = 0.001


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one joint-model variant.

    Parameters
    ----------
    long_covariates, surv_covariates : tuple of str or None
        Covariate columns; ``None`` uses every column in the dataset.
    spline_degree : int or None
        ``None`` replaces the spline by an explicit intercept.
    spline_nknots, spline_knots
        Quantile-placed or explicit interior knots.
    random_effects : {"none", "intercept", "intercept_slope"}
    linkage : {"none", "b0", "b1", "both"}
    spatial : bool
    zeta : float or None
        Fixed mixing ratio, or ``None`` to estimate it.
    outcomes : {"joint", "longitudinal", "survival"}
    separate : bool
        Fit the two submodels independently (linkage must be ``"none"``).
    fixed_hyper : tuple of (name, value)
        Hyperparameters held fixed at the given transformed-scale value.
    """

    name: str = "custom"
    long_covariates: tuple[str, ...] | None = None
    surv_covariates: tuple[str, ...] | None = None
    spline_degree: int | None = 3
    spline_nknots: int = 1
    spline_knots: tuple[float, ...] | None = None
    random_effects: str = "intercept_slope"
    linkage: str = "both"
    spatial: bool = True
    zeta: float | None = 0.95
    car_form: str = "leroux"
    outcomes: str = "joint"
    separate: bool = False
    fixed_hyper: tuple[tuple[str, float], ...] = ()
    priors: Priors = field(default_factory=Priors)

    def __post_init__(self):
        if self.random_effects not in RANDOM_EFFECTS:
            raise ModelError(f"unknown random-effect structure {self.random_effects!r}")
        if self.linkage not in LINKAGES:
            raise ModelError(f"unknown linkage {self.linkage!r}")
        if self.outcomes not in OUTCOMES:
            raise ModelError(f"unknown outcomes {self.outcomes!r}")
        q = RANDOM_EFFECTS[self.random_effects]
        if self.linkage in ("b0", "both") and q < 1:
            raise ModelError("linkage on b0 requires a random intercept")
        if self.linkage in ("b1", "both") and q < 2:
            raise ModelError("linkage on b1 requires a random slope")
        if self.outcomes != "joint" and self.linkage != "none":
            raise ModelError("linkage requires both outcomes")
        if self.separate and self.linkage != "none":
            raise ModelError("separate submodels cannot share random effects")
        if self.zeta is not None and not 0.0 < self.zeta < 1.0:
            raise ModelError("zeta must lie in (0, 1)")
        if self.car_form not in ("leroux", "pinv"):
            raise ModelError(f"unknown CAR form {self.car_form!r}")
        object.__setattr__(self, "fixed_hyper", tuple((str(k), float(v)) for k, v in dict(self.fixed_hyper).items()))

    @property
    def q(self) -> int:
        return RANDOM_EFFECTS[self.random_effects] if self.outcomes != "survival" else 0

    @property
    def has_long(self) -> bool:
        return self.outcomes in ("joint", "longitudinal")

    @property
    def has_surv(self) -> bool:
        return self.outcomes in ("joint", "survival")

    @property
    def has_spatial(self) -> bool:
        return self.spatial and self.has_surv

    @property
    def gamma_mask(self) -> tuple[bool, bool]:
        return (self.linkage in ("b0", "both"), self.linkage in ("b1", "both"))

    def submodels(self) -> list["ModelSpec"]:
        """The independent pieces this spec is fitted as."""
        if not self.separate or self.outcomes != "joint":
            return [self]
        fixed = dict(self.fixed_hyper)
        return [
            replace(self, name=f"{self.name}/longitudinal", outcomes="longitudinal", linkage="none",
                    spatial=False, separate=False, fixed_hyper=tuple(fixed.items())),
            replace(self, name=f"{self.name}/survival", outcomes="survival", linkage="none",
                    random_effects="none", separate=False, fixed_hyper=tuple(fixed.items())),
        ]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "priors"}
        d["fixed_hyper"] = dict(self.fixed_hyper)
        d["priors"] = dict(self.priors.__dict__)
        for k in ("long_covariates", "surv_covariates", "spline_knots"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if "priors" in d:
            d["priors"] = Priors(**d["priors"])
        for k in ("long_covariates", "surv_covariates", "spline_knots"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        if "fixed_hyper" in d:
            d["fixed_hyper"] = tuple(dict(d["fixed_hyper"]).items())
        return cls(**d)


# Candidate-model presets: (random effects, linkage, spatial)
_PRESET_ROWS = {
    "N": ("none", "none", False),
    "i": ("intercept", "none", False),
    "ii": ("intercept", "b0", False),
    "iii": ("intercept", "b0", True),
    "iv": ("none", "none", True),
    "v": ("intercept_slope", "b0", True),
    "vi": ("intercept_slope", "b1", True),
    "vii": ("intercept_slope", "b0", False),
    "viii": ("intercept_slope", "b1", False),
    "ix": ("intercept_slope", "both", False),
    "x": ("intercept_slope", "none", True),
    "xi": ("intercept_slope", "both", True),
}
PRESET_NAMES = tuple(_PRESET_ROWS)
SIMULATION_MODELS = ("I", "II", "III", "IV")


def preset(name: str, **overrides) -> ModelSpec:
    """Named model variants.

    ``N`` and ``i``-``xi`` are the application candidates. ``I``-``IV`` are
    the simulation comparison models: separate submodels without/with the
    spatial effect, and the joint model without/with it.
    """
    if name in _PRESET_ROWS:
        re, link, sp = _PRESET_ROWS[name]
        return ModelSpec(**{"name": name, "random_effects": re, "linkage": link, "spatial": sp, **overrides})
    sim = {
        "I": dict(linkage="none", spatial=False, separate=True),
        "II": dict(linkage="none", spatial=True, separate=True),
        "III": dict(linkage="both", spatial=False),
        "IV": dict(linkage="both", spatial=True),
    }
    if name in sim:
        return ModelSpec(**{"name": name, "random_effects": "intercept_slope", **sim[name], **overrides})
    raise ModelError(f"unknown model preset {name!r}")


_TUPLE_STR = ("long_covariates", "surv_covariates")
_BOOL = ("spatial", "separate")


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if key in _TUPLE_STR:
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if key == "spline_knots":
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if key in _BOOL:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ModelError(f"{key}: expected a boolean, got {raw!r}")
    if key in ("spline_degree", "spline_nknots"):
        return int(raw)
    if key == "zeta":
        return None if raw == "estimate" else float(raw)
    return raw


def read_model_config(path) -> ModelSpec:
    """Read a ``key = value`` model description.

    ``base`` names a preset to start from; other keys are :class:`ModelSpec`
    fields (lists comma-separated). ``fixed.<hyper>`` fixes a transformed
    hyperparameter and ``prior.<field>`` overrides a :class:`Priors` entry.
    Lines starting with ``#`` are ignored.
    """
    base = None
    kw: dict = {}
    fixed: dict = {}
    pri: dict = {}
    fields = set(ModelSpec.__dataclass_fields__) - {"priors", "fixed_hyper"}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ModelError(f"{path}:{lineno}: expected key = value")
            key, raw = (t.strip() for t in line.split("=", 1))
            try:
                if key == "base":
                    base = raw
                elif key.startswith("fixed."):
                    fixed[key[6:]] = float(raw)
                elif key.startswith("prior."):
                    if key[6:] not in Priors.__dataclass_fields__:
                        raise ModelError(f"unknown prior setting {key[6:]!r}")
                    pri[key[6:]] = float(raw)
                elif key in fields:
                    kw[key] = _parse_value(key, raw)
                else:
                    raise ModelError(f"unknown key {key!r}")
            except (ValueError, ModelError) as e:
                raise ModelError(f"{path}:{lineno}: {e}") from None
    if fixed:
        kw["fixed_hyper"] = tuple(fixed.items())
    if pri:
        kw["priors"] = Priors(**pri)
    if base is not None:
        return preset(base, **kw)
    return ModelSpec(**kw)


# -- hyperparameters -------------------------------------------------------

HYPER_ORDER = (
    "log_prec_obs", "log_shape", "log_prec_b0", "log_prec_b1", "z_rho",
    "log_prec_spatial", "logit_zeta", "gamma1", "gamma2",
)


def hyper_names_all(spec: ModelSpec) -> list[str]:
    names = []
    if spec.has_long:
        names.append("log_prec_obs")
    if spec.has_surv:
        names.append("log_shape")
    if spec.q >= 1:
        names.append("log_prec_b0")
    if spec.q >= 2:
        names += ["log_prec_b1", "z_rho"]
    if spec.has_spatial:
        names.append("log_prec_spatial")
        if spec.zeta is None:
            names.append("logit_zeta")
    g0, g1 = spec.gamma_mask
    if g0:
        names.append("gamma1")
    if g1:
        names.append("gamma2")
    return names


def hyper_names(spec: ModelSpec) -> list[str]:
    """Free hyperparameters, in the order used for theta vectors."""
    fixed = dict(spec.fixed_hyper)
    unknown = set(fixed) - set(hyper_names_all(spec))
    if unknown:
        raise ModelError(f"fixed hyperparameters not in model: {sorted(unknown)}")
    return [n for n in hyper_names_all(spec) if n not in fixed]


@dataclass(frozen=True)
class HyperParameters:
    """Natural-scale hyperparameters decoded from a transformed vector."""

    prec_obs: float = 1.0
    shape: float = 1.0
    prec_b0: float = 1.0
    prec_b1: float = 1.0
    rho: float = 0.0
    prec_spatial: float = 1.0
    zeta: float = 0.95
    gamma: tuple[float, float] = (0.0, 0.0)
    q: int = 0

    @property
    def sigma2(self) -> float:
        return 1.0 / self.prec_obs

    @property
    def D(self) -> np.ndarray:
        if self.q == 0:
            return np.zeros((0, 0))
        if self.q == 1:
            return np.array([[1.0 / self.prec_b0]])
        s0, s1 = 1.0 / np.sqrt(self.prec_b0), 1.0 / np.sqrt(self.prec_b1)
        c = self.rho * s0 * s1
        return np.array([[s0 * s0, c], [c, s1 * s1]])

    @property
    def D_inv(self) -> np.ndarray:
        if self.q == 0:
            return np.zeros((0, 0))
        if self.q == 1:
            return np.array([[self.prec_b0]])
        r = self.rho
        a, b = self.prec_b0, self.prec_b1
        off = -r * np.sqrt(a * b)
        return np.array([[a, off], [off, b]]) / (1.0 - r * r)

    @property
    def logdet_D_inv(self) -> float:
        if self.q == 0:
            return 0.0
        if self.q == 1:
            return float(np.log(self.prec_b0))
        return float(np.log(self.prec_b0) + np.log(self.prec_b1) - np.log1p(-self.rho ** 2))

    @property
    def gamma_vec(self) -> np.ndarray:
        return np.asarray(self.gamma[: self.q], dtype=float)


def _full_theta(spec: ModelSpec, theta) -> dict:
    names = hyper_names(spec)
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != len(names):
        raise ModelError(f"theta has {theta.size} entries, model expects {len(names)} ({names})")
    vals = dict(spec.fixed_hyper)
    vals.update(zip(names, theta.tolist()))
    return vals


def decode_theta(spec: ModelSpec, theta) -> HyperParameters:
    v = _full_theta(spec, theta)
    zeta = spec.zeta if spec.zeta is not None else 0.95
    if "logit_zeta" in v:
        zeta = float(1.0 / (1.0 + np.exp(-v["logit_zeta"])))
    return HyperParameters(
        prec_obs=float(np.exp(v.get("log_prec_obs", 0.0))),
        shape=float(np.exp(v.get("log_shape", 0.0))),
        prec_b0=float(np.exp(v.get("log_prec_b0", 0.0))),
        prec_b1=float(np.exp(v.get("log_prec_b1", 0.0))),
        rho=float(np.tanh(v.get("z_rho", 0.0))),
        prec_spatial=float(np.exp(v.get("log_prec_spatial", 0.0))),
        zeta=zeta,
        gamma=(float(v.get("gamma1", 0.0)), float(v.get("gamma2", 0.0))),
        q=spec.q,
    )


def encode_hyper(spec: ModelSpec, **natural) -> np.ndarray:
    """Transformed theta from natural-scale values (missing entries default)."""
    enc = {
        "log_prec_obs": np.log(natural.get("prec_obs", 1.0)),
        "log_shape": np.log(natural.get("shape", 1.0)),
        "log_prec_b0": np.log(natural.get("prec_b0", 1.0)),
        "log_prec_b1": np.log(natural.get("prec_b1", 1.0)),
        "z_rho": np.arctanh(natural.get("rho", 0.0)),
        "log_prec_spatial": np.log(natural.get("prec_spatial", 1.0)),
        "logit_zeta": np.log(natural.get("zeta", 0.95) / (1 - natural.get("zeta", 0.95))),
        "gamma1": natural.get("gamma1", 0.0),
        "gamma2": natural.get("gamma2", 0.0),
    }
    return np.array([enc[n] for n in hyper_names(spec)], dtype=float)


def log_hyper_prior(spec: ModelSpec, theta) -> float:
    """Log prior density of the free hyperparameters on the transformed scale."""
    p = spec.priors
    total = 0.0
    for name, t in zip(hyper_names(spec), np.asarray(theta, dtype=float).ravel()):
        if name.startswith("log_prec"):
            a, b = p.prec_shape, p.prec_rate
            total += a * np.log(b) - _lgamma(a) + a * t - b * np.exp(t)
        elif name == "log_shape":
            total += _lnorm(t, p.log_shape_var)
        elif name.startswith("gamma"):
            total += _lnorm(t, p.gamma_var)
        elif name == "z_rho":
            total += _lnorm(t, p.z_rho_var)
        elif name == "logit_zeta":
            total += _lnorm(t, p.logit_zeta_var)
    return float(total)


def _lnorm(t, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * t * t / var


def _lgamma(a):
    from math import lgamma

    return lgamma(a)


# -- natural-scale transforms reported in summaries -------------------------

def natural_transforms(name: str) -> list[tuple[str, callable, bool]]:
    """``(label, g, increasing)`` pairs describing reported transforms of one theta coordinate."""
    exp = np.exp
    if name == "log_prec_obs":
        return [("1/sigma^2", exp, True), ("sigma^2", lambda t: exp(-t), False)]
    if name == "log_shape":
        return [("shape", exp, True)]
    if name == "log_prec_b0":
        return [("D11^-1", exp, True), ("D11", lambda t: exp(-t), False)]
    if name == "log_prec_b1":
        return [("D22^-1", exp, True), ("D22", lambda t: exp(-t), False)]
    if name == "z_rho":
        return [("rho", np.tanh, True)]
    if name == "log_prec_spatial":
        return [("tau", exp, True), ("tau^-1", lambda t: exp(-t), False)]
    if name == "logit_zeta":
        return [("zeta", lambda t: 1.0 / (1.0 + exp(-t)), True)]
    if name == "gamma1":
        return [("gamma1", lambda t: t, True)]
    if name == "gamma2":
        return [("gamma2", lambda t: t, True)]
    raise KeyError(name)


# -- layout ----------------------------------------------------------------

@dataclass(frozen=True)
class LatentLayout:
    """Index map of the latent field.

    External ordering is ``(beta covariates, spline, b by subject, nu, alpha)``.
    """

    n_subjects: int
    q: int
    beta_names: tuple[str, ...]
    n_regions: int
    alpha_names: tuple[str, ...]
    subject_ids: tuple[str, ...] = ()

    @property
    def p_beta(self) -> int:
        return len(self.beta_names)

    @property
    def p_alpha(self) -> int:
        return len(self.alpha_names)

    @property
    def n_tail(self) -> int:
        return self.p_beta + self.n_regions + self.p_alpha

    @property
    def dim(self) -> int:
        return self.p_beta + self.n_subjects * self.q + self.n_regions + self.p_alpha

    @property
    def beta(self) -> slice:
        return slice(0, self.p_beta)

    @property
    def nu(self) -> slice:
        return slice(self.p_beta, self.p_beta + self.n_regions)

    @property
    def alpha(self) -> slice:
        return slice(self.p_beta + self.n_regions, self.n_tail)

    @cached_property
    def names(self) -> list[str]:
        b = [f"b{r}[{s}]" for s in self.subject_ids for r in range(self.q)]
        return list(self.beta_names) + b + [f"nu[{k}]" for k in range(self.n_regions)] + list(self.alpha_names)

    @cached_property
    def name_index(self) -> dict:
        return {n: i for i, n in enumerate(self.names)}

    @cached_property
    def tail_external(self) -> np.ndarray:
        """External index of each tail coordinate."""
        nb = self.n_subjects * self.q
        return np.concatenate([np.arange(self.p_beta), self.p_beta + nb + np.arange(self.n_regions + self.p_alpha)])

    @cached_property
    def b_external(self) -> np.ndarray:
        """External index of each random effect, shape ``(N, q)``."""
        return (self.p_beta + np.arange(self.n_subjects * self.q)).reshape(self.n_subjects, self.q)

    def to_external(self, xb: np.ndarray, xt: np.ndarray) -> np.ndarray:
        out = np.empty(xt.shape[:-1] + (self.dim,))
        out[..., self.tail_external] = xt
        out[..., self.b_external.ravel()] = xb.reshape(xb.shape[:-2] + (-1,))
        return out

    def from_external(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        xb = x[..., self.b_external.ravel()].reshape(x.shape[:-1] + (self.n_subjects, self.q))
        return xb, x[..., self.tail_external]


# -- bound model -------------------------------------------------------------

class JointModel:
    """A spec bound to a dataset: design matrices and sufficient statistics.

    Holds everything about the model that does not depend on theta.
    """

    def __init__(self, spec: ModelSpec, data: JointDataset, spline: SplineConfig | None = None):
        self.spec = spec
        self.data = data
        if spec.has_long and not data.has_longitudinal:
            raise ModelError("model needs longitudinal records but the dataset has none")
        if spec.has_surv and not data.has_survival:
            raise ModelError("model needs survival records but the dataset has none")
        N = data.n_subjects
        self.N = N
        q = spec.q
        self.q = q

        # longitudinal design
        beta_names: list[str] = []
        if spec.has_long:
            cols = self._select(spec.long_covariates, data.long_covariate_names, "longitudinal")
            Xc = data.long_x[:, cols]
            beta_names += [f"beta:{data.long_covariate_names[c]}" for c in cols]
            if spec.spline_degree is None:
                self.spline = None
                Xs = np.ones((data.n_obs, 1))
                beta_names.append("beta:(Intercept)")
            else:
                self.spline = spline or make_config(
                    data.long_time, spec.spline_degree, spec.spline_nknots, spec.spline_knots
                )
                Xs = evaluate_basis(self.spline, data.long_time)
                beta_names += [f"spline[{j}]" for j in range(basis_dimension(self.spline))]
            self.X = np.ascontiguousarray(np.hstack([Xc, Xs]))
            self.y = np.asarray(data.long_y, dtype=float)
            self.obs_subject = np.asarray(data.long_subject)
            self.Z = np.column_stack([np.ones(data.n_obs), data.long_time])[:, :q]
            self.n_obs = data.n_obs
        else:
            self.spline = None
            self.X = np.zeros((0, 0))
            self.y = np.zeros(0)
            self.obs_subject = np.zeros(0, dtype=int)
            self.Z = np.zeros((0, q))
            self.n_obs = 0

        # survival design
        alpha_names: list[str] = []
        if spec.has_surv:
            cols = self._select(spec.surv_covariates, data.surv_covariate_names, "survival")
            self.X2 = np.ascontiguousarray(np.column_stack([np.ones(N), data.surv_x[:, cols]]))
            alpha_names = ["alpha:(Intercept)"] + [f"alpha:{data.surv_covariate_names[c]}" for c in cols]
            self.T = np.asarray(data.surv_time, dtype=float)
            self.logT = np.log(self.T)
            self.delta = np.asarray(data.surv_event, dtype=float)
            self.n_events = float(self.delta.sum())
        else:
            self.X2 = np.zeros((N, 0))
            self.T = self.logT = self.delta = np.zeros(0)
            self.n_events = 0.0
        self.region = np.asarray(data.subject_region)
        K = data.n_regions if spec.has_spatial else 0
        self.K = K
        self.car = CarStructure(data.graph, spec.zeta if spec.zeta is not None else 0.95, 1.0, spec.car_form) if K else None

        self.layout = LatentLayout(N, q, tuple(beta_names), K, tuple(alpha_names), data.subject_ids)
        L = self.layout
        self.pb, self.pa = L.p_beta, L.p_alpha
        self.m = L.n_tail

        # longitudinal sufficient statistics
        if self.n_obs:
            self.XtX = self.X.T @ self.X
            self.Xty = self.X.T @ self.y
            s = self.obs_subject
            self.ZtZ = np.zeros((N, q, q))
            self.ZtX = np.zeros((N, q, self.pb))
            self.Zty = np.zeros((N, q))
            for r in range(q):
                self.Zty[:, r] = np.bincount(s, self.Z[:, r] * self.y, N)
                for c in range(q):
                    self.ZtZ[:, r, c] = np.bincount(s, self.Z[:, r] * self.Z[:, c], N)
                for c in range(self.pb):
                    self.ZtX[:, r, c] = np.bincount(s, self.Z[:, r] * self.X[:, c], N)
            self.yty = float(self.y @ self.y)
        else:
            self.XtX = np.zeros((self.pb, self.pb))
            self.ZtZ = np.zeros((N, q, q))
            self.ZtX = np.zeros((N, q, self.pb))

        # compact per-subject coupling columns into the tail: [beta..., alpha..., nu_k]
        cols = [np.broadcast_to(np.arange(self.pb), (N, self.pb))]
        if self.pa:
            cols.append(np.broadcast_to(L.alpha.start + np.arange(self.pa), (N, self.pa)))
        if K:
            cols.append((L.nu.start + self.region)[:, None])
        self.compact_cols = np.ascontiguousarray(np.hstack(cols)) if cols else np.zeros((N, 0), dtype=int)
        self.mc = self.compact_cols.shape[1]
        # linear indices into the flattened m x m tail block for scatter-adds
        cc = self.compact_cols
        self.compact_pair_index = (cc[:, :, None] * self.m + cc[:, None, :]).reshape(N, -1)

    @staticmethod
    def _select(requested, available, which) -> list[int]:
        if requested is None:
            return list(range(len(available)))
        missing = [c for c in requested if c not in available]
        if missing:
            raise ModelError(f"{which} covariate(s) not in dataset: {missing}")
        return [list(available).index(c) for c in requested]

    # -- theta-dependent pieces ----------------------------------------------
    def hyper(self, theta) -> HyperParameters:
        return decode_theta(self.spec, theta)

    def car_with(self, h: HyperParameters) -> CarStructure:
        return self.car.with_params(tau=h.prec_spatial, zeta=h.zeta)

    def prior_tail_dense(self, h: HyperParameters) -> np.ndarray:
        """Prior precision of the tail ``[beta, nu, alpha]``."""
        eps = self.spec.priors.fixed_effect_precision
        Q = np.zeros((self.m, self.m))
        L = self.layout
        idx = np.arange(self.m)
        Q[idx[L.beta], idx[L.beta]] = eps
        Q[idx[L.alpha], idx[L.alpha]] = eps
        if self.K:
            Q[L.nu, L.nu] = h.prec_spatial * self.car.unit_precision_dense(h.zeta)
        return Q

    def prior_logdet(self, h: HyperParameters) -> float:
        eps = self.spec.priors.fixed_effect_precision
        ld = (self.pb + self.pa) * np.log(eps) + self.N * h.logdet_D_inv
        if self.K:
            ld += self.K * np.log(h.prec_spatial) + self.car.logdet_unit(h.zeta)
        return float(ld)

    def prior_quad(self, h: HyperParameters, xb, xt, Qt=None) -> float:
        Qt = self.prior_tail_dense(h) if Qt is None else Qt
        val = float(xt @ Qt @ xt)
        if self.q:
            val += float(np.einsum("ij,jk,ik->", xb, h.D_inv, xb))
        return val

    def prior_precision(self, h: HyperParameters):
        """Full sparse prior precision in external ordering, with its log-determinant."""
        import scipy.sparse as sp

        eps = self.spec.priors.fixed_effect_precision
        blocks = []
        if self.pb:
            blocks.append(sp.identity(self.pb) * eps)
        if self.q:
            blocks.append(sp.block_diag([h.D_inv] * self.N))
        if self.K:
            blocks.append(sp.csr_matrix(h.prec_spatial * self.car.unit_precision_dense(h.zeta)))
        if self.pa:
            blocks.append(sp.identity(self.pa) * eps)
        return sp.block_diag(blocks, format="csr"), self.prior_logdet(h)

    # -- predictors and likelihood -------------------------------------------
    def eta_long(self, xb, xt) -> np.ndarray:
        if not self.n_obs:
            return np.zeros(0)
        eta = self.X @ xt[: self.pb]
        if self.q:
            eta = eta + np.einsum("ij,ij->i", self.Z, xb[self.obs_subject])
        return eta

    def eta_surv(self, xb, xt, h: HyperParameters) -> np.ndarray:
        if not self.spec.has_surv:
            return np.zeros(0)
        L = self.layout
        eta = self.X2 @ xt[L.alpha]
        if self.q:
            g = h.gamma_vec
            if np.any(g != 0):
                eta = eta + xb @ g
        if self.K:
            eta = eta + xt[L.nu][self.region]
        return eta

    def initial_latent(self, h: HyperParameters) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic Newton start: zeros, with the survival intercept at its profile MLE.

        Starting at ``alpha0 = log(events / sum T^shape)`` keeps the cumulative
        hazards of order one even when ``T^shape`` spans many magnitudes.
        """
        xb, xt = np.zeros((self.N, self.q)), np.zeros(self.m)
        if self.spec.has_surv and self.N:
            a0 = np.log(max(self.n_events, 0.5)) - logsumexp(h.shape * self.logT)
            xt[self.layout.alpha.start] = float(np.clip(a0, -ETA_CLAMP, ETA_CLAMP))
        return xb, xt

    def cumhaz(self, eta, h: HyperParameters):
        """``exp(eta) T^shape`` with the overflow clamp; returns (w, log w)."""
        if eta.size and eta.max() > ETA_CLAMP:
            bad = int(np.argmax(eta))
            self._clamp_log("survival predictor clamped at %g for subject %s", ETA_CLAMP, self.data.subject_ids[bad])
            eta = np.minimum(eta, ETA_CLAMP)
        logw = eta + h.shape * self.logT
        if logw.size and logw.max() > 700.0:
            self._clamp_log("cumulative hazard clamped at exp(%g)", 700.0)
            logw = np.minimum(logw, 700.0)
        return np.exp(logw), logw

    def _clamp_log(self, msg, *args):
        # first clamp per model at WARNING, repeats at DEBUG
        self.clamp_events = getattr(self, "clamp_events", 0) + 1
        logger.log(logging.WARNING if self.clamp_events == 1 else logging.DEBUG, msg, *args)

    def pointwise_loglik(self, xb, xt, h: HyperParameters) -> tuple[np.ndarray, np.ndarray]:
        """Per longitudinal record and per survival record log-likelihood."""
        ll_y = np.zeros(0)
        if self.n_obs:
            r = self.y - self.eta_long(xb, xt)
            ll_y = -0.5 * LOG_2PI + 0.5 * np.log(h.prec_obs) - 0.5 * h.prec_obs * r * r
        ll_t = np.zeros(0)
        if self.spec.has_surv:
            eta = self.eta_surv(xb, xt, h)
            w, _ = self.cumhaz(eta, h)
            ll_t = self.delta * (np.log(h.shape) + (h.shape - 1.0) * self.logT + eta) - w
        return ll_y, ll_t

    def loglik(self, xb, xt, h: HyperParameters) -> float:
        ll_y, ll_t = self.pointwise_loglik(xb, xt, h)
        val = float(np.sum(ll_y) + np.sum(ll_t))
        if not np.isfinite(val):
            bad = np.flatnonzero(~np.isfinite(ll_t))
            who = self.data.subject_ids[int(bad[0])] if bad.size else "?"
            raise FloatingPointError(f"non-finite log-likelihood (subject {who})")
        return val

    def loglik_grad(self, xb, xt, h: HyperParameters):
        """Log-likelihood value and gradient in ``(xb, xt)``, plus survival weights ``w``."""
        gb = np.zeros((self.N, self.q))
        gt = np.zeros(self.m)
        val = 0.0
        L = self.layout
        if self.n_obs:
            r = self.y - self.eta_long(xb, xt)
            val += self.n_obs * (-0.5 * LOG_2PI + 0.5 * np.log(h.prec_obs)) - 0.5 * h.prec_obs * float(r @ r)
            pr = h.prec_obs * r
            gt[: self.pb] = self.X.T @ pr
            for c in range(self.q):
                gb[:, c] = np.bincount(self.obs_subject, self.Z[:, c] * pr, self.N)
        w = np.zeros(0)
        if self.spec.has_surv:
            eta = self.eta_surv(xb, xt, h)
            w, _ = self.cumhaz(eta, h)
            val += float(np.sum(self.delta * (np.log(h.shape) + (h.shape - 1.0) * self.logT + eta)) - np.sum(w))
            u = self.delta - w
            gt[L.alpha] = self.X2.T @ u
            if self.K:
                gt[L.nu] = np.bincount(self.region, u, self.K)
            if self.q:
                gb += u[:, None] * h.gamma_vec[None, :]
        if not np.isfinite(val):
            raise FloatingPointError("non-finite log-likelihood")
        return val, gb, gt, w

    def loglik_dense(self, xb, xt, h: HyperParameters):
        """Dense gradient and Hessian in external ordering (small problems and tests)."""
        L = self.layout
        _, gb, gt, w = self.loglik_grad(xb, xt, h)
        g = L.to_external(gb, gt)
        A = self.design_dense(h)
        H = np.zeros((L.dim, L.dim))
        if self.n_obs:
            Ay = A[: self.n_obs]
            H -= h.prec_obs * Ay.T @ Ay
        if self.spec.has_surv:
            At = A[self.n_obs:]
            H -= At.T @ (w[:, None] * At)
        return g, H

    def design_dense(self, h: HyperParameters) -> np.ndarray:
        """Rows map the external latent vector to ``[eta_long; eta_surv]``."""
        L = self.layout
        n_t = self.N if self.spec.has_surv else 0
        A = np.zeros((self.n_obs + n_t, L.dim))
        if self.n_obs:
            A[: self.n_obs, L.tail_external[: self.pb]] = self.X
            for c in range(self.q):
                A[np.arange(self.n_obs), L.b_external[self.obs_subject, c]] = self.Z[:, c]
        if n_t:
            rows = self.n_obs + np.arange(self.N)
            A[np.ix_(rows, L.tail_external[L.alpha])] = self.X2
            if self.K:
                A[rows, L.tail_external[L.nu][self.region]] = 1.0
            for c in range(self.q):
                A[rows, L.b_external[:, c]] = h.gamma_vec[c]
        return A

    def prior_dense(self, h: HyperParameters) -> np.ndarray:
        Q, _ = self.prior_precision(h)
        return Q.toarray()


def build_latent_layout(spec: ModelSpec, data: JointDataset) -> LatentLayout:
    return JointModel(spec, data).layout


def linear_predictors(model: JointModel, x, gamma=None):
    """``(eta_long, eta_surv)`` for an external-order latent vector ``x``."""
    xb, xt = model.layout.from_external(x)
    h = HyperParameters(gamma=tuple(gamma) if gamma is not None else (0.0, 0.0), q=model.q)
    return model.eta_long(xb, xt), model.eta_surv(xb, xt, h)


def joint_loglik(model: JointModel, x, theta):
    """Value, gradient and Hessian of the log-likelihood in external ordering.

    The Hessian is dense; intended for small problems and verification.
    """
    h = model.hyper(theta)
    xb, xt = model.layout.from_external(x)
    val = model.loglik(xb, xt, h)
    g, H = model.loglik_dense(xb, xt, h)
    return val, g, H
