"""Conditional autoregressive structures on a region adjacency graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .data import AdjacencyGraph


def build_structure_matrix(g: AdjacencyGraph) -> sp.csr_matrix:
    """Besag structure matrix: degree on the diagonal, -1 for each neighbour pair."""
    K = g.region_count
    e = np.array(g.sorted_edges(), dtype=int).reshape(-1, 2)
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(K)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(K)])
    vals = np.concatenate([-np.ones(2 * len(e)), g.neighbor_counts.astype(float)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(K, K))


@dataclass(frozen=True, eq=False)
class CarStructure:
    """Proper-Besag (Leroux) prior ``Q = tau * ((1 - zeta) I + zeta * Omega)``.

    ``form="pinv"`` instead uses the covariance-side mixture
    ``tau^-1 ((1 - zeta) I + zeta * pinv(Omega))``.
    """

    graph: AdjacencyGraph
    zeta: float = 0.95
    tau: float = 1.0
    form: str = "leroux"
    omega: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        if self.form not in ("leroux", "pinv"):
            raise ValueError(f"unknown CAR form {self.form!r}")
        object.__setattr__(self, "omega", build_structure_matrix(self.graph))

    @property
    def n_regions(self) -> int:
        return self.graph.region_count

    @cached_property
    def omega_eig(self) -> tuple[np.ndarray, np.ndarray]:
        w, V = np.linalg.eigh(self.omega.toarray())
        w[np.abs(w) < 1e-10 * max(1.0, np.abs(w).max(initial=0.0))] = 0.0
        return w, V

    def with_params(self, tau: float | None = None, zeta: float | None = None) -> "CarStructure":
        new = CarStructure(self.graph, self.zeta if zeta is None else zeta, self.tau if tau is None else tau, self.form)
        if "omega_eig" in self.__dict__:
            new.__dict__["omega_eig"] = self.omega_eig
        return new

    def unit_eigenvalues(self, zeta: float) -> np.ndarray:
        """Eigenvalues of the precision at ``tau = 1``."""
        w, _ = self.omega_eig
        if self.form == "leroux":
            return (1.0 - zeta) + zeta * w
        cov = (1.0 - zeta) + zeta * np.where(w > 0, 1.0 / np.where(w > 0, w, 1.0), 0.0)
        return 1.0 / cov

    def unit_precision_dense(self, zeta: float) -> np.ndarray:
        K = self.n_regions
        if self.form == "leroux":
            return (1.0 - zeta) * np.eye(K) + zeta * self.omega.toarray()
        w, V = self.omega_eig
        return (V * self.unit_eigenvalues(zeta)) @ V.T

    def logdet_unit(self, zeta: float) -> float:
        return float(np.sum(np.log(self.unit_eigenvalues(zeta))))

    def logdet_unit_dzeta(self, zeta: float) -> float:
        w, _ = self.omega_eig
        if self.form == "leroux":
            return float(np.sum((w - 1.0) / ((1.0 - zeta) + zeta * w)))
        winv = np.where(w > 0, 1.0 / np.where(w > 0, w, 1.0), 0.0)
        return float(-np.sum((winv - 1.0) / ((1.0 - zeta) + zeta * winv)))


def _check(s: CarStructure):
    if not 0.0 < s.zeta < 1.0:
        raise ValueError(f"zeta must lie in (0, 1), got {s.zeta}")
    if not s.tau > 0:
        raise ValueError(f"tau must be positive, got {s.tau}")


def proper_besag_precision(s: CarStructure) -> sp.csr_matrix:
    """Positive-definite precision of the proper-Besag field."""
    _check(s)
    if s.form == "leroux":
        K = s.n_regions
        Q = s.tau * ((1.0 - s.zeta) * sp.identity(K, format="csr") + s.zeta * s.omega)
        return sp.csr_matrix(Q)
    return sp.csr_matrix(s.tau * s.unit_precision_dense(s.zeta))


def _component_indicators(g: AdjacencyGraph) -> np.ndarray:
    comps = g.components()
    A = np.zeros((len(comps), g.region_count))
    for i, c in enumerate(comps):
        A[i, c] = 1.0
    return A


def sample_car_field(s: CarStructure, rng_seed, size: int | None = None) -> np.ndarray:
    """Draw ``nu ~ N(0, Q^-1)``; ``zeta = 1`` gives the intrinsic field.

    The intrinsic field is sampled with a sum-to-zero constraint on each
    connected component, by sampling from ``tau*Omega + A'A`` and
    conditioning on ``A nu = 0`` (kriging correction). Returns shape
    ``(K,)`` or ``(size, K)``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if not s.tau > 0:
        raise ValueError(f"tau must be positive, got {s.tau}")
    K = s.n_regions
    n = 1 if size is None else int(size)
    z = rng.standard_normal((K, n))
    if s.zeta == 1.0:
        if s.form != "leroux":
            raise ValueError("intrinsic sampling requires the Leroux form")
        A = _component_indicators(s.graph)
        Qt = s.tau * s.omega.toarray() + A.T @ A
        L = np.linalg.cholesky(Qt)
        x = sla.solve_triangular(L.T, z, lower=False)
        # cov of x is Qt^-1; correct onto {A x = 0}
        W = sla.cho_solve((L, True), A.T)
        x = x - W @ np.linalg.solve(A @ W, A @ x)
    elif 0.0 <= s.zeta < 1.0:
        L = np.linalg.cholesky(s.tau * s.unit_precision_dense(s.zeta))
        x = sla.solve_triangular(L.T, z, lower=False)
    else:
        raise ValueError(f"zeta must lie in [0, 1], got {s.zeta}")
    return x[:, 0] if size is None else x.T
