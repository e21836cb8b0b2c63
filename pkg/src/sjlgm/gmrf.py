"""Block-arrowhead factorization of the latent precision.

The posterior precision of the latent field has the pattern::

    [ A_1            B_1 ]
    [      ...       ... ]
    [           A_N  B_N ]
    [ B_1' ...  B_N' C   ]

where ``A_i`` (q x q) couples one subject's random effects, ``B_i`` links
them to a few tail coordinates (fixed effects, alpha, nu of the subject's
region) and ``C`` is the dense tail block. Eliminating the subject blocks
first leaves the Schur complement ``S = C - sum_i B_i' A_i^-1 B_i``, so the
factorization costs ``O(N q^2 m_c + m^3)``. Selected inverses then follow
from the same quantities without any fill-in.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .model import HyperParameters, JointModel


class ArrowFactor:
    """Cholesky-type factorization of the posterior precision at one point.

    Parameters
    ----------
    model : JointModel
    h : HyperParameters
    w : (N,) array
        Survival curvature weights ``exp(eta) T^shape`` at the expansion point
        (empty for models without survival).
    Qt : (m, m) array, optional
        Prior precision of the tail, if already computed.
    """

    def __init__(self, model: JointModel, h: HyperParameters, w: np.ndarray, Qt: np.ndarray | None = None):
        self.model = model
        M = model
        N, q, m = M.N, M.q, M.m
        L = M.layout
        self.q, self.m, self.N = q, m, N
        Qt = M.prior_tail_dense(h) if Qt is None else Qt
        has_w = M.spec.has_surv
        tpo = h.prec_obs

        C = Qt.copy()
        if M.n_obs:
            C[: M.pb, : M.pb] += tpo * M.XtX
        if has_w:
            X2w = M.X2 * w[:, None]
            C[L.alpha, L.alpha] += M.X2.T @ X2w
            if M.K:
                rw = np.bincount(M.region, w, M.K)
                idx = np.arange(L.nu.start, L.nu.stop)
                C[idx, idx] += rw
                an = np.zeros((M.pa, M.K))
                for c in range(M.pa):
                    an[c] = np.bincount(M.region, X2w[:, c], M.K)
                C[L.alpha, L.nu] += an
                C[L.nu, L.alpha] += an.T

        if q:
            g = h.gamma_vec
            A = np.broadcast_to(h.D_inv, (N, q, q)).copy()
            if M.n_obs:
                A += tpo * M.ZtZ
            B = np.zeros((N, q, M.mc))
            if M.n_obs:
                B[:, :, : M.pb] = tpo * M.ZtX
            if has_w and np.any(g != 0):
                A += w[:, None, None] * np.outer(g, g)[None]
                wg = w[:, None] * g[None, :]
                if M.pa:
                    B[:, :, M.pb: M.pb + M.pa] = wg[:, :, None] * M.X2[:, None, :]
                if M.K:
                    B[:, :, -1] = wg
            LA = np.linalg.cholesky(A)
            Ainv = np.linalg.inv(A)
            Ainv = 0.5 * (Ainv + np.swapaxes(Ainv, 1, 2))
            E = Ainv @ B
            BtE = np.swapaxes(B, 1, 2) @ E
            C = C - np.bincount(M.compact_pair_index.ravel(), BtE.ravel(), m * m).reshape(m, m)
            self.A, self.B, self.LA, self.Ainv, self.E = A, B, LA, Ainv, E
            self.logdet_A = float(2.0 * np.sum(np.log(np.diagonal(LA, axis1=1, axis2=2))))
        else:
            self.logdet_A = 0.0
        S = 0.5 * (C + C.T)
        self.S = S
        try:
            self.LS = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("posterior precision is not positive definite") from None
        self.logdet = self.logdet_A + float(2.0 * np.sum(np.log(np.diag(self.LS))))
        self._Stt = None

    # -- solves ---------------------------------------------------------------
    def solve(self, gb: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Solve ``P d = g`` for the split right-hand side."""
        M = self.model
        if self.q:
            a = np.einsum("ijk,ik->ij", self.Ainv, gb)
            Bta = np.einsum("iqc,iq->ic", self.B, a)
            rhs = gt - np.bincount(M.compact_cols.ravel(), Bta.ravel(), self.m)
        else:
            rhs = gt
        dt = sla.cho_solve((self.LS, True), rhs)
        if self.q:
            db = a - np.einsum("iqc,ic->iq", self.E, dt[M.compact_cols])
        else:
            db = np.zeros((self.N, 0))
        return db, dt

    @property
    def tail_cov(self) -> np.ndarray:
        """``Sigma_tt = S^-1``, the marginal covariance of the tail."""
        if self._Stt is None:
            Si = sla.cho_solve((self.LS, True), np.eye(self.m))
            self._Stt = 0.5 * (Si + Si.T)
        return self._Stt

    def b_cov(self) -> np.ndarray:
        """Marginal covariance blocks of each subject's random effects, ``(N, q, q)``."""
        if not self.q:
            return np.zeros((self.N, 0, 0))
        c = self.model.compact_cols
        Sc = self.tail_cov[c[:, :, None], c[:, None, :]]
        return self.Ainv + self.E @ Sc @ np.swapaxes(self.E, 1, 2)

    def b_tail_cov(self) -> np.ndarray:
        """``Cov(b_i, x_t)`` for each subject, shape ``(N, q, m)``."""
        c = self.model.compact_cols
        return -np.einsum("iqc,icm->iqm", self.E, self.tail_cov[c])

    def marginal_variances(self) -> tuple[np.ndarray, np.ndarray]:
        vt = np.diag(self.tail_cov).copy()
        vb = np.diagonal(self.b_cov(), axis1=1, axis2=2).copy() if self.q else np.zeros((self.N, 0))
        return vb, vt

    # -- sampling -------------------------------------------------------------
    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` zero-mean draws from ``N(0, P^-1)`` as ``(xb (n,N,q), xt (n,m))``."""
        zt = rng.standard_normal((self.m, n))
        xt = sla.solve_triangular(self.LS.T, zt, lower=False).T
        if not self.q:
            return np.zeros((n, self.N, 0)), xt
        zb = rng.standard_normal((self.N, self.q, n))
        LAt = np.swapaxes(self.LA, 1, 2)
        xb = np.linalg.solve(LAt, zb)  # (N, q, n)
        xb = np.moveaxis(xb, 2, 0)
        c = self.model.compact_cols
        xb = xb - np.einsum("iqc,nic->niq", self.E, xt[:, c])
        return xb, xt

    # -- dense reference --------------------------------------------------------
    def dense(self) -> np.ndarray:
        """The full precision in external ordering (small problems only)."""
        M = self.model
        L = M.layout
        P = np.zeros((L.dim, L.dim))
        te = L.tail_external
        C = self.S.copy()
        if self.q:
            c = M.compact_cols
            BtE = np.swapaxes(self.B, 1, 2) @ self.E
            C = C + np.bincount(M.compact_pair_index.ravel(), BtE.ravel(), self.m * self.m).reshape(self.m, self.m)
            be = L.b_external
            for i in range(self.N):
                P[np.ix_(be[i], be[i])] = self.A[i]
                P[np.ix_(be[i], te[c[i]])] += self.B[i]
                P[np.ix_(te[c[i]], be[i])] += self.B[i].T
        P[np.ix_(te, te)] = C
        return P
