"""Multivariate linear mixed model with per-row fixed-effect features.

Model for object i at time t (responses stacked time-major per object):

    y_it = M phi_it + B_i z_it + e_it,      vec(B_i) ~ N(0, D),

with vec(B_i) stacking the per-response random-effect rows b^(1)..b^(J)
and e_it ~ N(0, Sigma) independent across rows. The fixed-effect feature
vector phi_it is either a leaf-membership indicator (tree node means) or
an arbitrary covariate vector (linear baselines). The marginal covariance
of an object's stacked responses is

    V_i = Zt_i D Zt_i' + I_T (x) Sigma,     Zt_i = rows (I_J (x) z_it').

Estimation is maximum likelihood: M is profiled out by generalized least
squares and the variance parameters are optimized by quasi-Newton over an
unconstrained log-Cholesky parameterization. Per-object solves use the
matrix-inversion lemma in the Jq-dimensional random-effect space, so no
JT x JT matrix is ever formed; objects sharing (T, Z) are batched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .data import LongitudinalDataset

LOG_2PI = math.log(2.0 * math.pi)

# box for log-scale Cholesky diagonals; keeps iterates finite while letting
# variances collapse to ~e-40 when the data ask for it
LOG_DIAG_BOUND = 20.0


class FitError(RuntimeError):
    """Raised when a model cannot be estimated on the given data."""


@dataclass
class MixedModelSpec:
    """Fixed-effect design plus estimation settings.

    Exactly one of ``memberships`` (leaf index per row, with ``n_leaves``)
    or ``features`` (general (n, p) design) must be given.
    """

    memberships: Optional[np.ndarray] = None
    n_leaves: Optional[int] = None
    features: Optional[np.ndarray] = None
    residual_structure: str = "diag_by_response"   # or "full_response_cov"
    no_random_effects: bool = False
    tol: float = 1e-8
    max_iter: int = 500

    def feature_matrix(self, n_rows: int) -> np.ndarray:
        if (self.memberships is None) == (self.features is None):
            raise FitError("specify exactly one of memberships or features")
        if self.residual_structure not in ("diag_by_response", "full_response_cov"):
            raise FitError(f"unknown residual structure '{self.residual_structure}'")
        if self.features is not None:
            F = np.asarray(self.features, dtype=float)
            if F.shape[0] != n_rows:
                raise FitError("feature matrix row count does not match data")
            return F
        memb = np.asarray(self.memberships, dtype=int)
        if memb.shape[0] != n_rows:
            raise FitError("memberships length does not match data")
        L = int(self.n_leaves)
        if memb.min(initial=0) < 0 or (memb.size and memb.max() >= L):
            raise FitError("leaf membership out of range")
        counts = np.bincount(memb, minlength=L)
        if (counts == 0).any():
            empty = int(np.flatnonzero(counts == 0)[0])
            raise FitError(f"leaf {empty} has no rows")
        F = np.zeros((n_rows, L))
        F[np.arange(n_rows), memb] = 1.0
        return F


@dataclass
class FittedMixedModel:
    """ML estimates: coefficient matrix M (J x p), random-effect covariance
    D (Jq x Jq), residual covariance, and per-object BLUP matrices."""

    M: np.ndarray
    D: np.ndarray
    sigma: np.ndarray
    blups: dict
    loglik: float
    init_loglik: float
    converged: bool
    n_iter: int
    residual_structure: str
    spec: MixedModelSpec = field(repr=False, default=None)
    theta: np.ndarray = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# log-Cholesky packing


def _tri_size(d: int) -> int:
    return d * (d + 1) // 2


def _params_to_chol(params: np.ndarray, d: int) -> np.ndarray:
    L = np.zeros((d, d))
    rows, cols = np.tril_indices(d)
    L[rows, cols] = params
    idx = np.arange(d)
    L[idx, idx] = np.exp(np.diag(L))
    return L


def _chol_to_params(L: np.ndarray) -> np.ndarray:
    d = L.shape[0]
    rows, cols = np.tril_indices(d)
    out = np.asarray(L, dtype=float)[rows, cols].copy()
    diag_pos = np.flatnonzero(rows == cols)
    out[diag_pos] = np.log(np.diag(L))
    return out


def _chol_grad_to_params(dL: np.ndarray, L: np.ndarray) -> np.ndarray:
    d = L.shape[0]
    rows, cols = np.tril_indices(d)
    out = dL[rows, cols].copy()
    diag_pos = np.flatnonzero(rows == cols)
    out[diag_pos] *= np.diag(L)
    return out


class _ParamLayout:
    """Slicing of the packed variance-parameter vector."""

    def __init__(self, J: int, q: int, residual_structure: str, no_re: bool):
        self.J = J
        self.q = q
        self.d = J * q
        self.no_re = no_re
        self.full_sigma = residual_structure == "full_response_cov"
        self.n_d = 0 if no_re else _tri_size(self.d)
        self.n_sigma = _tri_size(J) if self.full_sigma else J
        self.size = self.n_d + self.n_sigma
        rows, cols = np.tril_indices(self.d)
        self._d_diag = np.flatnonzero(rows == cols)

    def unpack(self, theta: np.ndarray):
        """Return (L_D or None, Sigma, chol-ish factor of Sigma)."""
        theta = np.asarray(theta, dtype=float)
        L_d = None
        if not self.no_re:
            L_d = _params_to_chol(theta[:self.n_d], self.d)
        sp = theta[self.n_d:]
        if self.full_sigma:
            L_s = _params_to_chol(sp, self.J)
            sigma = L_s @ L_s.T
        else:
            s = np.exp(sp)
            L_s = np.diag(s)
            sigma = np.diag(s * s)
        return L_d, sigma, L_s

    def pack(self, D: Optional[np.ndarray], sigma: np.ndarray) -> np.ndarray:
        parts = []
        if not self.no_re:
            vals, vecs = np.linalg.eigh(np.asarray(D, dtype=float))
            if vals.min() < -1e-8:
                raise FitError("D must be positive semidefinite")
            D_psd = (vecs * np.maximum(vals, 1e-12)) @ vecs.T
            parts.append(_chol_to_params(np.linalg.cholesky(D_psd)))
        sigma = np.asarray(sigma, dtype=float)
        if self.full_sigma:
            parts.append(_chol_to_params(np.linalg.cholesky(sigma)))
        else:
            parts.append(0.5 * np.log(np.maximum(np.diag(sigma), 1e-300)))
        return np.concatenate(parts)

    def bounds(self):
        out = []
        if not self.no_re:
            rows, cols = np.tril_indices(self.d)
            for r, c in zip(rows, cols):
                out.append((-LOG_DIAG_BOUND, LOG_DIAG_BOUND) if r == c else (None, None))
        if self.full_sigma:
            rows, cols = np.tril_indices(self.J)
            for r, c in zip(rows, cols):
                out.append((-LOG_DIAG_BOUND, LOG_DIAG_BOUND) if r == c else (None, None))
        else:
            out.extend([(-LOG_DIAG_BOUND, LOG_DIAG_BOUND)] * self.J)
        return out


# ---------------------------------------------------------------------------
# batched likelihood engine


class _ObjectGroup:
    """Objects sharing (T, Z block); everything theta-dependent reduces to
    algebra on the precomputed per-object cross-products below."""

    def __init__(self, Z: np.ndarray, Y: np.ndarray, F: np.ndarray, codes: list):
        self.T, self.q = Z.shape
        self.m = Y.shape[0]
        self.J = Y.shape[2]
        self.p = F.shape[2]
        self.Z = Z
        self.codes = codes
        self.Sz = Z.T @ Z                                     # (q, q)
        self.FF = np.einsum("mta,mtb->mab", F, F)             # (m, p, p)
        self.FY = np.einsum("mta,mtj->maj", F, Y)             # (m, p, J)
        self.Sfz = np.einsum("mta,tq->maq", F, Z)             # (m, p, q)
        self.YY = np.einsum("mtj,mtk->mjk", Y, Y)             # (m, J, J)
        self.YZ = np.einsum("mtj,tq->mjq", Y, Z)              # (m, J, q)


class _MarginalEngine:
    """Profiled Gaussian marginal likelihood, gradient, and BLUPs."""

    def __init__(self, ds: LongitudinalDataset, spec: MixedModelSpec):
        self.ds = ds
        self.spec = spec
        self.J = ds.n_responses
        self.q = ds.n_design
        F = spec.feature_matrix(ds.n_rows)
        self.p = F.shape[1]
        self.F_rows = F
        self.layout = _ParamLayout(self.J, self.q, spec.residual_structure,
                                   spec.no_random_effects)
        self.n_total = ds.n_rows * self.J

        buckets = {}
        order = []
        for code in range(ds.n_objects):
            idx = ds.rows_of(code)
            Z = ds.Z[idx]
            key = (len(idx), Z.tobytes())
            if key not in buckets:
                buckets[key] = {"Z": Z, "Y": [], "F": [], "codes": []}
                order.append(key)
            buckets[key]["Y"].append(ds.Y[idx])
            buckets[key]["F"].append(F[idx])
            buckets[key]["codes"].append(code)
        self.groups = [
            _ObjectGroup(buckets[k]["Z"], np.stack(buckets[k]["Y"]),
                         np.stack(buckets[k]["F"]), buckets[k]["codes"])
            for k in order
        ]
        self.SFF = sum(g.FF.sum(axis=0) for g in self.groups)   # (p, p)

    # -- pass 1: normal equations ------------------------------------------

    def _group_state(self, g: _ObjectGroup, sigma_inv: np.ndarray,
                     L_d: Optional[np.ndarray]):
        st = {"g": g}
        if L_d is not None:
            K = np.kron(sigma_inv, g.Sz)
            C = np.eye(self.layout.d) + L_d.T @ K @ L_d
            cC = cho_factor(C, lower=True)
            st["K"] = K
            st["cC"] = cC
            st["logdetC"] = 2.0 * float(np.log(np.diag(cC[0])).sum())
            B_pre = np.einsum("mar,jk->majkr", g.Sfz, sigma_inv).reshape(
                g.m, self.p * self.J, self.layout.d)
            st["Bt"] = B_pre @ L_d
        return st

    def _normal_equations(self, states, sigma_inv, logdet_sigma, L_d):
        pJ = self.p * self.J
        A = np.kron(self.SFF, sigma_inv)
        b = np.zeros(pJ)
        quad_y = 0.0
        logdet = 0.0
        for st in states:
            g = st["g"]
            fy = np.einsum("maj,jk->mak", g.FY, sigma_inv).reshape(g.m, pJ)
            b += fy.sum(axis=0)
            quad_y += float(np.einsum("jk,mjk->", sigma_inv, g.YY))
            logdet += g.m * g.T * logdet_sigma
            if L_d is not None:
                d = self.layout.d
                v = np.einsum("jk,mkq->mjq", sigma_inv, g.YZ).reshape(g.m, -1)
                w = v @ L_d
                cy = cho_solve(st["cC"], w.T).T
                t1 = cho_solve(st["cC"], st["Bt"].reshape(-1, d).T).T.reshape(g.m, pJ, d)
                A -= np.einsum("mac,mbc->ab", t1, st["Bt"])
                b -= np.einsum("mac,mc->a", t1, w)
                quad_y -= float(np.einsum("mc,mc->", w, cy))
                logdet += g.m * st["logdetC"]
        return A, b, quad_y, logdet

    # -- pass 2: residual statistics -----------------------------------------

    def _residual_stats(self, states, beta_mat, sigma_inv, L_d, want_blups=False):
        """Accumulate the gradient statistics at fixed coefficients."""
        d = self.layout.d
        quad_r = 0.0
        A_d = np.zeros((d, d))
        G_tot = np.zeros((d, d))
        U_inner = np.zeros((self.J, self.J))
        Qd_tot = np.zeros((self.J, self.J))
        blups = {}
        for st in states:
            g = st["g"]
            # per-object residual cross-products, no T loop needed
            RZ = g.YZ - np.einsum("aj,maq->mjq", beta_mat, g.Sfz)
            P1 = np.einsum("aj,mak->mjk", beta_mat, g.FY)
            FFb = np.einsum("mab,bj->maj", g.FF, beta_mat)
            bFFb = np.einsum("aj,mak->mjk", beta_mat, FFb)
            RR = g.YY - P1 - P1.transpose(0, 2, 1) + bFFb
            quad_r += float(np.einsum("jk,mjk->", sigma_inv, RR))
            if L_d is None:
                U_inner += RR.sum(axis=0)
                Qd_tot += g.m * g.T * sigma_inv
                if want_blups:
                    for code in g.codes:
                        blups[code] = np.zeros((self.J, self.q))
                continue
            vR = np.einsum("jk,mkq->mjq", sigma_inv, RZ).reshape(g.m, d)
            wR = vR @ L_d
            c = cho_solve(st["cC"], wR.T).T
            quad_r -= float(np.einsum("mc,mc->", wR, c))
            KL = st["K"] @ L_d
            a = vR - c @ KL.T
            A_d += a.T @ a
            G_tot += g.m * (st["K"] - KL @ cho_solve(st["cC"], KL.T))
            gv = (c @ L_d.T).reshape(g.m, self.J, self.q)
            RZg = np.einsum("mjq,mkq->mjk", RZ, gv)
            gSzg = np.einsum("mjq,qs,mks->mjk", gv, g.Sz, gv)
            U_inner += (RR - RZg - RZg.transpose(0, 2, 1) + gSzg).sum(axis=0)
            H = L_d @ cho_solve(st["cC"], L_d.T)
            H4 = H.reshape(self.J, self.q, self.J, self.q)
            Qd_in = np.einsum("jrks,rs->jk", H4, g.Sz)
            Qd_tot += g.m * (g.T * sigma_inv - sigma_inv @ Qd_in @ sigma_inv)
            if want_blups:
                B = (a @ L_d) @ L_d.T
                for row, code in enumerate(g.codes):
                    blups[code] = B[row].reshape(self.J, self.q)
        U_tot = sigma_inv @ U_inner @ sigma_inv
        return quad_r, A_d, G_tot, U_tot, Qd_tot, blups

    # -- public evaluations ----------------------------------------------------

    def profiled(self, theta: np.ndarray, want_grad: bool = True,
                 fixed_beta: Optional[np.ndarray] = None):
        """Log-likelihood (and gradient) at theta with M profiled out,
        or evaluated at a caller-fixed coefficient matrix."""
        L_d, sigma, L_s = self.layout.unpack(theta)
        try:
            c_sig = cho_factor(sigma, lower=True)
        except np.linalg.LinAlgError:
            raise FitError("residual covariance is not positive definite") from None
        sigma_inv = cho_solve(c_sig, np.eye(self.J))
        logdet_sigma = 2.0 * float(np.log(np.diag(c_sig[0])).sum())

        states = [self._group_state(g, sigma_inv, L_d) for g in self.groups]
        A, b, quad_y, logdet = self._normal_equations(states, sigma_inv,
                                                      logdet_sigma, L_d)
        if fixed_beta is None:
            try:
                cA = cho_factor((A + A.T) / 2.0, lower=True)
            except np.linalg.LinAlgError:
                raise FitError("fixed-effect normal equations are not positive "
                               "definite") from None
            beta = cho_solve(cA, b)
        else:
            beta = np.asarray(fixed_beta, dtype=float).ravel()
        beta_mat = beta.reshape(self.p, self.J)

        quad_r, A_d, G_tot, U_tot, Qd_tot, _ = self._residual_stats(
            states, beta_mat, sigma_inv, L_d)
        if quad_r < -1e-8 * max(1.0, abs(quad_y)):
            # a negative quadratic form means the low-rank algebra has lost
            # all precision (residual variance collapsing under a large D)
            raise FitError("covariance evaluation lost positive definiteness")
        ll = -0.5 * (logdet + quad_r + self.n_total * LOG_2PI)
        if not want_grad:
            return ll, None, beta
        grad_parts = []
        if L_d is not None:
            K_d = 0.5 * (A_d - G_tot)
            grad_parts.append(_chol_grad_to_params(2.0 * K_d @ L_d, L_d))
        K_s = 0.5 * (U_tot - Qd_tot)
        if self.layout.full_sigma:
            grad_parts.append(_chol_grad_to_params(2.0 * K_s @ L_s, L_s))
        else:
            grad_parts.append(np.diag(K_s) * 2.0 * np.diag(sigma))
        return ll, np.concatenate(grad_parts), beta

    def blups_at(self, theta: np.ndarray, beta: np.ndarray) -> dict:
        L_d, sigma, _ = self.layout.unpack(theta)
        c_sig = cho_factor(sigma, lower=True)
        sigma_inv = cho_solve(c_sig, np.eye(self.J))
        states = [self._group_state(g, sigma_inv, L_d) for g in self.groups]
        beta_mat = np.asarray(beta, dtype=float).reshape(self.p, self.J)
        *_, blups = self._residual_stats(states, beta_mat, sigma_inv, L_d,
                                         want_blups=True)
        return {self.ds.object_labels[code]: blups[code] for code in sorted(blups)}


# ---------------------------------------------------------------------------
# public operations


def _stacked_design(Z_i: np.ndarray, J: int) -> np.ndarray:
    """Random-effect design of one object: rows (I_J (x) z_it')."""
    T, q = Z_i.shape
    Zt = np.zeros((T * J, J * q))
    for t in range(T):
        for j in range(J):
            Zt[t * J + j, j * q:(j + 1) * q] = Z_i[t]
    return Zt


def log_likelihood(M: np.ndarray, D: np.ndarray, sigma: np.ndarray,
                   ds: LongitudinalDataset, spec: MixedModelSpec) -> float:
    """Exact Gaussian marginal log-likelihood at fixed parameters, formed
    object by object from the dense JT x JT covariance."""
    J = ds.n_responses
    F = spec.feature_matrix(ds.n_rows)
    beta_mat = np.asarray(M, dtype=float).T            # (p, J)
    sigma = np.asarray(sigma, dtype=float)
    total = 0.0
    for code in range(ds.n_objects):
        idx = ds.rows_of(code)
        T = len(idx)
        resid = (ds.Y[idx] - F[idx] @ beta_mat).reshape(-1)
        V = np.kron(np.eye(T), sigma)
        if not spec.no_random_effects and D is not None and np.any(D):
            Zt = _stacked_design(ds.Z[idx], J)
            V = V + Zt @ np.asarray(D, dtype=float) @ Zt.T
        try:
            cV = cho_factor(V, lower=True)
        except np.linalg.LinAlgError:
            raise FitError(
                f"covariance not positive definite for object "
                f"'{ds.object_labels[code]}'") from None
        logdet = 2.0 * float(np.log(np.diag(cV[0])).sum())
        quad = float(resid @ cho_solve(cV, resid))
        total += -0.5 * (logdet + quad + T * J * LOG_2PI)
    return total


def variance_params(D: Optional[np.ndarray], sigma: np.ndarray,
                    ds: LongitudinalDataset, spec: MixedModelSpec) -> np.ndarray:
    """Pack (D, Sigma) into the unconstrained log-Cholesky vector."""
    layout = _ParamLayout(ds.n_responses, ds.n_design, spec.residual_structure,
                          spec.no_random_effects)
    return layout.pack(D, sigma)


def unpack_variance_params(theta: np.ndarray, ds: LongitudinalDataset,
                           spec: MixedModelSpec):
    """Inverse of :func:`variance_params`: (D or None, Sigma)."""
    layout = _ParamLayout(ds.n_responses, ds.n_design, spec.residual_structure,
                          spec.no_random_effects)
    L_d, sigma, _ = layout.unpack(theta)
    return (None if L_d is None else L_d @ L_d.T), sigma


def log_likelihood_gradient(M: np.ndarray, D: Optional[np.ndarray],
                            sigma: np.ndarray, ds: LongitudinalDataset,
                            spec: MixedModelSpec) -> np.ndarray:
    """Analytic gradient of the log-likelihood at fixed M with respect to
    the packed variance parameters (log-Cholesky of D then of Sigma)."""
    engine = _MarginalEngine(ds, spec)
    theta = engine.layout.pack(D, sigma)
    beta = np.asarray(M, dtype=float).T.ravel()
    _, grad, _ = engine.profiled(theta, want_grad=True, fixed_beta=beta)
    return grad


def _initial_theta(engine: _MarginalEngine) -> np.ndarray:
    ds, layout = engine.ds, engine.layout
    coef, *_ = np.linalg.lstsq(engine.F_rows, ds.Y, rcond=None)
    resid = ds.Y - engine.F_rows @ coef
    parts = []
    if not layout.no_re:
        L0 = math.sqrt(0.1) * np.eye(layout.d)
        parts.append(_chol_to_params(L0))
    if layout.full_sigma:
        S0 = resid.T @ resid / max(ds.n_rows, 1) + 1e-12 * np.eye(layout.J)
        parts.append(_chol_to_params(np.linalg.cholesky(S0)))
    else:
        v = np.maximum((resid * resid).mean(axis=0), 1e-12)
        parts.append(0.5 * np.log(v))
    return np.concatenate(parts)


def fit_mvlmm(ds: LongitudinalDataset, spec: MixedModelSpec,
              theta0: Optional[np.ndarray] = None) -> FittedMixedModel:
    """Maximize the marginal likelihood over (M, D, Sigma).

    M is profiled out in closed form; the variance parameters are run
    through L-BFGS-B with analytic gradients. Non-convergence within
    ``spec.max_iter`` iterations is flagged, not raised.
    """
    if ds.n_objects == 0:
        raise FitError("dataset has no objects")
    engine = _MarginalEngine(ds, spec)
    layout = engine.layout
    J, q = ds.n_responses, ds.n_design

    if spec.no_random_effects:
        # GLS collapses to per-response OLS; Sigma has a closed-form MLE.
        # Leaf designs use plain per-leaf means so the estimates agree
        # bit-for-bit with tree node means.
        if spec.memberships is not None:
            memb = np.asarray(spec.memberships, dtype=int)
            coef = np.stack([ds.Y[memb == l].mean(axis=0)
                             for l in range(engine.p)])
        else:
            coef, *_ = np.linalg.lstsq(engine.F_rows, ds.Y, rcond=None)
        resid = ds.Y - engine.F_rows @ coef
        if spec.residual_structure == "full_response_cov":
            sigma = resid.T @ resid / ds.n_rows
        else:
            sigma = np.diag(np.maximum((resid * resid).mean(axis=0), 1e-300))
        theta = layout.pack(None, sigma)
        ll, _, beta = engine.profiled(theta, want_grad=False,
                                      fixed_beta=coef.ravel())
        M = coef.reshape(engine.p, J).T
        blups = {lab: np.zeros((J, q)) for lab in ds.object_labels}
        return FittedMixedModel(M=M, D=np.zeros((J * q, J * q)), sigma=sigma,
                                blups=blups, loglik=ll, init_loglik=ll,
                                converged=True, n_iter=0,
                                residual_structure=spec.residual_structure,
                                spec=spec, theta=theta)

    start = np.asarray(theta0, dtype=float) if theta0 is not None else _initial_theta(engine)
    if start.size != layout.size:
        raise FitError("theta0 has the wrong length for this model")
    init_ll, _, _ = engine.profiled(start, want_grad=False)

    def objective(theta):
        # pathological line-search states (residual variance collapsing under
        # a large D) can make the low-rank algebra fail; report them as very
        # poor so the search backtracks instead of aborting
        try:
            ll, grad, _ = engine.profiled(theta)
        except (FitError, np.linalg.LinAlgError):
            return 1e15, np.zeros_like(theta)
        if not (np.isfinite(ll) and np.all(np.isfinite(grad))):
            return 1e15, np.zeros_like(theta)
        return -ll, -grad

    res = minimize(objective, start, jac=True, method="L-BFGS-B",
                   bounds=layout.bounds(),
                   options={"maxiter": spec.max_iter,
                            "ftol": spec.tol * 1e-5, "gtol": spec.tol})
    theta_hat = res.x
    ll_hat, _, beta = engine.profiled(theta_hat, want_grad=False)
    if ll_hat < init_ll:        # quasi-Newton must never end below its start
        theta_hat = start
        ll_hat, _, beta = engine.profiled(theta_hat, want_grad=False)
    L_d, sigma, _ = layout.unpack(theta_hat)
    D = L_d @ L_d.T
    M = beta.reshape(engine.p, J).T
    blups = engine.blups_at(theta_hat, beta)
    return FittedMixedModel(M=M, D=D, sigma=sigma, blups=blups, loglik=ll_hat,
                            init_loglik=init_ll, converged=bool(res.success),
                            n_iter=int(res.nit),
                            residual_structure=spec.residual_structure,
                            spec=spec, theta=theta_hat)


def blup_random_effects(fitted: FittedMixedModel,
                        ds: LongitudinalDataset) -> dict:
    """Conditional means vec(B_i) = D Zt_i' V_i^{-1} (y_i - m_i) keyed by
    object id; objects with more data shrink less."""
    engine = _MarginalEngine(ds, fitted.spec)
    beta = np.asarray(fitted.M, dtype=float).T.ravel()
    return engine.blups_at(fitted.theta, beta)


def predict_mixed(fitted: FittedMixedModel, leaf_index: int, z: np.ndarray,
                  object_id=None, strict: bool = False) -> np.ndarray:
    """Column of M for the leaf plus the object's BLUP contribution; an
    unknown object falls back to the fixed part unless ``strict``."""
    if leaf_index < 0 or leaf_index >= fitted.M.shape[1]:
        raise ValueError(f"leaf index {leaf_index} out of range")
    out = fitted.M[:, leaf_index].copy()
    if object_id is not None:
        if object_id in fitted.blups:
            out = out + fitted.blups[object_id] @ np.asarray(z, dtype=float)
        elif strict:
            raise FitError(f"unknown object id '{object_id}'")
    return out
