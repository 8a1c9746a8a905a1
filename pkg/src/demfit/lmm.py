"""Linear mixed-effects model plugin.

Model: y_i = X_i beta + Z_i b_i + e_i with b_i ~ N(0, tau2 * D) and
e_i ~ N(0, tau2 * I).  D is parameterized through its Cholesky factor L,
so D = L L^T stays symmetric positive definite along the iterations.

The conditional-maximization update is closed form given the subset
aggregates: beta from the normal equations, then tau2 from the expected
residual sum re-centered at the new beta, then D from the posterior
second moment of the random effects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .ddsum import DDArray
from .model import ModelContract, NumericalDomainError, RankDeficiencyError, SuffStats


@dataclass(frozen=True)
class Theta:
    """Parameter point: fixed effects, Cholesky factor of D, error variance."""

    beta: np.ndarray
    L: np.ndarray
    tau2: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        L = np.asarray(self.L, dtype=float)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "tau2", float(self.tau2))
        if not np.all(np.isfinite(beta)) or not np.all(np.isfinite(L)):
            raise NumericalDomainError("non-finite parameter values")
        if self.tau2 <= 0 or not math.isfinite(self.tau2):
            raise NumericalDomainError(f"tau2 must be positive, got {self.tau2}")
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise NumericalDomainError("L must be square")
        if np.any(np.triu(L, 1) != 0):
            raise NumericalDomainError("L must be lower triangular")
        if np.any(np.diag(L) <= 0):
            raise NumericalDomainError("L must have a positive diagonal")

    @property
    def p(self) -> int:
        return self.beta.size

    @property
    def q(self) -> int:
        return self.L.shape[0]

    @property
    def D(self) -> np.ndarray:
        return self.L @ self.L.T

    @property
    def Sigma(self) -> np.ndarray:
        """Random-effects covariance tau2 * D."""
        return self.tau2 * self.D

    def key(self) -> bytes:
        """Hashable identity for caching posterior moments."""
        return self.beta.tobytes() + self.L.tobytes() + np.float64(self.tau2).tobytes()

    @classmethod
    def from_cov(cls, beta, D, tau2) -> "Theta":
        D = np.asarray(D, dtype=float)
        try:
            L = np.linalg.cholesky(D)
        except np.linalg.LinAlgError as exc:
            raise NumericalDomainError("D is not positive definite") from exc
        return cls(np.asarray(beta, dtype=float), L, float(tau2))

    @classmethod
    def default_start(cls, p: int, q: int) -> "Theta":
        """beta = 0, D = I, tau2 = 10."""
        return cls(np.zeros(p), np.eye(q), 10.0)


@dataclass(frozen=True)
class Sample:
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        if y.size < 1:
            raise ValueError("sample must have at least one observation")
        if X.shape[0] != y.size or Z.shape[0] != y.size:
            raise ValueError(
                f"row mismatch: y has {y.size}, X has {X.shape[0]}, Z has {Z.shape[0]}"
            )

    @property
    def n_obs(self) -> int:
        return self.y.size


SubsetData = Sequence[Sample]


def _unconstrained_size(p: int, q: int) -> int:
    return p + q * (q + 1) // 2 + 1


def theta_to_vec(theta: Theta) -> np.ndarray:
    """Map to the unconstrained space (beta, vech(L) with log diagonal, log tau2)."""
    q = theta.q
    rows, cols = np.tril_indices(q)
    tri = theta.L[rows, cols].copy()
    tri[rows == cols] = np.log(tri[rows == cols])
    return np.concatenate([theta.beta, tri, [math.log(theta.tau2)]])


def vec_to_theta(u: np.ndarray, p: int, q: int) -> Theta:
    u = np.asarray(u, dtype=float)
    beta = u[:p]
    tri = u[p : p + q * (q + 1) // 2].copy()
    rows, cols = np.tril_indices(q)
    tri[rows == cols] = np.exp(tri[rows == cols])
    L = np.zeros((q, q))
    L[rows, cols] = tri
    return Theta(beta, L, math.exp(u[-1]))


class LmmSuffStats:
    """Additive subset aggregates for the mixed model.

    The flat accumulator holds, in order: S_xx (p*p), S_xy (p), S_xzb (p),
    S_bb (q*q), then the scalars s_yy, s_yzb, s_bzzb.  Those are enough to
    evaluate the expected residual sum at any beta, so the maximization can
    move beta away from the anchor the E step was run at.
    """

    __slots__ = ("p", "q", "m", "n", "_acc")

    def __init__(self, p: int, q: int):
        self.p = p
        self.q = q
        self.m = 0
        self.n = 0
        self._acc = DDArray(p * p + 2 * p + q * q + 4)

    # -- flat layout -------------------------------------------------------
    def _slices(self):
        p, q = self.p, self.q
        i0 = 0
        sl = {}
        for name, size in [
            ("S_xx", p * p),
            ("S_xy", p),
            ("S_xzb", p),
            ("S_bb", q * q),
            ("s_yy", 1),
            ("s_yzb", 1),
            ("s_bzzb", 1),
            ("loglik", 1),
        ]:
            sl[name] = slice(i0, i0 + size)
            i0 += size
        return sl

    def _get(self, name):
        return self._acc.value()[self._slices()[name]]

    @property
    def S_xx(self) -> np.ndarray:
        return self._get("S_xx").reshape(self.p, self.p)

    @property
    def S_xy(self) -> np.ndarray:
        return self._get("S_xy")

    @property
    def S_xzb(self) -> np.ndarray:
        return self._get("S_xzb")

    @property
    def S_bb(self) -> np.ndarray:
        return self._get("S_bb").reshape(self.q, self.q)

    @property
    def s_yy(self) -> float:
        return float(self._get("s_yy")[0])

    @property
    def s_yzb(self) -> float:
        return float(self._get("s_yzb")[0])

    @property
    def s_bzzb(self) -> float:
        return float(self._get("s_bzzb")[0])

    @property
    def loglik(self) -> float:
        # accumulated like the other statistics so the rounded total does
        # not depend on how the samples were grouped across subsets
        return float(self._get("loglik")[0])

    # -- accumulation ------------------------------------------------------
    def add_sample(self, X, y, Zb, B, G, loglik_i):
        """Fold one sample's contribution in; B = E[b b^T], G = Z^T Z."""
        vec = np.concatenate(
            [
                (X.T @ X).ravel(),
                X.T @ y,
                X.T @ Zb,
                B.ravel(),
                [y @ y, y @ Zb, float(np.sum(G * B)), loglik_i],
            ]
        )
        self._acc.add(vec)
        self.m += 1
        self.n += y.size

    def combine(self, other: "LmmSuffStats") -> "LmmSuffStats":
        if (self.p, self.q) != (other.p, other.q):
            raise ValueError("incompatible statistic shapes")
        out = LmmSuffStats(self.p, self.q)
        out._acc = self._acc.copy()
        out._acc.merge(other._acc)
        out.m = self.m + other.m
        out.n = self.n + other.n
        return out

    def rss_exp(self, beta: np.ndarray) -> float:
        """Expected residual sum of squares at beta (anchors fixed)."""
        return (
            self.s_yy
            - 2.0 * self.s_yzb
            + self.s_bzzb
            + beta @ self.S_xx @ beta
            - 2.0 * beta @ (self.S_xy - self.S_xzb)
        )

    # -- wire serialization ------------------------------------------------
    def pack(self) -> np.ndarray:
        return np.concatenate(
            [[float(self.m), float(self.n)], self._acc.hi, self._acc.lo]
        )

    @classmethod
    def unpack(cls, arr: np.ndarray, p: int, q: int) -> "LmmSuffStats":
        out = cls(p, q)
        size = out._acc.hi.size
        out.m = int(arr[0])
        out.n = int(arr[1])
        out._acc = DDArray.from_parts(arr[2 : 2 + size], arr[2 + size : 2 + 2 * size])
        return out


class LmmModel(ModelContract):
    """ModelContract implementation for the linear mixed-effects model."""

    def __init__(self, p: int, q: int, cm_order: str = "joint"):
        if cm_order not in ("joint", "ecm"):
            raise ValueError(f"unknown cm_order {cm_order!r}")
        self.p = p
        self.q = q
        self.cm_order = cm_order
        self._moment_cache: dict[tuple[bytes, int], list] = {}

    # -- per-sample conditional Gaussian -----------------------------------
    def posterior_moments(self, theta: Theta, s: Sample):
        """Mean and covariance of the random effects given the data.

        Computed through the q-dimensional precision A = D^{-1} + Z^T Z,
        which equals the standard W = Z D Z^T + I conditioning without ever
        forming the n_i-dimensional inverse.
        """
        b_hat, C_hat, _ = self._moments_full(theta, s)
        return b_hat, C_hat

    def _moments_full(self, theta: Theta, s: Sample):
        Dinv = sla.cho_solve((theta.L, True), np.eye(self.q), check_finite=False)
        return self._moments_with_dinv(theta, s, Dinv)

    def _moments_with_dinv(self, theta: Theta, s: Sample, Dinv):
        G = s.Z.T @ s.Z
        A = Dinv + G
        try:
            cA = sla.cho_factor(A, lower=True, check_finite=False)
        except (sla.LinAlgError, ValueError) as exc:
            raise NumericalDomainError(
                "posterior precision not positive definite (corrupt data?)"
            ) from exc
        r0 = s.y - s.X @ theta.beta
        ztr = s.Z.T @ r0
        b_hat = sla.cho_solve(cA, ztr, check_finite=False)
        Ainv = sla.cho_solve(cA, np.eye(self.q), check_finite=False)
        C_hat = theta.tau2 * Ainv
        # marginal log density of y_i, via the determinant lemma
        logdet_A = 2.0 * np.sum(np.log(np.diag(cA[0])))
        logdet_D = 2.0 * np.sum(np.log(np.diag(theta.L)))
        quad = r0 @ r0 - ztr @ b_hat
        n_i = s.n_obs
        loglik_i = (
            -0.5 * n_i * math.log(2.0 * math.pi * theta.tau2)
            - 0.5 * (logdet_A + logdet_D)
            - 0.5 * quad / theta.tau2
        )
        if not math.isfinite(loglik_i):
            raise NumericalDomainError("non-finite marginal log density")
        return b_hat, C_hat, loglik_i

    def _subset_moments(self, theta: Theta, subset: SubsetData, subset_id: int = -1):
        key = (theta.key(), id(subset))
        hit = self._moment_cache.get(key)
        if hit is not None:
            return hit
        Dinv = sla.cho_solve((theta.L, True), np.eye(self.q), check_finite=False)
        out = [self._moments_with_dinv(theta, s, Dinv) for s in subset]
        self._moment_cache[key] = out
        return out

    def clear_cache(self) -> None:
        self._moment_cache.clear()

    # -- ModelContract operations -------------------------------------------
    def local_loglik(self, theta: Theta, subset: SubsetData) -> float:
        hit = self._moment_cache.get((theta.key(), id(subset)))
        if hit is not None:
            return math.fsum(t[2] for t in hit)
        Dinv = sla.cho_solve((theta.L, True), np.eye(self.q), check_finite=False)
        return math.fsum(
            self._moments_with_dinv(theta, s, Dinv)[2] for s in subset
        )

    def local_estep(
        self, theta: Theta, subset: SubsetData, subset_id: int = 0, anchor_tag: int = 0
    ) -> SuffStats:
        stats = LmmSuffStats(self.p, self.q)
        Dinv = sla.cho_solve((theta.L, True), np.eye(self.q), check_finite=False)
        for s in subset:
            b_hat, C_hat, loglik_i = self._moments_with_dinv(theta, s, Dinv)
            B = np.outer(b_hat, b_hat) + C_hat
            stats.add_sample(s.X, s.y, s.Z @ b_hat, B, s.Z.T @ s.Z, loglik_i)
        return SuffStats(
            subset_id=subset_id,
            anchor_tag=anchor_tag,
            n_obs=stats.n,
            local_loglik_at_anchor=stats.loglik,
            payload=stats,
        )

    def q_value(self, stats: LmmSuffStats, theta: Theta) -> float:
        """Expected complete-data log likelihood reconstructed from aggregates."""
        logdet_D = 2.0 * np.sum(np.log(np.diag(theta.L)))
        Dinv = sla.cho_solve((theta.L, True), np.eye(self.q), check_finite=False)
        return (
            -0.5 * (stats.n + self.q * stats.m) * math.log(2.0 * math.pi * theta.tau2)
            - 0.5 * stats.m * logdet_D
            - 0.5 * (stats.rss_exp(theta.beta) + float(np.sum(Dinv * stats.S_bb))) / theta.tau2
        )

    def cm_steps(self, agg, theta_current: Theta) -> Theta:
        stats: LmmSuffStats = agg.payload if isinstance(agg, SuffStats) else agg
        S_xx = stats.S_xx
        try:
            c = sla.cho_factor(S_xx, lower=True, check_finite=False)
        except (sla.LinAlgError, ValueError) as exc:
            raise RankDeficiencyError(
                "fixed-effects design S_xx is singular; columns of X are collinear"
            ) from exc
        beta = sla.cho_solve(c, stats.S_xy - stats.S_xzb, check_finite=False)
        if self.cm_order == "joint":
            tau2 = stats.rss_exp(beta) / stats.n
            D = stats.S_bb / (stats.m * tau2)
        else:
            Dinv_old = sla.cho_solve(
                (theta_current.L, True), np.eye(self.q), check_finite=False
            )
            tau2 = (stats.rss_exp(beta) + float(np.sum(Dinv_old * stats.S_bb))) / (
                stats.n + self.q * stats.m
            )
            D = stats.S_bb / (stats.m * tau2)
        theta_new = Theta.from_cov(beta, D, tau2)
        if not np.all(np.isfinite(theta_to_vec(theta_new))):
            raise NumericalDomainError("non-finite parameter update")
        return theta_new

    def local_kl(self, theta_eval: Theta, theta_anchor: Theta, subset: SubsetData) -> float:
        """Sum of Gaussian KL(posterior at anchor || posterior at eval)."""
        anchor_m = self._subset_moments(theta_anchor, subset)
        eval_m = self._subset_moments(theta_eval, subset)
        q = self.q
        terms = []
        for (ba, Ca, _), (be, Ce, _) in zip(anchor_m, eval_m):
            ce = sla.cho_factor(Ce, lower=True, check_finite=False)
            ca = np.linalg.cholesky(Ca)
            tr = float(np.sum(sla.cho_solve(ce, Ca, check_finite=False).diagonal()))
            d = be - ba
            quad = float(d @ sla.cho_solve(ce, d, check_finite=False))
            logdet = 2.0 * (
                np.sum(np.log(np.diag(ce[0]))) - np.sum(np.log(np.diag(ca)))
            )
            terms.append(0.5 * (tr + quad - q + logdet))
        val = math.fsum(terms)
        if not math.isfinite(val):
            raise NumericalDomainError("non-finite KL term")
        return val

    # -- wire serialization --------------------------------------------------
    def pack_theta(self, theta: Theta) -> np.ndarray:
        rows, cols = np.tril_indices(self.q)
        return np.concatenate([theta.beta, theta.L[rows, cols], [theta.tau2]])

    def unpack_theta(self, arr: np.ndarray) -> Theta:
        p, q = self.p, self.q
        beta = arr[:p]
        rows, cols = np.tril_indices(q)
        L = np.zeros((q, q))
        L[rows, cols] = arr[p : p + rows.size]
        return Theta(beta, L, float(arr[-1]))

    def pack_stats(self, stats: SuffStats) -> np.ndarray:
        return stats.payload.pack()

    def unpack_stats(self, arr: np.ndarray, subset_id: int, anchor_tag: int) -> SuffStats:
        payload = LmmSuffStats.unpack(arr, self.p, self.q)
        return SuffStats(
            subset_id=subset_id,
            anchor_tag=anchor_tag,
            n_obs=payload.n,
            local_loglik_at_anchor=payload.loglik,
            payload=payload,
        )


# -- information and speed matrices ---------------------------------------


def fd_gradient(f, u0: np.ndarray, rel: float = 1e-5) -> np.ndarray:
    u0 = np.asarray(u0, dtype=float)
    g = np.zeros_like(u0)
    for i in range(u0.size):
        h = rel * (1.0 + abs(u0[i]))
        up, dn = u0.copy(), u0.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2.0 * h)
    return g


def fd_hessian(f, u0: np.ndarray, rel: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian with per-coordinate steps rel*(1+|u_i|)."""
    u0 = np.asarray(u0, dtype=float)
    n = u0.size
    h = rel * (1.0 + np.abs(u0))
    H = np.zeros((n, n))
    f0 = f(u0)
    for i in range(n):
        up, dn = u0.copy(), u0.copy()
        up[i] += h[i]
        dn[i] -= h[i]
        H[i, i] = (f(up) - 2.0 * f0 + f(dn)) / h[i] ** 2
        for j in range(i):
            pp, pm, mp, mm = u0.copy(), u0.copy(), u0.copy(), u0.copy()
            pp[[i, j]] += [h[i], h[j]]
            pm[i] += h[i]
            pm[j] -= h[j]
            mp[i] -= h[i]
            mp[j] += h[j]
            mm[[i, j]] -= [h[i], h[j]]
            H[i, j] = H[j, i] = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * h[i] * h[j])
    return H


@dataclass
class InfoMatrices:
    i_obs: np.ndarray
    i_com: np.ndarray
    i_obs_A: np.ndarray
    i_com_A: np.ndarray
    i_obs_Ac: np.ndarray
    i_com_Ac: np.ndarray
    grad_norm: float
    warnings: list = field(default_factory=list)


def information_matrices(
    model: LmmModel,
    theta_hat: Theta,
    subsets: Sequence[SubsetData],
    split: Sequence[int],
    rel: float = 1e-5,
) -> InfoMatrices:
    """Observed- and complete-data information blocks for a subset split.

    All second derivatives are taken in the unconstrained parameterization
    (beta, vech(L) with log diagonal, log tau2) so difference steps never
    leave the valid domain.  i_obs differentiates the marginal log
    likelihood; i_com differentiates the reconstructed expected
    complete-data objective anchored at theta_hat.
    """
    p, q = model.p, model.q
    u0 = theta_to_vec(theta_hat)
    split = sorted(set(split))
    notes = []

    def total_loglik(u):
        th = vec_to_theta(u, p, q)
        return math.fsum(model.local_loglik(th, s) for s in subsets)

    grad_norm = float(np.linalg.norm(fd_gradient(total_loglik, u0, rel)))
    if grad_norm > 1e-4:
        notes.append(
            f"gradient norm {grad_norm:.3e} > 1e-4: theta_hat may not be stationary"
        )

    P = _unconstrained_size(p, q)
    obs_A = np.zeros((P, P))
    obs_Ac = np.zeros((P, P))
    com_A = np.zeros((P, P))
    com_Ac = np.zeros((P, P))
    for k, subset in enumerate(subsets):
        h_obs = -fd_hessian(
            lambda u: model.local_loglik(vec_to_theta(u, p, q), subset), u0, rel
        )
        stats_k = model.local_estep(theta_hat, subset).payload
        h_com = -fd_hessian(
            lambda u: model.q_value(stats_k, vec_to_theta(u, p, q)), u0, rel
        )
        if k in split:
            obs_A += h_obs
            com_A += h_com
        else:
            obs_Ac += h_obs
            com_Ac += h_com
    i_com = com_A + com_Ac
    if np.any(np.linalg.eigvalsh(0.5 * (i_com + i_com.T)) <= 0):
        notes.append("i_com is not positive definite: not at a maximizer")
    return InfoMatrices(
        i_obs=obs_A + obs_Ac,
        i_com=i_com,
        i_obs_A=obs_A,
        i_com_A=com_A,
        i_obs_Ac=obs_Ac,
        i_com_Ac=com_Ac,
        grad_norm=grad_norm,
        warnings=notes,
    )


@dataclass
class SpeedReport:
    S_EM: np.ndarray
    S_DEM: np.ndarray
    C: np.ndarray
    O: np.ndarray
    identity_residual: float
    lower_bound: float
    upper_bound: float
    lam_min_S_EM: float
    eigen_bounds_ok: bool


def speed_matrices(info: InfoMatrices, tol: float = 1e-4) -> SpeedReport:
    """Speed matrices of the full and fractional EM maps, with the
    decomposition identity and the smallest-singular-value sandwich."""
    try:
        S_EM = np.linalg.solve(info.i_com, info.i_obs)
        S_DEM = np.linalg.solve(info.i_com_A, info.i_obs_A)
        C = np.linalg.solve(info.i_com_A, info.i_com_Ac)
        O = np.linalg.solve(info.i_com, info.i_obs_Ac)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(
            "singular complete-data information: split too small for identifiability"
        ) from exc
    eye = np.eye(S_EM.shape[0])
    recon = np.linalg.solve(eye + C, S_DEM) + O
    denom = np.linalg.norm(S_EM)
    residual = float(np.linalg.norm(S_EM - recon) / denom) if denom > 0 else 0.0

    def smin(a):
        return float(np.linalg.svd(a, compute_uv=False)[-1])

    def smax(a):
        return float(np.linalg.svd(a, compute_uv=False)[0])

    lam_em = smin(S_EM)
    lo = smin(S_DEM) / (1.0 + smax(C)) + smin(O)
    hi = smin(S_DEM) / (1.0 + smin(C)) + smin(O)
    ok = residual < 1e-6 and (lo - tol) <= lam_em <= (hi + tol)
    return SpeedReport(
        S_EM=S_EM,
        S_DEM=S_DEM,
        C=C,
        O=O,
        identity_residual=residual,
        lower_bound=lo,
        upper_bound=hi,
        lam_min_S_EM=lam_em,
        eigen_bounds_ok=ok,
    )
