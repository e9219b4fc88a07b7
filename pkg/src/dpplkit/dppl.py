"""Probabilistic projection layer.

Maps a Gaussian prediction onto a constraint set in the Q-weighted least
squares sense and propagates its covariance:

* linear equalities: closed-form oblique projector, exact moments;
* nonlinear equalities: Newton iteration on the linearized KKT system
  (constraint curvature dropped) plus delta-method covariance;
* box bounds: coordinatewise clamp.

``Q`` arguments are ``None`` (identity), a positive vector (diagonal Q) or a
dense SPD matrix.  Every linear solve goes through the q x q Schur complement
``A Q^-1 A^T``; the (n+q) KKT matrix is never formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .constraints import BoxBounds, LinearEquality, NonlinearEquality
from .errors import ConstraintError, ConvergenceError, InvalidArgumentError, ProjectionFailure
from .probdist import GaussianVec, sample

Q_MODES = ("identity", "inv_variance_diag")
JACOBIAN_MODES = ("exact", "gauss_newton")

_PSD_RTOL = 1e-10


@dataclass(frozen=True)
class ProjectionConfig:
    """Q policy and Newton settings.

    ``jacobian`` selects the projection Jacobian used for covariance
    propagation: ``"gauss_newton"`` drops constraint curvature (idempotent,
    exact on the manifold), ``"exact"`` differentiates the KKT conditions at
    the converged multipliers.

    ``backtrack`` halves a Newton step (down to 1/1024 of ``damping``)
    until ``||h||_2`` decreases, and shrinks the step scale for later
    iterations whenever the convergence measure grows.  Off by default; far from the
    manifold the undamped curvature-free step can cycle.
    """

    q_mode: str = "identity"
    newton_max_iter: int = 50
    newton_tol: float = 1e-10
    damping: float = 1.0
    jacobian: str = "exact"
    backtrack: bool = False

    def __post_init__(self):
        if self.q_mode not in Q_MODES:
            raise InvalidArgumentError(f"q_mode must be one of {Q_MODES}, got {self.q_mode!r}")
        if not self.newton_tol > 0:
            raise InvalidArgumentError("newton_tol must be positive")
        if int(self.newton_max_iter) < 1:
            raise InvalidArgumentError("newton_max_iter must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise InvalidArgumentError("damping must lie in (0, 1]")
        if self.jacobian not in JACOBIAN_MODES:
            raise InvalidArgumentError(f"jacobian must be one of {JACOBIAN_MODES}")

    def q_for(self, dist):
        """Q for ``dist`` under this policy (None means identity)."""
        if self.q_mode == "identity":
            return None
        var = dist.variances
        if np.any(var <= 0):
            raise InvalidArgumentError("inverse-variance Q needs strictly positive variances")
        return 1.0 / var


@dataclass
class NewtonTrace:
    iterations: int
    residual_history: np.ndarray
    converged: bool
    lambda_star: np.ndarray
    iterates: list = field(default_factory=list, repr=False)


class _QInv:
    """Applies Q^-1 for identity, diagonal or dense SPD Q."""

    def __init__(self, Q, n):
        if Q is None:
            self.kind, self.diag = "identity", None
            return
        Q = np.asarray(Q, dtype=float)
        if Q.ndim == 1:
            if Q.size != n:
                raise InvalidArgumentError(f"diagonal Q has length {Q.size}, expected {n}")
            if not np.all(np.isfinite(Q)) or np.any(Q <= 0):
                raise InvalidArgumentError("diagonal Q must be finite and positive")
            self.kind, self.diag = "diag", 1.0 / Q
        elif Q.ndim == 2:
            if Q.shape != (n, n):
                raise InvalidArgumentError(f"Q has shape {Q.shape}, expected {(n, n)}")
            try:
                self.cho = scipy.linalg.cho_factor(0.5 * (Q + Q.T), lower=True)
            except np.linalg.LinAlgError:
                raise InvalidArgumentError("Q is not symmetric positive definite") from None
            self.kind, self.diag = "dense", None
            self.Q = 0.5 * (Q + Q.T)
        else:
            raise InvalidArgumentError("Q must be None, a vector or a matrix")
        self.n = n

    def __call__(self, M):
        if self.kind == "identity":
            return np.array(M, dtype=float)
        if self.kind == "diag":
            return M * (self.diag if M.ndim == 1 else self.diag[:, None])
        return scipy.linalg.cho_solve(self.cho, M)

    def q_times(self, M):
        if self.kind == "identity":
            return np.array(M, dtype=float)
        if self.kind == "diag":
            return M / (self.diag if M.ndim == 1 else self.diag[:, None])
        return self.Q @ M

    def dense_q(self, n):
        if self.kind == "identity":
            return np.eye(n)
        if self.kind == "diag":
            return np.diag(1.0 / self.diag)
        return self.Q.copy()


def _schur_factor(S):
    """Cholesky of the Schur complement; rank-deficient S raises."""
    try:
        return scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    q = S.shape[0]
    rank = np.linalg.matrix_rank(S, tol=1e-10 * max(np.linalg.norm(S, 2), np.finfo(float).tiny))
    raise ConstraintError(f"Schur complement A Q^-1 A^T is singular: rank {rank} < {q}")


def _check_schur_rank(S, cho):
    d = np.abs(cho[0].diagonal()) ** 2
    if d.min() <= 1e-14 * d.max():
        q = S.shape[0]
        rank = np.linalg.matrix_rank(S, tol=1e-10 * max(np.linalg.norm(S, 2), np.finfo(float).tiny))
        raise ConstraintError(f"Schur complement A Q^-1 A^T is singular: rank {min(rank, q - 1)} < {q}")


class _LinearSolve:
    """Cached factors for the projection onto {A u = b}."""

    def __init__(self, Q, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        self.A = A
        self.qinv = _QInv(Q, A.shape[1])
        self.QiAt = self.qinv(A.T)
        S = A @ self.QiAt
        self.S = 0.5 * (S + S.T)
        self.cho = _schur_factor(self.S)
        _check_schur_rank(self.S, self.cho)

    def correction(self, r):
        """Q^-1 A^T S^-1 r for residual(s) r (q or q x m)."""
        return self.QiAt @ scipy.linalg.cho_solve(self.cho, r)

    def projector(self):
        n = self.A.shape[1]
        return np.eye(n) - self.QiAt @ scipy.linalg.cho_solve(self.cho, self.A)


def _as_matrix(A):
    return A.A if isinstance(A, LinearEquality) else np.atleast_2d(np.asarray(A, dtype=float))


def oblique_projector(Q, A):
    """``I - Q^-1 A^T (A Q^-1 A^T)^-1 A``."""
    return _LinearSolve(Q, _as_matrix(A)).projector()


def project_linear(z, Q, lin):
    """Closest point to ``z`` in the Q-norm with ``A u = b``."""
    z = np.asarray(z, dtype=float)
    solver = _LinearSolve(Q, lin.A)
    return z - solver.correction(lin.A @ z - lin.b)


def psd_finalize(C):
    """Symmetrize and clip tiny negative eigenvalues; large ones are an error."""
    C = 0.5 * (C + C.T)
    w = np.linalg.eigvalsh(C)
    scale = max(abs(w[0]), abs(w[-1]))
    if w[0] < -_PSD_RTOL * scale:
        raise ConvergenceError(f"propagated covariance is indefinite (min eigenvalue {w[0]:.3e})")
    if w[0] < 0:
        w, V = np.linalg.eigh(C)
        C = (V * np.clip(w, 0.0, None)) @ V.T
        C = 0.5 * (C + C.T)
    return C


def _sandwich(P, dist):
    if dist.is_diagonal:
        return (P * dist.cov) @ P.T
    return P @ dist.cov @ P.T


def propagate_linear(dist, Q, lin):
    """Exact moments of the projected Gaussian: (P mu + c, P Sigma P^T)."""
    solver = _LinearSolve(Q, lin.A)
    mu = dist.mean - solver.correction(lin.A @ dist.mean - lin.b)
    P = solver.projector()
    return GaussianVec(mu, psd_finalize(_sandwich(P, dist)))


def project_nonlinear(z, Q, nl, cfg=None):
    """Newton iteration on the linearized KKT conditions, starting at ``z``.

    Each step solves ``lam = S^-1 (h(u) - J (u - z))`` with
    ``S = J Q^-1 J^T`` and sets ``u = z - Q^-1 J^T lam``.  Convergence is
    measured before every step by ``||h(u)||_inf + ||Q(u-z) + J^T lam||_inf``
    with ``lam`` the least-squares multiplier at ``u``.
    """
    cfg = ProjectionConfig() if cfg is None else cfg
    z = np.asarray(z, dtype=float).reshape(-1)
    n = z.size
    if n != nl.n:
        raise InvalidArgumentError(f"z has length {n}, constraint expects {nl.n}")
    qinv = _QInv(Q, n)

    def measure(u):
        hv = nl.residual(u)
        J = np.asarray(nl.jac_h(u), dtype=float)
        if J.shape != (nl.q, n):
            raise ConstraintError(f"jac_h returned shape {J.shape}, expected {(nl.q, n)}")
        if not (np.all(np.isfinite(hv)) and np.all(np.isfinite(J))):
            return None
        QiJt = qinv(J.T)
        S = J @ QiJt
        S = 0.5 * (S + S.T)
        cho = _schur_factor(S)
        _check_schur_rank(S, cho)
        d = u - z
        lam_ls = -scipy.linalg.cho_solve(cho, J @ d, check_finite=False)
        stat = qinv.q_times(d) + J.T @ lam_ls
        res = float(np.abs(hv).max() + np.abs(stat).max())
        return res, hv, J, QiJt, cho, lam_ls

    def guarded(u):
        try:
            return measure(u)
        except ConstraintError:
            return None

    u = z.copy()
    history = []
    iterates = []
    iterations = 0
    lam_ls = np.zeros(nl.q)
    converged = False
    scale = cfg.damping
    floor = cfg.damping / 1024
    state = measure(u)
    while True:
        if state is None:
            trace = NewtonTrace(iterations, np.array(history), False, lam_ls, iterates)
            raise ConvergenceError("non-finite constraint value during Newton iteration", trace)
        res, hv, J, QiJt, cho, lam_ls = state
        history.append(res)
        if res <= cfg.newton_tol:
            converged = True
            break
        if iterations >= cfg.newton_max_iter:
            break
        lam = scipy.linalg.cho_solve(cho, hv - J @ (u - z), check_finite=False)
        step = z - QiJt @ lam - u
        t = scale
        trial = u + t * step
        if cfg.backtrack:
            # The step solves J step = -h, so it is a descent direction for ||h||.
            h0 = float(np.linalg.norm(hv))

            def worse(st):
                return st is None or np.linalg.norm(st[1]) > max((1.0 - 1e-4 * t) * h0, cfg.newton_tol)

            state = guarded(trial)
            while worse(state) and t > floor:
                t *= 0.5
                trial = u + t * step
                state = guarded(trial)
            if state is None:
                state = measure(trial)
            # Without curvature the step can overshoot along the manifold;
            # shrink the step scale whenever the full measure grows.
            scale = 0.5 * scale if state[0] > res else min(cfg.damping, 1.25 * scale)
            scale = max(scale, floor)
        else:
            state = measure(trial)
        u = trial
        iterations += 1
        iterates.append(u.copy())
    trace = NewtonTrace(iterations, np.array(history), converged, lam_ls, iterates)
    if not converged:
        raise ConvergenceError(
            f"Newton projection did not converge in {cfg.newton_max_iter} iterations "
            f"(residual {history[-1]:.3e})",
            trace,
        )
    return u, trace


def _fd_hess_lag(nl, u, lam, step=1e-6):
    n = u.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step * max(1.0, abs(u[j]))
        gp = np.asarray(nl.jac_h(u + e)).T @ lam
        gm = np.asarray(nl.jac_h(u - e)).T @ lam
        H[:, j] = (gp - gm) / (2.0 * e[j])
    return 0.5 * (H + H.T)


def jacobian_nonlinear(u_star, Q, nl, multipliers=None):
    """Jacobian of the projection map z -> u*(z) at a converged point.

    Without ``multipliers`` this is the curvature-free form
    ``I - Q^-1 J^T (J Q^-1 J^T)^-1 J`` with J = jac_h(u*).  With the converged
    multipliers it is the implicit-function Jacobian of the KKT system,
    ``(K^-1 - K^-1 J^T (J K^-1 J^T)^-1 J K^-1) Q`` with
    ``K = Q + sum_k lam_k Hess h_k``.  Both agree when lam = 0 or h is affine.
    """
    u = np.asarray(u_star, dtype=float).reshape(-1)
    n = u.size
    J = np.atleast_2d(np.asarray(nl.jac_h(u), dtype=float))
    if multipliers is None:
        return _LinearSolve(Q, J).projector()
    lam = np.asarray(multipliers, dtype=float)
    qinv = _QInv(Q, n)
    Qd = qinv.dense_q(n)
    if getattr(nl, "hess_lag", None) is not None:
        H = np.asarray(nl.hess_lag(u, lam), dtype=float)
    else:
        H = _fd_hess_lag(nl, u, lam)
    K = Qd + H
    try:
        lu = scipy.linalg.lu_factor(K)
    except (np.linalg.LinAlgError, ValueError):
        raise ConstraintError("KKT curvature matrix is singular") from None
    KiJt = scipy.linalg.lu_solve(lu, J.T)
    S = J @ KiJt
    KiQ = scipy.linalg.lu_solve(lu, Qd)
    try:
        corr = np.linalg.solve(S, J @ KiQ)
    except np.linalg.LinAlgError:
        raise ConstraintError("reduced Schur complement J K^-1 J^T is singular") from None
    return KiQ - KiJt @ corr


def propagate_nonlinear(dist, Q, nl, cfg=None):
    """Delta-method moments: mean u*(mu), covariance J_T Sigma J_T^T."""
    cfg = ProjectionConfig() if cfg is None else cfg
    u, trace = project_nonlinear(dist.mean, Q, nl, cfg)
    lam = trace.lambda_star if cfg.jacobian == "exact" else None
    JT = jacobian_nonlinear(u, Q, nl, multipliers=lam)
    return GaussianVec(u, psd_finalize(_sandwich(JT, dist)))


def propagate_empirical(dist, projector, count, seed):
    """Sample moments of ``projector`` applied to draws of ``dist``."""
    count = int(count)
    if count < 2:
        raise InvalidArgumentError("propagate_empirical needs count >= 2")
    draws = sample(dist, count, seed)
    out = np.empty_like(draws)
    for i, row in enumerate(draws):
        try:
            out[i] = projector(row)
        except Exception as exc:  # re-raised with the failing row
            raise ProjectionFailure(i, exc) from exc
    mu = out.mean(axis=0)
    C = np.cov(out, rowvar=False, ddof=1).reshape(dist.n, dist.n)
    return GaussianVec(mu, psd_finalize(C))


def project_box(z, box):
    """Clamp into [lo, hi]; this is the exact projection for any diagonal Q.

    The returned Jacobian diagonal is 1 strictly inside and 0 on active
    bounds, including points that sit exactly on a bound.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size != box.n:
        raise InvalidArgumentError(f"z has length {z.size}, box has {box.n}")
    u = np.clip(z, box.lo, box.hi)
    J = ((z > box.lo) & (z < box.hi)).astype(float)
    return u, J


def hier_e2e_update(dist, lin):
    """Orthogonal reconciliation update (Q = I, b = 0)."""
    if np.any(lin.b != 0):
        raise InvalidArgumentError("hier_e2e_update requires b = 0")
    A = lin.A
    Apinv_A = A.T @ np.linalg.solve(A @ A.T, A)
    mu = dist.mean - Apinv_A @ dist.mean
    S = dist.dense_cov()
    SP = S @ Apinv_A
    cov = S - Apinv_A @ S - SP + Apinv_A @ SP
    return GaussianVec(mu, psd_finalize(cov))


def probconserv_update(dist, lin):
    """Conditioning-style update, equivalent to the oblique projection with Q = Sigma^-1."""
    S = dist.dense_cov()
    A = lin.A
    SAt = S @ A.T
    M = A @ SAt
    cho = _schur_factor(0.5 * (M + M.T))
    _check_schur_rank(M, cho)
    K = scipy.linalg.cho_solve(cho, SAt.T).T
    mu = dist.mean - K @ (A @ dist.mean - lin.b)
    cov = S - K @ SAt.T
    return GaussianVec(mu, psd_finalize(cov))


def project_samples(samples, Q, constraint, cfg=None):
    """Project every row of ``samples`` onto ``constraint``."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if isinstance(constraint, LinearEquality):
        solver = _LinearSolve(Q, constraint.A)
        R = X @ constraint.A.T - constraint.b
        return X - solver.correction(R.T).T
    if isinstance(constraint, BoxBounds):
        return np.clip(X, constraint.lo, constraint.hi)
    if isinstance(constraint, NonlinearEquality):
        out = np.empty_like(X)
        for i, row in enumerate(X):
            try:
                out[i] = project_nonlinear(row, Q, constraint, cfg)[0]
            except Exception as exc:
                raise ProjectionFailure(i, exc) from exc
        return out
    raise InvalidArgumentError(f"unsupported constraint type {type(constraint).__name__}")


class BatchProjector:
    """Batched diagonal-Q projection with O(n q^2) marginal variances.

    ``qinv`` is (B, n): the diagonal of Q^-1 for each item.  ``A`` is (q, n)
    shared, or (B, q, n) per item (frozen constraint Jacobians).  With
    ``U = Q^-1 A^T S^-1`` the projector is ``P = I - U A``.
    """

    def __init__(self, qinv, A):
        self.qinv = np.atleast_2d(np.asarray(qinv, dtype=float))
        A = np.asarray(A, dtype=float)
        B = self.qinv.shape[0]
        self.A = np.broadcast_to(A, (B,) + A.shape[-2:]) if A.ndim == 2 else A
        AQ = self.A * self.qinv[:, None, :]
        S = AQ @ np.swapaxes(self.A, 1, 2)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise ConstraintError("Schur complement A Q^-1 A^T is singular for some batch item") from None
        Y = np.linalg.solve(L, AQ)
        self.U = np.swapaxes(np.linalg.solve(np.swapaxes(L, 1, 2), Y), 1, 2)  # (B, n, q)
        self.UA_diag = np.einsum("bjr,brj->bj", self.U, self.A)

    def apply(self, z, b=None):
        """``z - U (A z - b)`` row-wise."""
        r = (self.A @ z[:, :, None])[:, :, 0]
        if b is not None:
            r = r - b
        return z - (self.U @ r[:, :, None])[:, :, 0]

    def marginals(self, d):
        """diag(P diag(d) P^T) for each item."""
        ADAt = (self.A * d[:, None, :]) @ np.swapaxes(self.A, 1, 2)
        quad = np.einsum("bjr,bjr->bj", self.U @ ADAt, self.U)
        return d * (1.0 - 2.0 * self.UA_diag) + quad

    def adjoint_mean(self, g):
        """P^T g."""
        Ug = (np.swapaxes(self.U, 1, 2) @ g[:, :, None])[:, :, 0]
        return g - (np.swapaxes(self.A, 1, 2) @ Ug[:, :, None])[:, :, 0]

    def adjoint_var(self, g):
        """(P * P)^T g, the adjoint of :meth:`marginals` in d."""
        M = np.swapaxes(self.U, 1, 2) @ (self.U * g[:, :, None])
        quad = np.einsum("brk,brk->bk", M @ self.A, self.A)
        return g * (1.0 - 2.0 * self.UA_diag) + quad
