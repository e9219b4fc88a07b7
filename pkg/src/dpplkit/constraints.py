"""Constraint specifications and builders.

Linear equalities (hierarchical coherency, PDE mass conservation), a nonlinear
porous-medium conservation law, box bounds and a total-variation penalty.

Fields on a space-time grid are flattened row-major: slice ``k`` (time) owns
entries ``k*nx : (k+1)*nx``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.special import erf

from .errors import ConstraintError, InvalidArgumentError

KINDS = ("heat", "pme", "stefan", "advection")
PARAM_NAMES = {"heat": "k", "pme": "m", "stefan": "u_star", "advection": "beta"}

_RANK_RTOL = 1e-10
_SLICE_ATOL = 1e-9


def _matrix_rank_qr(A):
    """Numerical rank of ``A`` from a column-pivoted QR of ``A.T``."""
    if A.size == 0:
        return 0
    r = scipy.linalg.qr(A.T, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(r))
    tol = _RANK_RTOL * max(np.linalg.norm(A), np.finfo(float).tiny)
    return int(np.sum(d > tol))


@dataclass(frozen=True, eq=False)
class LinearEquality:
    """``A u = b`` with ``A`` of full row rank."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim == 1:
            A = A[None, :]
        if A.ndim != 2:
            raise ConstraintError("A must be a matrix")
        b = np.array(self.b, dtype=float).reshape(-1)
        q, n = A.shape
        if b.size != q:
            raise ConstraintError(f"b has length {b.size}, expected {q}")
        if q < 1 or q > n:
            raise ConstraintError(f"need 1 <= q <= n, got q={q}, n={n}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ConstraintError("constraint data must be finite")
        rank = _matrix_rank_qr(A)
        if rank < q:
            raise ConstraintError(f"A is rank deficient: rank {rank} < {q} rows")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def q(self):
        return self.A.shape[0]

    @property
    def n(self):
        return self.A.shape[1]

    def residual(self, u):
        return self.A @ np.asarray(u, dtype=float) - self.b

    # NonlinearEquality-compatible interface.
    def h(self, u):
        return self.residual(u)

    def jac_h(self, u):
        return self.A

    def as_nonlinear(self):
        A, b = self.A, self.b
        return NonlinearEquality(
            q=self.q,
            n=self.n,
            h=lambda u: A @ u - b,
            jac_h=lambda u: A,
            hess_lag=lambda u, lam: np.zeros((A.shape[1], A.shape[1])),
            name="affine",
        )


@dataclass(frozen=True, eq=False)
class NonlinearEquality:
    """``h(u) = 0`` with ``q`` components and Jacobian ``jac_h`` (q x n).

    ``hess_lag(u, lam)``, when given, returns sum_k lam_k * Hess h_k(u); it is
    only used for the exact off-manifold projection Jacobian.
    """

    q: int
    n: int
    h: Callable
    jac_h: Callable
    hess_lag: Optional[Callable] = None
    name: str = "nonlinear"
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.q) < 1 or int(self.n) < int(self.q):
            raise ConstraintError(f"need 1 <= q <= n, got q={self.q}, n={self.n}")

    def residual(self, u):
        return np.asarray(self.h(np.asarray(u, dtype=float)), dtype=float)

    def self_test(self, points, rtol=1e-5, step=1e-6):
        """Compare ``jac_h`` to central differences of ``h`` at each point.

        Returns the worst relative error; raises ConstraintError if it
        exceeds ``rtol``.
        """
        worst = 0.0
        for u in np.atleast_2d(np.asarray(points, dtype=float)):
            J = np.asarray(self.jac_h(u), dtype=float)
            if J.shape != (self.q, self.n):
                raise ConstraintError(f"jac_h returned shape {J.shape}, expected {(self.q, self.n)}")
            fd = np.empty_like(J)
            for j in range(self.n):
                e = np.zeros(self.n)
                e[j] = step * max(1.0, abs(u[j]))
                fd[:, j] = (self.residual(u + e) - self.residual(u - e)) / (2.0 * e[j])
            scale = max(np.max(np.abs(J)), 1e-12)
            worst = max(worst, float(np.max(np.abs(J - fd)) / scale))
        if worst > rtol:
            raise ConstraintError(f"jac_h disagrees with finite differences (rel err {worst:.2e})")
        return worst


@dataclass(frozen=True, eq=False)
class BoxBounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).reshape(-1)
        hi = np.array(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ConstraintError("lo and hi must have the same length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ConstraintError("bounds must not be NaN")
        if np.any(lo > hi):
            raise ConstraintError("box bounds need lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n(self):
        return self.lo.size


@dataclass(frozen=True)
class TVPenalty:
    """``weight * tv_value`` on an nt x nx field."""

    weight: float
    nt: int
    nx: int

    def __post_init__(self):
        if not self.weight >= 0:
            raise InvalidArgumentError("TV weight must be >= 0")
        if self.nt < 1 or self.nx < 1:
            raise InvalidArgumentError("grid dimensions must be positive")

    def value(self, u):
        return self.weight * tv_value(np.reshape(u, (self.nt, self.nx)))

    def grad(self, u):
        g = tv_subgradient(np.reshape(u, (self.nt, self.nx)))
        return self.weight * g.reshape(np.shape(u))


def hierarchy_constraint(S_sum):
    """Coherency ``[I_q, -S] u = 0`` for aggregates stacked above bottom series."""
    S = np.asarray(S_sum, dtype=float)
    if S.ndim != 2 or S.size == 0:
        raise ConstraintError("summation matrix must be a non-empty 2-D array")
    if not np.all((S == 0) | (S == 1)):
        raise ConstraintError("summation matrix entries must be 0 or 1")
    empty = np.flatnonzero(~S.any(axis=1))
    if empty.size:
        raise ConstraintError(f"invalid hierarchy: aggregate row {int(empty[0])} sums no bottom series")
    q = S.shape[0]
    return LinearEquality(np.hstack([np.eye(q), -S]), np.zeros(q))


def trapezoid_weights(x):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size < 2:
        raise InvalidArgumentError("trapezoid rule needs at least two nodes")
    dx = np.diff(x)
    if np.any(dx <= 0) or not np.all(np.isfinite(x)):
        raise InvalidArgumentError("grid must be strictly increasing")
    w = np.zeros_like(x)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    return w


def _param(kind, params):
    name = PARAM_NAMES[kind]
    if isinstance(params, dict):
        if name not in params:
            raise InvalidArgumentError(f"{kind} needs parameter '{name}'")
        return float(params[name])
    return float(params)


def _slice_indices(t_slices, t_grid):
    t_slices = np.atleast_1d(np.asarray(t_slices, dtype=float))
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    idx = []
    for t in t_slices:
        k = int(np.argmin(np.abs(t_grid - t)))
        if abs(t_grid[k] - t) > _SLICE_ATOL * max(1.0, abs(t)):
            raise ConstraintError(f"time slice {t!r} is not on the field's time grid")
        idx.append(k)
    if len(set(idx)) != len(idx):
        raise ConstraintError("duplicate time slices")
    return t_slices, np.array(idx, dtype=int)


def conserved_mass(kind, params, t, x_max=1.0):
    """Exact total mass at time ``t`` for each benchmark family."""
    p = _param(kind, params)
    t = float(t)
    if kind == "heat":
        if p <= 0:
            raise InvalidArgumentError("heat needs k > 0")
        return 0.0
    if kind == "pme":
        if p <= 0:
            raise InvalidArgumentError("pme needs m > 0")
        return (p * t) ** (1.0 + 1.0 / p) / (p + 1.0)
    if kind == "stefan":
        from .pdegen import solve_stefan_alpha

        if not 0.0 < p < 1.0:
            raise InvalidArgumentError("stefan needs u_star in (0, 1)")
        alpha = solve_stefan_alpha(p).alpha
        if alpha * math.sqrt(max(t, 0.0)) > x_max:
            raise ConstraintError(f"stefan front has left the domain at t={t}")
        return 2.0 * (1.0 - p) / erf(alpha / 2.0) * math.sqrt(t / math.pi)
    if kind == "advection":
        if p <= 0:
            raise InvalidArgumentError("advection needs beta > 0")
        if 0.5 + p * t > x_max + 1e-12:
            raise ConstraintError(f"advection front has left the domain at t={t}")
        return 0.5 + p * t
    raise InvalidArgumentError(f"unknown PDE kind {kind!r}")


def conservation_linear(kind, params, x_grid, t_slices, t_grid=None):
    """Trapezoid mass constraints, one row per requested time slice.

    ``t_grid`` lists the times of the field's slices (the row-major blocks of
    ``u``); it defaults to ``t_slices`` itself.  Each slice's row holds the
    trapezoid weights of ``x_grid`` in that slice's block.
    """
    if kind not in KINDS:
        raise InvalidArgumentError(f"unknown PDE kind {kind!r}")
    x_grid = np.asarray(x_grid, dtype=float)
    w = trapezoid_weights(x_grid)
    if t_grid is None:
        t_grid = t_slices
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    times, idx = _slice_indices(t_slices, t_grid)
    nx = x_grid.size
    A = np.zeros((idx.size, t_grid.size * nx))
    for r, k in enumerate(idx):
        A[r, k * nx:(k + 1) * nx] = w
    b = np.array([conserved_mass(kind, params, t, x_max=x_grid[-1]) for t in times])
    return LinearEquality(A, b)


def conservation_nonlinear_pme(m, x_grid, t_grid, t_slices=None, anchor=None, dirichlet=False):
    """Integral-form mass balance for the porous medium equation.

    For each constrained slice ``t_s``::

        h_s(u) = M(u(t_s)) - M(u_ref) - int_{t_ref}^{t_s} [u^m u_x]_{x_0}^{x_N} dt

    with trapezoid quadrature in space and time and one-sided 3-point
    boundary derivatives.  The reference is ``anchor = (t_a, u_a)`` (a known
    slice before ``t_grid[0]``) when given, otherwise slice 0 of ``u``.
    Negative boundary values are clamped to 0 before the power; the number of
    clamped evaluations is kept in ``diagnostics['clamps']``.

    With ``dirichlet`` the known boundary values u(t, x_0) = (m t)^{1/m} and
    u(t, x_N) = (m max(t - x_N, 0))^{1/m} are appended as extra rows for
    every constrained slice.
    """
    m = float(m)
    if not m > 0:
        raise InvalidArgumentError("pme needs m > 0")
    x = np.asarray(x_grid, dtype=float)
    tg = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if x.size < 3:
        raise InvalidArgumentError("need at least 3 spatial nodes")
    wx = trapezoid_weights(x)
    nx, nt = x.size, tg.size
    n = nx * nt
    dx_l = x[1] - x[0]
    dx_r = x[-1] - x[-2]
    cl = np.array([-3.0, 4.0, -1.0]) / (2.0 * dx_l)
    cr = np.array([1.0, -4.0, 3.0]) / (2.0 * dx_r)

    if anchor is not None:
        t_a, u_a = anchor
        u_a = np.asarray(u_a, dtype=float).reshape(-1)
        if u_a.size != nx:
            raise InvalidArgumentError("anchor slice has the wrong length")
        if not t_a < tg[0]:
            raise InvalidArgumentError("anchor time must precede the field's time grid")
        if t_slices is None:
            t_slices = tg
    else:
        if t_slices is None:
            t_slices = tg[1:]
    _, idx = _slice_indices(t_slices, tg)
    if anchor is None and np.any(idx == 0):
        raise ConstraintError("without an anchor slice 0 is the reference and cannot be constrained")
    if nt < 2 and anchor is None:
        raise ConstraintError("need at least two time slices without an anchor")

    # Time nodes for the flux integral: optional anchor first.
    t_nodes = np.concatenate([[anchor[0]], tg]) if anchor is not None else tg
    off = 1 if anchor is not None else 0
    n_nodes = t_nodes.size
    # C[r, j]: trapezoid weight of flux node j in row r (ref -> slice).
    C = np.zeros((idx.size, n_nodes))
    for r, k in enumerate(idx):
        end = k + off
        wt = trapezoid_weights(t_nodes[:end + 1])
        C[r, :end + 1] = wt
    diagnostics = {"clamps": 0}

    def power(v):
        if v < 0:
            diagnostics["clamps"] += 1
            return 0.0, 0.0, 0.0
        g = v ** m
        g1 = m * v ** (m - 1.0) if v > 0 or m >= 1 else 0.0
        g2 = m * (m - 1.0) * v ** (m - 2.0) if v > 0 or m >= 2 else 0.0
        return g, g1, g2

    def flux(s):
        """Net boundary flux of slice ``s`` and its derivatives."""
        gl, gl1, gl2 = power(s[0])
        gr, gr1, gr2 = power(s[-1])
        dl = cl @ s[:3]
        dr = cr @ s[-3:]
        return gr * dr - gl * dl, (gl, gl1, gl2, dl), (gr, gr1, gr2, dr)

    if anchor is not None:
        mass_ref = float(wx @ u_a)
        flux_a = flux(u_a)[0]
    n_rows = idx.size * (3 if dirichlet else 1)

    def h(u):
        U = np.asarray(u, dtype=float).reshape(nt, nx)
        F = np.empty(n_nodes)
        if anchor is not None:
            F[0] = flux_a
        for k in range(nt):
            F[k + off] = flux(U[k])[0]
        ref = mass_ref if anchor is not None else float(wx @ U[0])
        out = U[idx] @ wx - ref - C @ F
        if dirichlet:
            lb = U[idx, 0] - (m * tg[idx]) ** (1.0 / m)
            rb = U[idx, -1] - (m * np.maximum(tg[idx] - x[-1], 0.0)) ** (1.0 / m)
            out = np.concatenate([out, lb, rb])
        return out

    def jac_h(u):
        U = np.asarray(u, dtype=float).reshape(nt, nx)
        J = np.zeros((n_rows, n))
        for r, k in enumerate(idx):
            J[r, k * nx:(k + 1) * nx] += wx
            if anchor is None:
                J[r, 0:nx] -= wx
        for k in range(nt):
            _, (gl, gl1, _, dl), (gr, gr1, _, dr) = flux(U[k])
            dF = np.zeros(nx)
            dF[-3:] += gr * cr
            dF[-1] += gr1 * dr
            dF[:3] -= gl * cl
            dF[0] -= gl1 * dl
            J[:idx.size, k * nx:(k + 1) * nx] -= np.outer(C[:, k + off], dF)
        if dirichlet:
            q0 = idx.size
            for r, k in enumerate(idx):
                J[q0 + r, k * nx] = 1.0
                J[2 * q0 + r, k * nx + nx - 1] = 1.0
        return J

    def hess_lag(u, lam):
        U = np.asarray(u, dtype=float).reshape(nt, nx)
        lam = np.asarray(lam, dtype=float)[:idx.size]
        wk = -(lam @ C)
        H = np.zeros((n, n))
        for k in range(nt):
            c = wk[k + off]
            if c == 0.0:
                continue
            _, (gl, gl1, gl2, dl), (gr, gr1, gr2, dr) = flux(U[k])
            base = k * nx
            # Right boundary: g(u_N) * (cr . u[-3:])
            iN = base + nx - 1
            cols = base + nx - 3 + np.arange(3)
            H[iN, iN] += c * gr2 * dr
            H[iN, cols] += c * gr1 * cr
            H[cols, iN] += c * gr1 * cr
            # Left boundary enters with a minus sign.
            cols = base + np.arange(3)
            H[base, base] -= c * gl2 * dl
            H[base, cols] -= c * gl1 * cl
            H[cols, base] -= c * gl1 * cl
        return H

    return NonlinearEquality(
        q=n_rows, n=n, h=h, jac_h=jac_h, hess_lag=hess_lag, name="pme_mass", diagnostics=diagnostics
    )


def tv_value(u):
    """Sum over time slices of the absolute spatial jumps."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.ndim != 2:
        raise InvalidArgumentError("TV expects an nt x nx grid")
    return float(np.sum(np.abs(np.diff(u, axis=1))))


def tv_subgradient(u):
    """Subgradient of :func:`tv_value`, using sign(0) = 0 at ties."""
    arr = np.asarray(u, dtype=float)
    u2 = np.atleast_2d(arr)
    if u2.ndim != 2:
        raise InvalidArgumentError("TV expects an nt x nx grid")
    s = np.sign(np.diff(u2, axis=1))
    g = np.zeros_like(u2)
    g[:, 1:] += s
    g[:, :-1] -= s
    return g.reshape(arr.shape)


def load_summation_matrix(path, header=False):
    """Read a 0/1 summation matrix from CSV (optionally skipping a header row)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    if header and rows:
        rows = rows[1:]
    if not rows:
        raise ConstraintError(f"{path}: empty summation matrix")
    width = len(rows[0])
    out = []
    for i, r in enumerate(rows):
        if len(r) != width:
            raise ConstraintError(f"{path}: row {i} has {len(r)} entries, expected {width}")
        vals = []
        for c in r:
            c = c.strip()
            if c not in ("0", "1"):
                raise ConstraintError(f"{path}: non-binary entry {c!r} in row {i}")
            vals.append(int(c))
        out.append(vals)
    return np.array(out, dtype=float)
