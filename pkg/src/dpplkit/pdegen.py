"""Closed-form solutions of the benchmark PDE families and dataset generation.

All fields come from exact solutions; there is no numerical PDE solver here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConvergenceError, InvalidArgumentError
from .probdist import PRNG_NAME, make_rng

DEFAULT_RANGES = {
    "heat": (1.0, 5.0),
    "pme": (2.0, 3.0),
    "stefan": (0.6, 0.65),
    "advection": (1.0, 2.0),
}
# Spatial domain per family.
X_DOMAIN = {"heat": (0.0, 2.0 * math.pi), "pme": (0.0, 1.0), "stefan": (0.0, 1.0), "advection": (0.0, 1.0)}
# Time horizons keep the Stefan and advection fronts inside [0, 1].
T_MAX = {"heat": 1.0, "pme": 1.0, "stefan": 0.8, "advection": 0.25}
EVAL_FRACTION = 0.2

_DOMAIN_EPS = 1e-12


def _domain_check(name, v, lo, hi):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)) or np.any(v < lo - _DOMAIN_EPS) or np.any(v > hi + _DOMAIN_EPS):
        raise InvalidArgumentError(f"{name} outside [{lo}, {hi}]")
    return v


def exact_heat(t, x, k):
    """``exp(-k t) sin x`` on t in [0, 1], x in [0, 2 pi]."""
    if not k > 0:
        raise InvalidArgumentError("heat needs k > 0")
    t = _domain_check("t", t, 0.0, 1.0)
    x = _domain_check("x", x, 0.0, 2.0 * math.pi)
    out = np.exp(-k * t) * np.sin(x)
    # sin(2 pi) is not exactly 0 in floating point; pin the periodic endpoints.
    out = np.where((x == 0.0) | (x == 2.0 * math.pi), 0.0, out)
    return out if out.ndim else float(out)


def exact_pme(t, x, m):
    """``(m * relu(t - x))^(1/m)``; zero ahead of the front x = t."""
    if not m > 0:
        raise InvalidArgumentError("pme needs m > 0")
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    out = (m * np.maximum(t - x, 0.0)) ** (1.0 / m)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class StefanAlpha:
    alpha_tilde: float
    alpha: float
    residual: float


def _stefan_eq(a, u_star):
    return u_star * erf(a) * a * math.exp(a * a) - (1.0 - u_star) / math.sqrt(math.pi)


def solve_stefan_alpha(u_star, lo=1e-8, hi=4.0, tol=1e-12):
    """Root of ``(1-u*)/sqrt(pi) = u* erf(a) a exp(a^2)`` by bisection + secant."""
    u_star = float(u_star)
    if not 0.0 < u_star < 1.0:
        raise InvalidArgumentError("u_star must lie in (0, 1)")
    flo, fhi = _stefan_eq(lo, u_star), _stefan_eq(hi, u_star)
    if flo * fhi > 0:
        raise ConvergenceError(f"no sign change on [{lo}, {hi}] for u_star={u_star}")
    a, b = lo, hi
    for _ in range(200):
        mid = 0.5 * (a + b)
        fm = _stefan_eq(mid, u_star)
        if (fm < 0) == (flo < 0):
            a, flo = mid, fm
        else:
            b = mid
        if b - a < 1e-10:
            break
    # Secant polish from the bracket ends.
    x0, x1 = a, b
    f0, f1 = _stefan_eq(x0, u_star), _stefan_eq(x1, u_star)
    for _ in range(50):
        if abs(f1) <= tol or f1 == f0:
            break
        x0, x1 = x1, x1 - f1 * (x1 - x0) / (f1 - f0)
        f0, f1 = f1, _stefan_eq(x1, u_star)
    if abs(f1) > tol:
        raise ConvergenceError(f"stefan root residual {abs(f1):.2e} above {tol}")
    return StefanAlpha(alpha_tilde=float(x1), alpha=float(2.0 * x1), residual=float(abs(f1)))


def exact_stefan(t, x, u_star):
    """Similarity solution, zero beyond the front ``x = alpha sqrt(t)``.

    At t = 0 the initial condition is returned (1 at x = 0, else 0).
    """
    alpha = solve_stefan_alpha(u_star).alpha
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    t, x = np.broadcast_arrays(t, x)
    pos = t > 0
    st = np.sqrt(np.where(pos, t, 1.0))
    inner = 1.0 - (1.0 - u_star) / erf(alpha / 2.0) * erf(x / (2.0 * st))
    out = np.where(x <= alpha * st, inner, 0.0)
    out = np.where(pos, out, np.where(x == 0.0, 1.0, 0.0))
    return out if out.ndim else float(out)


def exact_advection(t, x, beta):
    """Step ``1{x <= 0.5 + beta t}`` carried at speed beta."""
    if not beta > 0:
        raise InvalidArgumentError("advection needs beta > 0")
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    out = np.where(x <= 0.5 + beta * t, 1.0, 0.0)
    return out if out.ndim else float(out)


def exact_solution(kind, t, x, param):
    if kind == "heat":
        return exact_heat(t, x, param)
    if kind == "pme":
        return exact_pme(t, x, param)
    if kind == "stefan":
        return exact_stefan(t, x, param)
    if kind == "advection":
        return exact_advection(t, x, param)
    raise InvalidArgumentError(f"unknown PDE kind {kind!r}")


@dataclass(eq=False)
class PdeDataset:
    """Parameter/solution pairs on a uniform (t, x) grid.

    ``fields`` has shape (n_samples, nt, nx).
    """

    kind: str
    params: np.ndarray
    x_grid: np.ndarray
    t_grid: np.ndarray
    fields: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int
    prng: str = PRNG_NAME
    param_range: tuple = field(default=(0.0, 0.0))

    @property
    def nt(self):
        return self.t_grid.size

    @property
    def nx(self):
        return self.x_grid.size

    def eval_slices(self, fraction=EVAL_FRACTION):
        """Indices of the last ``round(fraction * nt)`` time slices."""
        k = max(1, int(round(fraction * self.nt)))
        return np.arange(self.nt - k, self.nt)

    def eval_times(self, fraction=EVAL_FRACTION):
        return self.t_grid[self.eval_slices(fraction)]

    def targets(self, idx=None, fraction=EVAL_FRACTION):
        """Flattened evaluation-window fields, shape (len(idx), nt_eval * nx)."""
        idx = np.arange(self.params.size) if idx is None else np.asarray(idx)
        sl = self.eval_slices(fraction)
        return self.fields[idx][:, sl, :].reshape(len(idx), -1)


def gen_dataset(kind, n_samples=200, param_range=None, nt=64, nx=64, split=0.8, seed=0):
    """Sample parameters uniformly and tabulate exact solutions.

    Sample ``i`` draws its parameter from the stream (seed, 0, i) and the
    train/test permutation comes from stream (seed, 1), so the result does not
    depend on generation order.
    """
    if kind not in DEFAULT_RANGES:
        raise InvalidArgumentError(f"unknown PDE kind {kind!r}")
    lo, hi = DEFAULT_RANGES[kind] if param_range is None else (float(param_range[0]), float(param_range[1]))
    if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
        raise InvalidArgumentError(f"invalid parameter range ({lo}, {hi})")
    if kind == "stefan" and not (0.0 < lo and hi < 1.0):
        raise InvalidArgumentError("stefan range must lie inside (0, 1)")
    if kind != "stefan" and lo <= 0:
        raise InvalidArgumentError(f"{kind} parameter must be positive")
    n_samples, nt, nx = int(n_samples), int(nt), int(nx)
    if n_samples < 1 or nt < 2 or nx < 3:
        raise InvalidArgumentError("need n_samples >= 1, nt >= 2, nx >= 3")
    if not 0.0 < split < 1.0:
        raise InvalidArgumentError("split must lie in (0, 1)")

    x_grid = np.linspace(*X_DOMAIN[kind], nx)
    t_grid = np.linspace(0.0, T_MAX[kind], nt)
    params = np.array([make_rng(seed, 0, i).uniform(lo, hi) for i in range(n_samples)])
    tt, xx = np.meshgrid(t_grid, x_grid, indexing="ij")
    fields = np.stack([exact_solution(kind, tt, xx, p) for p in params])
    perm = make_rng(seed, 1).permutation(n_samples)
    n_train = int(round(split * n_samples))
    return PdeDataset(
        kind=kind,
        params=params,
        x_grid=x_grid,
        t_grid=t_grid,
        fields=fields,
        train_idx=np.sort(perm[:n_train]),
        test_idx=np.sort(perm[n_train:]),
        seed=int(seed),
        param_range=(lo, hi),
    )
