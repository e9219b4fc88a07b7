"""Desk-scale probabilistic base model and end-to-end trainer.

The base model maps a scalar PDE parameter to a diagonal Gaussian over the
evaluation window: ``mu = W psi``, ``sigma = softplus(V psi)`` with
polynomial features ``psi`` of the parameter rescaled to [-1, 1].  Training
backpropagates the closed-form CRPS (or NLL) through the projection layer.

Gradient conventions:

* linear projectors are differentiated exactly in the mean; only marginal
  variances of P Sigma P^T enter the loss;
* with the inverse-variance Q, Q's own dependence on the weights is not
  differentiated (Q is held fixed within a step);
* nonlinear projectors use the curvature-free Jacobian at the converged
  point, held fixed with respect to the weights.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from . import constraints as cons
from .dppl import BatchProjector, ProjectionConfig, project_nonlinear, propagate_linear, propagate_nonlinear
from .errors import DivergenceError, InvalidArgumentError, ProjectionFailure
from .metrics import evaluate
from .probdist import GaussianVec, crps_gaussian, crps_gaussian_grad_arrays, make_rng

LOSSES = ("crps", "nll")
PROJECTOR_MODES = ("none", "orthogonal", "oblique", "nonlinear")


def softplus(a):
    return np.logaddexp(0.0, a)


def softplus_inv(s):
    s = np.asarray(s, dtype=float)
    return s + np.log(-np.expm1(-s))


@dataclass(eq=False)
class AffineBaseModel:
    """Polynomial-feature Gaussian predictor.

    Attributes:
        W: (n, degree+1) mean weights.
        V: (n, degree+1) pre-softplus scale weights.
        center, half_width: the parameter is mapped to
            ``(phi - center) / half_width`` before taking powers.
    """

    W: np.ndarray
    V: np.ndarray
    center: float = 0.0
    half_width: float = 1.0

    def __post_init__(self):
        self.W = np.array(self.W, dtype=float)
        self.V = np.array(self.V, dtype=float)
        if self.W.ndim != 2 or self.W.shape != self.V.shape:
            raise InvalidArgumentError("W and V must be matrices of the same shape")
        if not self.half_width > 0:
            raise InvalidArgumentError("half_width must be positive")

    @classmethod
    def init(cls, n, degree=3, param_range=(-1.0, 1.0), seed=0, sigma0=0.5, scale=0.01, bias=None):
        """Small random mean weights, constant scale ``sigma0``.

        ``bias`` (length n, e.g. the mean training target) is added to the
        constant feature's weights.  Nonlinear projections started near zero
        can fail to converge, so the CLI passes the target mean.
        """
        lo, hi = float(param_range[0]), float(param_range[1])
        half = 0.5 * (hi - lo) if hi > lo else 1.0
        rng = make_rng(seed)
        W = scale * rng.standard_normal((int(n), int(degree) + 1))
        if bias is not None:
            W[:, 0] += np.asarray(bias, dtype=float).reshape(-1)
        V = np.zeros_like(W)
        V[:, 0] = softplus_inv(sigma0)
        return cls(W, V, 0.5 * (lo + hi), half)

    @property
    def degree(self):
        return self.W.shape[1] - 1

    @property
    def n(self):
        return self.W.shape[0]

    def features(self, phi):
        s = (np.atleast_1d(np.asarray(phi, dtype=float)) - self.center) / self.half_width
        if not np.all(np.isfinite(s)):
            raise InvalidArgumentError("parameter must be finite")
        return np.vander(s, self.degree + 1, increasing=True)

    def copy(self):
        return AffineBaseModel(self.W.copy(), self.V.copy(), self.center, self.half_width)

    def to_dict(self):
        return {
            "degree": self.degree,
            "n": self.n,
            "center": self.center,
            "half_width": self.half_width,
            "W": self.W.reshape(-1).tolist(),
            "V": self.V.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        shape = (int(d["n"]), int(d["degree"]) + 1)
        return cls(
            np.asarray(d["W"], dtype=float).reshape(shape),
            np.asarray(d["V"], dtype=float).reshape(shape),
            float(d["center"]),
            float(d["half_width"]),
        )


def predict(model, phi):
    """Base (unconstrained) Gaussian for one parameter value."""
    psi = model.features(phi)[0]
    sigma = softplus(model.V @ psi)
    return GaussianVec(model.W @ psi, sigma * sigma)


@dataclass(eq=False)
class Projector:
    """Corrector step: which constraint family to project onto.

    ``builder(phi, extra)`` returns the constraint for one item; results are
    cached per (phi, extra).
    """

    kind: str = "none"
    cfg: ProjectionConfig = field(default_factory=ProjectionConfig)
    builder: Optional[Callable] = None
    label: str = "none"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("none", "linear", "nonlinear"):
            raise InvalidArgumentError(f"unknown projector kind {self.kind!r}")
        if self.kind != "none" and self.builder is None:
            raise InvalidArgumentError("a constraint builder is required")

    @classmethod
    def linear(cls, cfg, lin, label="linear"):
        builder = lin if callable(lin) else (lambda phi, extra: lin)
        return cls("linear", cfg, builder, label)

    @classmethod
    def nonlinear(cls, cfg, nl, label="nonlinear"):
        builder = nl if callable(nl) and not isinstance(nl, cons.NonlinearEquality) else (lambda phi, extra: nl)
        return cls("nonlinear", cfg, builder, label)

    def constraint_for(self, phi, extra=None):
        if self.kind == "none":
            return None
        key = (float(phi), None if extra is None else (float(extra[0]), np.asarray(extra[1]).tobytes()))
        c = self._cache.get(key)
        if c is None:
            c = self.builder(float(phi), extra)
            self._cache[key] = c
        return c

    def describe(self):
        return {"mode": self.label, "kind": self.kind, **self.cfg.__dict__}


def pde_projector(dataset, mode, cfg=None, dirichlet=False):
    """Projector for a PDE dataset's conservation law over its eval window."""
    if mode not in PROJECTOR_MODES:
        raise InvalidArgumentError(f"projector must be one of {PROJECTOR_MODES}")
    base = cfg if cfg is not None else ProjectionConfig()
    kind, x, times = dataset.kind, dataset.x_grid, dataset.eval_times()
    if mode == "none":
        return Projector()
    if mode in ("orthogonal", "oblique"):
        q_mode = "identity" if mode == "orthogonal" else "inv_variance_diag"
        c = dataclasses.replace(base, q_mode=q_mode)
        return Projector.linear(c, lambda phi, extra: cons.conservation_linear(kind, phi, x, times), mode)
    if kind != "pme":
        raise InvalidArgumentError("the nonlinear projector is only defined for the pme dataset")

    def build(phi, extra):
        return cons.conservation_nonlinear_pme(phi, x, times, anchor=extra, dirichlet=dirichlet)

    return Projector.nonlinear(base, build, mode)


def reference_constraints(dataset, projector, phis, extras):
    """Constraints used to report CE: the projector's own, else linear mass."""
    if projector.kind != "none":
        return [projector.constraint_for(p, e) for p, e in zip(phis, extras)]
    times = dataset.eval_times()
    return [cons.conservation_linear(dataset.kind, p, dataset.x_grid, times) for p in phis]


@dataclass(eq=False)
class Batch:
    """Training/evaluation items: parameters, flattened targets, anchors."""

    phi: np.ndarray
    y: np.ndarray
    extras: list
    shape: tuple


def make_batch(dataset, idx):
    idx = np.asarray(idx, dtype=int)
    sl = dataset.eval_slices()
    k0 = int(sl[0])
    if k0 >= 1:
        extras = [(float(dataset.t_grid[k0 - 1]), dataset.fields[i, k0 - 1].copy()) for i in idx]
    else:
        extras = [None] * idx.size
    return Batch(dataset.params[idx].copy(), dataset.targets(idx), extras, (sl.size, dataset.nx))


@dataclass
class TrainConfig:
    loss: str = "crps"
    projector: Projector = field(default_factory=Projector)
    tv_weight: float = 0.0
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 300
    full_batch: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise InvalidArgumentError(f"loss must be one of {LOSSES}")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be positive")
        if int(self.epochs) < 0:
            raise InvalidArgumentError("epochs must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError("momentum must lie in [0, 1)")
        if not self.tv_weight >= 0:
            raise InvalidArgumentError("tv_weight must be >= 0")
        if not self.full_batch:
            raise InvalidArgumentError("only full-batch training is supported")

    def to_dict(self):
        return {
            "loss": self.loss,
            "projector": self.projector.describe(),
            "tv_weight": self.tv_weight,
            "lr": self.lr,
            "momentum": self.momentum,
            "epochs": int(self.epochs),
            "full_batch": self.full_batch,
            "seed": int(self.seed),
        }


@dataclass
class TrainReport:
    losses: list
    epoch_seconds: list
    test: dict
    seed: int
    config: dict
    sampling_seconds: Optional[float] = None
    notes: list = field(default_factory=list)
    newton_max_iterations: int = 0

    def to_dict(self):
        return {
            "losses": [float(v) for v in self.losses],
            "epoch_seconds": [float(v) for v in self.epoch_seconds],
            "sampling_seconds": self.sampling_seconds,
            "test": self.test,
            "seed": int(self.seed),
            "config": self.config,
            "notes": list(self.notes),
            "newton_max_iterations": int(self.newton_max_iterations),
        }


def _forward(model, batch, projector, q_from=None):
    """Batched prediction plus projection; returns the intermediates."""
    psi = model.features(batch.phi)
    mu = psi @ model.W.T
    a = psi @ model.V.T
    sigma = softplus(a)
    d = sigma * sigma
    out = {"psi": psi, "mu": mu, "a": a, "sigma": sigma, "d": d, "bp": None, "newton": 0}
    if projector.kind == "none":
        out["mu_hat"], out["s"] = mu, d
        return out
    B = mu.shape[0]
    if projector.cfg.q_mode == "identity":
        qinv = np.ones_like(d)
    else:
        if q_from is None:
            qinv = d
        else:
            sq = softplus(q_from.features(batch.phi) @ q_from.V.T)
            qinv = sq * sq
    items = [projector.constraint_for(batch.phi[i], batch.extras[i]) for i in range(B)]
    if projector.kind == "linear":
        A = np.stack([c.A for c in items])
        b = np.stack([c.b for c in items])
        bp = BatchProjector(qinv, A)
        mu_hat = bp.apply(mu, b)
    else:
        mu_hat = np.empty_like(mu)
        Js = []
        for i, nl in enumerate(items):
            Q = None if projector.cfg.q_mode == "identity" else 1.0 / qinv[i]
            try:
                u, tr = project_nonlinear(mu[i], Q, nl, projector.cfg)
            except Exception as exc:
                raise ProjectionFailure(i, exc) from exc
            out["newton"] = max(out["newton"], tr.iterations)
            mu_hat[i] = u
            Js.append(np.asarray(nl.jac_h(u), dtype=float))
        bp = BatchProjector(qinv, np.stack(Js))
    out["bp"], out["mu_hat"], out["s"], out["items"] = bp, mu_hat, bp.marginals(d), items
    return out


def _tv_terms(mu_hat, shape):
    B = mu_hat.shape[0]
    grids = mu_hat.reshape(B, *shape)
    diffs = np.diff(grids, axis=2)
    val = np.sum(np.abs(diffs), axis=(1, 2))
    s = np.sign(diffs)
    g = np.zeros_like(grids)
    g[:, :, 1:] += s
    g[:, :, :-1] -= s
    return val, g.reshape(B, -1)


def _pointwise_loss(loss, mu_hat, s, y):
    """Per-item loss and its gradients w.r.t. mu_hat and marginal variance s."""
    if loss == "crps":
        sig = np.sqrt(s)
        val = np.sum(crps_gaussian(mu_hat, sig, y), axis=1)
        d_mu, d_sig = crps_gaussian_grad_arrays(mu_hat, sig, y)
        return val, d_mu, d_sig / (2.0 * sig)
    if np.any(s <= 0):
        raise InvalidArgumentError("NLL needs strictly positive variances")
    r = y - mu_hat
    val = np.sum(0.5 * np.log(2.0 * math.pi * s) + r * r / (2.0 * s), axis=1)
    return val, -r / s, 0.5 / s - 0.5 * r * r / (s * s)


def _backprop(model, fw, g_mu_hat, g_s):
    bp = fw["bp"]
    if bp is None:
        g_mu, g_d = g_mu_hat, g_s
    else:
        g_mu, g_d = bp.adjoint_mean(g_mu_hat), bp.adjoint_var(g_s)
    g_a = g_d * 2.0 * fw["sigma"] * expit(fw["a"])
    return g_mu.T @ fw["psi"], g_a.T @ fw["psi"]


def loss_and_grad(model, batch, config, q_from=None):
    """Mean over items of the summed loss (plus TV), and its weight gradients.

    Args:
        q_from: model whose variances define the inverse-variance Q.  By
            default the model itself, with Q held fixed in the gradient;
            passing a fixed model makes the returned gradient exact for a
            loss whose Q does not move.
    """
    fw = _forward(model, batch, config.projector, q_from)
    B = batch.phi.size
    val, g_mu_hat, g_s = _pointwise_loss(config.loss, fw["mu_hat"], fw["s"], batch.y)
    if config.tv_weight > 0:
        tv, g_tv = _tv_terms(fw["mu_hat"], batch.shape)
        val = val + config.tv_weight * tv
        g_mu_hat = g_mu_hat + config.tv_weight * g_tv
    gW, gV = _backprop(model, fw, g_mu_hat / B, g_s / B)
    return float(np.mean(val)), gW, gV


def _mc_item_grad(y_hat, y):
    """MC-CRPS value and gradient w.r.t. the (m, n) projected draws."""
    m = y_hat.shape[0]
    diff = y_hat - y
    if m == 1:
        return float(np.sum(np.abs(diff))), np.sign(diff)
    order = np.argsort(y_hat, axis=0, kind="stable")
    s = np.take_along_axis(y_hat, order, axis=0)
    idx = np.arange(m, dtype=float)[:, None]
    pair = np.sum(s * (2.0 * idx - m + 1.0), axis=0) / (m * (m - 1.0))
    val = float(np.sum(np.abs(diff).mean(axis=0) - pair))
    rank = np.empty_like(y_hat)
    np.put_along_axis(rank, order, np.broadcast_to(idx, y_hat.shape), axis=0)
    g = np.sign(diff) / m - (2.0 * rank - m + 1.0) / (m * (m - 1.0))
    return val, g


def mc_loss_and_grad(model, batch, config, mc_samples=100, seed=0):
    """Sampling-based CRPS: project reparameterized draws, pathwise gradient.

    Draws are projected with the same layer as the closed-form path; the
    gradient flows through the projector held fixed (exact for linear
    constraints, frozen Jacobian for nonlinear ones).
    """
    m = int(mc_samples)
    if m < 1:
        raise InvalidArgumentError("mc_samples must be >= 1")
    proj = config.projector
    fw = _forward(model, batch, proj)
    B, n = fw["mu"].shape
    bp = fw["bp"]
    g_mu = np.zeros((B, n))
    g_sig = np.zeros((B, n))
    total = 0.0
    for i in range(B):
        xi = make_rng(seed, i).standard_normal((m, n))
        z = fw["mu"][i] + fw["sigma"][i] * xi
        if bp is None:
            y_hat = z
        elif proj.kind == "linear":
            A, Ui = bp.A[i], bp.U[i]
            y_hat = z - (z @ A.T - fw["items"][i].b) @ Ui.T
        else:
            Q = None if proj.cfg.q_mode == "identity" else 1.0 / bp.qinv[i]
            y_hat = np.stack([project_nonlinear(r, Q, fw["items"][i], proj.cfg)[0] for r in z])
        val, g = _mc_item_grad(y_hat, batch.y[i])
        if bp is not None:
            g = g - (g @ bp.U[i]) @ bp.A[i]
        total += val
        g_mu[i] = g.sum(axis=0)
        g_sig[i] = np.sum(g * xi, axis=0)
    if config.tv_weight > 0:
        tv, g_tv = _tv_terms(fw["mu_hat"], batch.shape)
        total += config.tv_weight * float(np.sum(tv))
        g_mu += config.tv_weight * (g_tv if bp is None else bp.adjoint_mean(g_tv))
    g_a = g_sig * expit(fw["a"])
    psi = fw["psi"]
    return total / B, (g_mu / B).T @ psi, (g_a / B).T @ psi


def forward_constrained(model, phi, projector, extra=None):
    """Predict, then propagate through the projector (full covariance)."""
    dist = predict(model, phi)
    if projector is None or projector.kind == "none":
        return dist
    c = projector.constraint_for(phi, extra)
    Q = projector.cfg.q_for(dist)
    if projector.kind == "linear":
        return propagate_linear(dist, Q, c)
    return propagate_nonlinear(dist, Q, c, projector.cfg)


def predict_batch(model, dataset, idx, projector):
    """Projected means and marginal variances for dataset items."""
    batch = make_batch(dataset, idx)
    fw = _forward(model, batch, projector)
    return batch, fw["mu_hat"], fw["s"]


def evaluate_model(model, dataset, projector, idx=None):
    idx = dataset.test_idx if idx is None else np.asarray(idx)
    if len(idx) == 0:
        raise InvalidArgumentError("empty test split")
    batch, mu_hat, s = predict_batch(model, dataset, idx, projector)
    refs = reference_constraints(dataset, projector, batch.phi, batch.extras)
    return evaluate((mu_hat, s), batch.y, refs)


def train(model, dataset, config):
    """Full-batch gradient descent with momentum on the training split."""
    if len(dataset.train_idx) == 0:
        raise InvalidArgumentError("dataset has no training split")
    model = model.copy()
    batch = make_batch(dataset, dataset.train_idx)
    vW = np.zeros_like(model.W)
    vV = np.zeros_like(model.V)
    losses, times = [], []
    newton = 0
    for epoch in range(int(config.epochs)):
        t0 = time.perf_counter()
        # Overflow is reported as DivergenceError below, not as a warning.
        with np.errstate(over="ignore", invalid="ignore"):
            loss, gW, gV = loss_and_grad(model, batch, config)
        if not (np.isfinite(loss) and np.all(np.isfinite(gW)) and np.all(np.isfinite(gV))):
            raise DivergenceError(epoch, loss)
        vW = config.momentum * vW - config.lr * gW
        vV = config.momentum * vV - config.lr * gV
        model.W += vW
        model.V += vV
        times.append(time.perf_counter() - t0)
        losses.append(loss)
    notes = []
    if config.projector.kind != "none" and config.projector.cfg.q_mode == "inv_variance_diag":
        notes.append("inverse-variance Q held fixed in the gradient")
    if config.projector.kind == "nonlinear":
        notes.append("nonlinear projection differentiated with a frozen curvature-free Jacobian")
    tail = losses[-max(1, len(losses) // 10):] if losses else []
    if len(tail) > 1 and np.any(np.diff(tail) > 1e-12 * max(1.0, abs(tail[0]))):
        notes.append("train loss increased within the last 10% of epochs")
    test = evaluate_model(model, dataset, config.projector).to_dict() if len(dataset.test_idx) else {}
    if config.projector.kind == "nonlinear":
        newton = _forward(model, batch, config.projector)["newton"]
    report = TrainReport(
        losses=losses,
        epoch_seconds=times,
        test=test,
        seed=int(config.seed),
        config=config.to_dict(),
        notes=notes,
        newton_max_iterations=newton,
    )
    return model, report


def train_timing_compare(model, dataset, config, mc_samples=100, repeats=3, seed=0):
    """Seconds per epoch: closed-form CRPS vs MC-CRPS over projected draws.

    Each epoch is one full-batch loss/gradient evaluation plus the update;
    the fastest of ``repeats`` runs is reported for each path.
    """
    if len(dataset.train_idx) == 0:
        raise InvalidArgumentError("dataset is empty")
    batch = make_batch(dataset, dataset.train_idx)

    def run(fn):
        best = math.inf
        for r in range(int(repeats)):
            m = model.copy()
            t0 = time.perf_counter()
            loss, gW, gV = fn(m, r)
            m.W -= config.lr * gW
            m.V -= config.lr * gV
            best = min(best, time.perf_counter() - t0)
            if not np.isfinite(loss):
                raise DivergenceError(0, loss)
        return best

    closed = run(lambda m, r: loss_and_grad(m, batch, config))
    sampled = run(lambda m, r: mc_loss_and_grad(m, batch, config, mc_samples, seed + r))
    return closed, sampled
