"""Evaluation metrics: MSE, constraint error and CRPS."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError
from .probdist import GaussianVec, crps_gaussian


@dataclass
class EvalReport:
    mse: float
    ce_mean: float
    crps: float
    n: int
    ce_samples: Optional[float] = None
    per_sample: dict = field(default_factory=dict)
    ce_inf: float = 0.0

    def to_dict(self):
        out = {
            "mse": self.mse,
            "ce_mean": self.ce_mean,
            "ce_inf": self.ce_inf,
            "crps": self.crps,
            "n": self.n,
            "ce_samples": self.ce_samples,
        }
        out["per_sample"] = {k: [float(v) for v in vals] for k, vals in self.per_sample.items()}
        return out


def mse(pred, truth):
    """Mean of squared differences over all entries."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise InvalidArgumentError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise InvalidArgumentError("empty input")
    d = pred - truth
    return float(np.sum(d * d) / d.size)


def constraint_error(pred, constraint):
    """Squared Euclidean norm of the constraint residual, ``||h(u)||_2^2``."""
    u = np.asarray(pred, dtype=float).reshape(-1)
    n = constraint.n
    if u.size != n:
        raise InvalidArgumentError(f"prediction has length {u.size}, constraint expects {n}")
    r = np.asarray(constraint.h(u), dtype=float)
    return float(r @ r)


def _constraint_inf(pred, constraint):
    r = np.asarray(constraint.h(np.asarray(pred, dtype=float).reshape(-1)), dtype=float)
    return float(np.max(np.abs(r))) if r.size else 0.0


def _unpack(outputs):
    if isinstance(outputs, GaussianVec):
        outputs = [outputs]
    if isinstance(outputs, (list, tuple)) and outputs and isinstance(outputs[0], GaussianVec):
        means = np.stack([d.mean for d in outputs])
        var = np.stack([d.variances for d in outputs])
        return means, var
    means, var = outputs
    return np.atleast_2d(np.asarray(means, dtype=float)), np.atleast_2d(np.asarray(var, dtype=float))


def evaluate(outputs, truth, constraints=None, samples=None):
    """Aggregate metrics over a set of predictions.

    Args:
        outputs: list of GaussianVec, or a (means, variances) pair of (B, n)
            arrays (marginals only).
        truth: (B, n) targets.
        constraints: one constraint shared by all items, a list with one per
            item, or None (CE reported as 0).
        samples: optional (B, m, n) projected samples; their mean CE is
            reported as ``ce_samples``.
    """
    means, var = _unpack(outputs)
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if means.shape[0] == 0:
        raise InvalidArgumentError("nothing to evaluate")
    if means.shape != truth.shape or var.shape != truth.shape:
        raise InvalidArgumentError("predictions and truth must have the same shape")
    B = means.shape[0]
    if constraints is None:
        cons = [None] * B
    elif isinstance(constraints, (list, tuple)):
        if len(constraints) != B:
            raise InvalidArgumentError("need one constraint per item")
        cons = list(constraints)
    else:
        cons = [constraints] * B
    mse_i = np.array([mse(means[i], truth[i]) for i in range(B)])
    ce_i = np.array([0.0 if cons[i] is None else constraint_error(means[i], cons[i]) for i in range(B)])
    inf_i = np.array([0.0 if cons[i] is None else _constraint_inf(means[i], cons[i]) for i in range(B)])
    sd = np.sqrt(np.maximum(var, 0.0))
    crps_i = np.sum(crps_gaussian(means, sd, truth), axis=1)
    report = EvalReport(
        mse=float(np.mean(mse_i)),
        ce_mean=float(np.mean(ce_i)),
        crps=float(np.mean(crps_i)),
        n=B,
        per_sample={"mse": mse_i, "ce": ce_i, "crps": crps_i},
        ce_inf=float(np.max(inf_i)),
    )
    if samples is not None:
        samples = np.asarray(samples, dtype=float)
        ce_s = [
            np.mean([0.0 if cons[i] is None else constraint_error(row, cons[i]) for row in samples[i]])
            for i in range(B)
        ]
        report.ce_samples = float(np.mean(ce_s))
        report.per_sample["ce_samples"] = np.array(ce_s)
    return report
