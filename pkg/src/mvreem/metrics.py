"""Evaluation statistics for simulation studies.

Squared-error measures sum over responses but divide only by the number
of test rows (test times x objects), so values are comparable across
methods regardless of J.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tree import MultivariateTree, structure_equal


@dataclass
class EvaluationReport:
    method: str
    pmse: float
    emse_fixed: float
    re_pmse: Optional[float] = None
    sigma12_emse: Optional[float] = None
    recovered: Optional[bool] = None
    replication: int = 0
    scenario: dict = field(default_factory=dict)


def _paired(pred, actual, n_objects: int):
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    n = pred.shape[0]
    if n_objects < 1 or n % n_objects:
        raise ValueError(f"{n} rows do not split evenly over {n_objects} objects")
    return pred, actual, n // n_objects


def pmse(predictions, actual, n_objects: int) -> float:
    """Object-level predicted MSE: sum of squared errors over rows and
    responses divided by (test rows per object x objects)."""
    pred, act, t_test = _paired(predictions, actual, n_objects)
    return float(((pred - act) ** 2).sum() / (t_test * n_objects))


def emse_fixed(fixed_predictions, true_fixed, n_objects: int) -> float:
    """Estimation MSE of the population-level part against the known
    truth, with the same divisor convention as :func:`pmse`."""
    pred, act, t_test = _paired(fixed_predictions, true_fixed, n_objects)
    return float(((pred - act) ** 2).sum() / (t_test * n_objects))


def re_pmse(b_hat: dict, b_true: dict) -> float:
    """Mean squared error of predicted random-effect matrices, averaged
    over objects and matrix entries."""
    if set(b_hat) != set(b_true):
        raise ValueError("random-effect predictions and truth list different objects")
    total = 0.0
    count = 0
    for oid in b_true:
        diff = np.asarray(b_hat[oid], dtype=float) - np.asarray(b_true[oid], dtype=float)
        total += float((diff * diff).sum())
        count += diff.size
    return total / count


def sigma12_emse(d_hat, sigma12_true: float, q: int = 1) -> float:
    """Squared error of the first cross-response covariance entry of D
    for a single replication; requires q = 1 so D is J x J."""
    if q != 1:
        raise ValueError("sigma12 is defined for q = 1 designs only")
    D = np.asarray(d_hat, dtype=float)
    if D.shape[0] < 2:
        raise ValueError("sigma12 requires at least 2 responses")
    return float((D[0, 1] - sigma12_true) ** 2)


def recovery_rate(fitted_trees, truth: MultivariateTree) -> float:
    """Fraction of fitted trees matching the truth's shape and split
    variables."""
    trees = list(fitted_trees)
    if not trees:
        raise ValueError("recovery_rate needs at least one fitted tree")
    return sum(structure_equal(t, truth) for t in trees) / len(trees)
