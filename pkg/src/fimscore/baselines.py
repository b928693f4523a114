"""Reference detectors the gradient method is compared against.

The likelihood baseline scores a batch by its negative mean
log-likelihood. It is cheap and standard, but not invariant under
reparameterization of the data: an invertible change of representation
shifts every log-likelihood by the log-determinant of the map, so the
ranking between two datasets can flip under a change of units.

The typicality baseline compares the batch's mean log-likelihood to an
entropy estimate taken on held-out fit data: score = |mean_ll - H_hat|,
with H_hat the per-sample mean log-likelihood of the fit split. Batches
can be anomalous by being either too unlikely or too likely.
"""

from __future__ import annotations

import numpy as np

from .errors import InsufficientDataError


def likelihood_score(model, batch: np.ndarray) -> float:
    """Negative mean log-likelihood of the batch (higher = more anomalous)."""
    return float(-np.mean(model.log_likelihood_batch(batch)))


def fit_typicality(model, fit_rows: np.ndarray) -> float:
    """Entropy estimate H_hat: mean per-sample log-likelihood on fit rows."""
    fit_rows = np.asarray(fit_rows, dtype=np.float64)
    if fit_rows.ndim != 2 or fit_rows.shape[0] < 1:
        raise InsufficientDataError(
            f"typicality needs at least one fit row, got shape {fit_rows.shape}"
        )
    return float(np.mean(model.log_likelihood_batch(fit_rows)))


def typicality_score(model, h_hat: float, batch: np.ndarray) -> float:
    """Absolute deviation of the batch mean log-likelihood from H_hat."""
    return float(abs(np.mean(model.log_likelihood_batch(batch)) - h_hat))
