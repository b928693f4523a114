"""Fisher information probes: Monte Carlo slices and score statistics.

The Fisher information matrix of a model is E[s s^T] with s the
parameter score at a model sample. Full matrices are out of reach for
real models, so probes work on slices: pick one or two layers, take a
seeded subset of at most ``max_per_layer`` weights from each, and
average outer products of the restricted score over n model draws,

    F_hat = (1/n) sum_i s_i s_i^T.

Normalizing by the diagonal turns a slice into a correlation-like
matrix whose off-diagonal mass measures how far from diagonal the true
FIM is.

For the diagonal Gaussian the score test is exact: with t_i =
(x_i - mu_i)^2 / sigma_i^2 the statistic is sum_i [t_i + (t_i - 1)^2/2]
with 2D degrees of freedom (per-coordinate information is 1/sigma_i^2
for the mean and 2 for log sigma).

``sherman_morrison_score`` evaluates s_x^T (A_0 + sum_i S_i S_i^T)^{-1}
s_x without ever forming a P x P matrix: the rank-one inverse updates
are unrolled into inner products against stored update vectors, so
memory stays O(N * P). The ``n_plus_1`` convention rescales the
quadratic form by (N + 1), matching an FIM estimate that averages the
prior together with the N outer products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, DomainError
from .models import sample
from .numcore import Rng


@dataclass
class FimSlice:
    matrix: np.ndarray
    weight_map: list
    n_samples: int


MAX_PROBE_LAYERS = 2


def select_weights(params, layer_names, rng: Rng, max_per_layer: int = 50):
    """Seeded subset of flat weight indices: min(max_per_layer, size) per
    layer, drawn without replacement, listed in ascending index order."""
    if not 1 <= len(layer_names) <= MAX_PROBE_LAYERS:
        raise DomainError(
            f"probe supports 1 to {MAX_PROBE_LAYERS} layers, got {len(layer_names)}"
        )
    if max_per_layer < 1:
        raise DomainError(f"max_per_layer must be >= 1, got {max_per_layer}")
    weight_map = []
    for name in layer_names:
        if name not in params.names:
            raise DomainError(f"model has no layer named '{name}'")
        size = params[name].size
        k = min(max_per_layer, size)
        chosen = sorted(int(i) for i in rng.permutation(size)[:k])
        weight_map.extend((name, idx) for idx in chosen)
    return weight_map


def mc_fim_slice(model, layer_names, rng: Rng, n: int,
                 max_per_layer: int = 50) -> FimSlice:
    """Monte Carlo FIM estimate restricted to a seeded weight subset.

    Consumes from ``rng`` in a fixed order: one permutation per probed
    layer for weight selection, then the model draws.
    """
    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n}")
    weight_map = select_weights(model.params, layer_names, rng, max_per_layer)
    draws = sample(model, rng, n)
    grads = dict(model.score_batch(draws))
    cols = [grads[name].reshape(n, -1)[:, idx] for name, idx in weight_map]
    s = np.stack(cols, axis=1)
    return FimSlice(matrix=(s.T @ s) / n, weight_map=weight_map, n_samples=n)


def normalize_fim(matrix: np.ndarray) -> np.ndarray:
    """C_ab = F_ab / sqrt(F_aa F_bb); requires strictly positive diagonal."""
    f = np.asarray(matrix, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != f.shape[1]:
        raise DomainError(f"square matrix required, got shape {f.shape}")
    d = np.diag(f)
    if np.any(d <= 0.0):
        bad = int(np.nonzero(d <= 0.0)[0][0])
        raise DegenerateDataError(
            f"diagonal entry {bad} is not positive; cannot normalize"
        )
    root = np.sqrt(d)
    return f / np.outer(root, root)


def diag_dominance(normalized: np.ndarray):
    """(mean |diagonal|, mean |off-diagonal|) of a normalized slice."""
    c = np.asarray(normalized, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DomainError(f"square matrix required, got shape {c.shape}")
    p = c.shape[0]
    diag_mean = float(np.mean(np.abs(np.diag(c))))
    if p == 1:
        return diag_mean, 0.0
    off = np.abs(c[~np.eye(p, dtype=bool)])
    return diag_mean, float(np.mean(off))


def exact_score_test_gaussian(model, x: np.ndarray):
    """Exact Rao statistic for the diagonal Gaussian at its parameters.

    Returns (statistic, dof). A 1-D input gives a scalar statistic, a
    2-D input one statistic per row; dof = 2 * dim either way.
    """
    mu = model.params["mu"]
    sigma = np.exp(model.params["log_sigma"])
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    pts = arr[None, :] if single else arr
    if pts.shape[1] != model.dim:
        raise DomainError(
            f"points have dimension {pts.shape[1]}, model has {model.dim}"
        )
    t = ((pts - mu) / sigma) ** 2
    stat = np.sum(t + 0.5 * (t - 1.0) ** 2, axis=1)
    dof = 2 * model.dim
    return (float(stat[0]), dof) if single else (stat, dof)


def prior_diag_from_samples(grad_samples: np.ndarray, p: int) -> np.ndarray:
    """Default prior diagonal diag(sum_i S_i^2); falls back to ones for
    empty sample sets and for coordinates no sample ever touched."""
    if len(grad_samples) == 0:
        return np.ones(p)
    s = np.asarray(grad_samples, dtype=np.float64)
    d = np.sum(s * s, axis=0)
    d[d <= 0.0] = 1.0
    return d


def sherman_morrison_score(grad_samples, a0_diag: np.ndarray, s_x: np.ndarray,
                           scale_convention: str = "raw") -> float:
    """Quadratic form s_x^T (diag(a0) + sum_i S_i S_i^T)^{-1} s_x.

    Rank-one updates are inverted recursively: with B_k the inverse
    after k updates, w_k = B_{k-1} S_k and d_k = 1 + S_k^T w_k,

        B_N v = v / a0 - sum_k w_k (w_k^T v) / d_k,

    so only the N update vectors are stored -- memory is O(N * P) and no
    P x P array is ever allocated. ``scale_convention`` 'raw' returns the
    quadratic form as-is; 'n_plus_1' multiplies by (N + 1).
    """
    if scale_convention not in ("raw", "n_plus_1"):
        raise DomainError(f"unknown scale convention '{scale_convention}'")
    a0 = np.asarray(a0_diag, dtype=np.float64)
    sx = np.asarray(s_x, dtype=np.float64)
    if a0.ndim != 1 or sx.shape != a0.shape:
        raise DomainError(
            f"a0 diagonal and s_x must be equal-length vectors, got "
            f"{a0.shape} and {sx.shape}"
        )
    if np.any(a0 <= 0.0):
        bad = int(np.nonzero(a0 <= 0.0)[0][0])
        raise DomainError(f"prior diagonal entry {bad} must be positive")
    samples = [np.asarray(s, dtype=np.float64) for s in grad_samples]
    for i, s in enumerate(samples):
        if s.shape != a0.shape:
            raise DomainError(f"gradient sample {i} has shape {s.shape}")
    ws = []
    ds = []
    for s in samples:
        w = s / a0
        for wj, dj in zip(ws, ds):
            w = w - wj * (np.dot(wj, s) / dj)
        d = 1.0 + np.dot(s, w)
        ws.append(w)
        ds.append(d)
    q = float(np.dot(sx, sx / a0))
    for wj, dj in zip(ws, ds):
        q -= np.dot(wj, sx) ** 2 / dj
    if scale_convention == "n_plus_1":
        q *= len(samples) + 1
    return float(q)
