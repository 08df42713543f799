"""Vectorized numpy loss kernels (fallback backend).

Every kernel returns the scalar loss together with its analytic gradient
w.r.t. each input array, in float64.
"""

from __future__ import annotations

import numpy as np


def _unit_rows(H: np.ndarray, name: str):
    norms = np.sqrt(np.einsum("ij,ij->i", H, H))
    if np.any(norms == 0.0):
        raise ValueError(f"{name} has a zero-norm row; cosine similarity is undefined")
    return H / norms[:, None], norms


def _project_back(gU: np.ndarray, U: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(x/|x|)^T g = (g - (g.u) u) / |x|
    return (gU - np.einsum("ij,ij->i", gU, U)[:, None] * U) / norms[:, None]


def contrastive(Hc, Hs, temperature, positives):
    """Shared kernel for the point-wise and group-wise objectives.

    Row i scores its context against every other context and every state.
    ``positives[i] < 0`` selects the paired state s_i as the numerator,
    otherwise the context c_{positives[i]}.
    """
    Hc = np.ascontiguousarray(Hc, dtype=np.float64)
    Hs = np.ascontiguousarray(Hs, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.int64)
    n = Hc.shape[0]
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if Hs.shape != Hc.shape or pos.shape != (n,):
        raise ValueError("shape mismatch")
    if np.any(pos >= n) or np.any(pos == np.arange(n)):
        raise ValueError("invalid positive index")
    U, nc = _unit_rows(Hc, "context batch")
    V, ns = _unit_rows(Hs, "state batch")
    scc = (U @ U.T) / temperature
    scs = (U @ V.T) / temperature
    np.fill_diagonal(scc, -np.inf)
    m = np.maximum(scc.max(axis=1), scs.max(axis=1))
    ecc = np.exp(scc - m[:, None])
    ecs = np.exp(scs - m[:, None])
    z = ecc.sum(axis=1) + ecs.sum(axis=1)
    log_z = m + np.log(z)
    rows = np.arange(n)
    self_pos = pos < 0
    numer = np.where(self_pos, scs[rows, rows], scc[rows, np.where(self_pos, 0, pos)])
    loss = float(np.mean(log_z - numer))

    gcc = ecc / z[:, None]
    gcs = ecs / z[:, None]
    gcs[rows[self_pos], rows[self_pos]] -= 1.0
    gcc[rows[~self_pos], pos[~self_pos]] -= 1.0
    gcc *= 1.0 / (n * temperature)
    gcs *= 1.0 / (n * temperature)
    gU = gcc @ U + gcc.T @ U + gcs @ V
    gV = gcs.T @ U
    return loss, _project_back(gU, U, nc), _project_back(gV, V, ns)


def variant(Hc, Hs):
    """mean_i (1 - cos(c_i, s_i))."""
    Hc = np.ascontiguousarray(Hc, dtype=np.float64)
    Hs = np.ascontiguousarray(Hs, dtype=np.float64)
    if Hs.shape != Hc.shape:
        raise ValueError("shape mismatch")
    n = Hc.shape[0]
    U, nc = _unit_rows(Hc, "context batch")
    V, ns = _unit_rows(Hs, "state batch")
    cos = np.einsum("ij,ij->i", U, V)
    loss = float(np.mean(1.0 - cos))
    return loss, _project_back(-V / n, U, nc), _project_back(-U / n, V, ns)


def token_nll(logits, targets, pad_id):
    """Mean negative log-likelihood over non-pad rows; gradient w.r.t. logits."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError("shape mismatch")
    valid = targets != pad_id
    count = int(valid.sum())
    if count == 0:
        raise ValueError("target contains only padding")
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.nonzero(valid)[0]
    loss = float(np.sum(lse[rows] - logits[rows, targets[rows]]) / count)
    grad = np.zeros_like(logits)
    grad[rows] = e[rows] / s[rows]
    grad[rows, targets[rows]] -= 1.0
    grad /= count
    return loss, grad
