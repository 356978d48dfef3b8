"""Energy scores over ETF subspaces and classifier sub-heads.

All quantities are log-sum-exp based and use the max-shift trick, so they
stay finite for any finite input.
"""

from dataclasses import dataclass

import numpy as np

from .etf import EtfFrame


def logsumexp(values, axis=-1):
    """Stable ``log(sum(exp(values)))`` along ``axis``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("logsumexp of an empty slice")
    m = v.max(axis=axis, keepdims=True)
    out = np.log(np.exp(v - m).sum(axis=axis, keepdims=True)) + m
    out = np.squeeze(out, axis=axis)
    return float(out) if out.ndim == 0 else out


def softmax(values, axis=-1):
    v = np.asarray(values, dtype=np.float64)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def subspace_energy(sub_basis: np.ndarray, f) -> float:
    """Free energy ``-logsumexp(sub_basis @ f)`` of a feature against one half."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != sub_basis.shape[1]:
        raise ValueError(f"feature dim {f.shape[-1]} != basis dim {sub_basis.shape[1]}")
    return -logsumexp(f @ sub_basis.T)


@dataclass(frozen=True)
class SubspaceScores:
    s_known: float
    s_unknown: float

    @property
    def offset(self) -> float:
        return self.s_unknown - self.s_known


def score_subspaces(frame: EtfFrame, f) -> SubspaceScores:
    """Known/unknown subspace scores of a single feature vector."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (frame.feature_dim,):
        raise ValueError(f"expected feature of shape ({frame.feature_dim},), got {f.shape}")
    return SubspaceScores(
        s_known=-subspace_energy(frame.known_half, f),
        s_unknown=-subspace_energy(frame.unknown_half, f),
    )


def batch_subspace_scores(frame: EtfFrame, features: np.ndarray, with_grad: bool = False):
    """Vectorized subspace scores for an ``n x d`` feature matrix.

    Returns ``(s_k, s_u)`` arrays of length n. With ``with_grad`` also returns
    the softmax weights over each half, ``(s_k, s_u, p_k, p_u)``; the gradient
    of ``s_k`` with respect to a feature is ``p_k @ known_half``.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != frame.feature_dim:
        raise ValueError(f"expected (n, {frame.feature_dim}) features, got {features.shape}")
    proj = features @ frame.basis.T
    half = frame.num_vectors // 2
    pk, pu = proj[:, :half], proj[:, half:]
    s_k = logsumexp(pk, axis=1)
    s_u = logsumexp(pu, axis=1)
    if not with_grad:
        return np.atleast_1d(s_k), np.atleast_1d(s_u)
    return (np.atleast_1d(s_k), np.atleast_1d(s_u), softmax(pk, axis=1), softmax(pu, axis=1))


def head_score(logits) -> float:
    """Affinity of one proposal to a classifier sub-head: ``logsumexp(logits)``.

    Larger means lower energy, i.e. stronger affinity to that sub-head.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("head_score needs at least one logit")
    return logsumexp(logits)
