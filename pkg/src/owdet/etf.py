"""Fixed simplex equiangular tight frame and its known/unknown halves."""

from dataclasses import dataclass

import numpy as np


def build_orthonormal_rows(seed: int, K: int, d: int) -> np.ndarray:
    """Return a ``K x d`` matrix with orthonormal rows.

    The rows come from the QR factorization of a seeded standard Gaussian
    ``d x K`` matrix, with column signs fixed so that ``R`` has a positive
    diagonal. The result is a deterministic function of ``(seed, K, d)``.
    """
    if K < 1:
        raise ValueError(f"K must be positive, got {K}")
    if d < K:
        raise ValueError(f"orthonormal rows need d >= K, got d={d}, K={K}")
    rng = np.random.default_rng(np.uint64(seed))
    g = rng.standard_normal((d, K))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return np.ascontiguousarray((q * signs).T)


@dataclass(frozen=True)
class EtfFrame:
    """Simplex ETF basis split into a known half and an unknown half.

    Attributes:
        basis: ``K x d`` matrix of unit rows with pairwise inner product
            ``-1/(K-1)``.
        num_vectors: K, even.
        feature_dim: d, at least K.
        seed: seed used for the orthonormal factor.
    """

    basis: np.ndarray
    num_vectors: int
    feature_dim: int
    seed: int

    def __post_init__(self):
        self.basis.setflags(write=False)

    @property
    def known_half(self) -> np.ndarray:
        return self.basis[: self.num_vectors // 2]

    @property
    def unknown_half(self) -> np.ndarray:
        return self.basis[self.num_vectors // 2 :]

    def gram(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def gram_errors(self) -> dict:
        """Max deviation of the Gram matrix from the simplex ETF pattern."""
        g = self.gram()
        K = self.num_vectors
        diag = np.abs(np.diag(g) - 1.0).max()
        off = g[~np.eye(K, dtype=bool)]
        off_err = np.abs(off + 1.0 / (K - 1)).max() if off.size else 0.0
        return {"max_diag_err": float(diag), "max_offdiag_err": float(off_err)}


def build_simplex_etf(K: int = 128, d: int = 256, seed: int = 0) -> EtfFrame:
    """Build ``sqrt(K/(K-1)) (I - 11^T/K) Q`` for a seeded orthonormal Q."""
    if K < 2 or K % 2:
        raise ValueError(f"K must be even and >= 2, got {K}")
    if d < K:
        raise ValueError(f"need d >= K, got d={d}, K={K}")
    q = build_orthonormal_rows(seed, K, d)
    center = np.eye(K) - np.full((K, K), 1.0 / K)
    basis = np.sqrt(K / (K - 1)) * center @ q
    return EtfFrame(basis=basis, num_vectors=K, feature_dim=d, seed=int(seed))


def split_subspaces(frame: EtfFrame) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(known_half, unknown_half)``, rows ``[0, K/2)`` and ``[K/2, K)``."""
    return frame.known_half, frame.unknown_half
