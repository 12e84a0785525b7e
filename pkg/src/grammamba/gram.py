"""Unit-sphere projection, per-sample Gram matrices and the determinant loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateFeatureError, DimensionError, DomainError, NumericError
from .tensor import Tensor

NORM_EPS = 1e-8
JITTER = 1e-8
# above this condition number the inverse is taken on G + JITTER * I
COND_LIMIT = 1e10


def l2_normalize(raw: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Project the last axis of ``raw`` onto the unit sphere."""
    x = raw.data
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norm <= eps):
        bad = np.argwhere(norm.reshape(-1) <= eps).reshape(-1).tolist()
        raise DegenerateFeatureError(f"l2_normalize: near-zero feature norm at rows {bad}")
    z = x / norm

    def bw(g):
        return ((g - z * np.sum(z * g, axis=-1, keepdims=True)) / norm,)

    return T.make_op(z, (raw,), bw, "l2_normalize")


@dataclass
class GramMatrix:
    values: Tensor  # [N, N] or [B, N, N]

    @property
    def N(self) -> int:
        return self.values.shape[-1]


def gram_matrix(Z: Sequence[Tensor] | Tensor, tol: float = 1e-6) -> GramMatrix:
    """Pairwise inner products of unit features; the diagonal is exactly 1.

    ``Z`` is a list of N tensors shaped ``[k]`` or ``[B, k]``, or a single
    stacked tensor ``[B, N, k]``.
    """
    if isinstance(Z, Tensor):
        stacked = Z
        single = False
    else:
        Z = list(Z)
        if len(Z) < 2:
            raise ContractError(f"gram_matrix: need at least 2 features, got {len(Z)}")
        single = Z[0].ndim == 1
        stacked = T.stack(Z, axis=0 if single else 1)
        if single:
            stacked = T.reshape(stacked, (1,) + stacked.shape)
    zd = stacked.data
    if zd.ndim != 3:
        raise DimensionError(f"gram_matrix: expected [B, N, k], got {zd.shape}")
    if zd.shape[1] < 2:
        raise ContractError("gram_matrix: need at least 2 features")
    norms = np.sqrt(np.sum(zd * zd, axis=-1))
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractError("gram_matrix: inputs must be unit vectors (normalize first)")
    n = zd.shape[1]
    G = np.einsum("bik,bjk->bij", zd, zd)
    idx = np.arange(n)
    G[:, idx, idx] = 1.0

    def bw(g):
        g = g.copy()
        g[:, idx, idx] = 0.0
        return (np.einsum("bij,bjk->bik", g + np.swapaxes(g, 1, 2), zd),)

    values = T.make_op(G, (stacked,), bw, "gram_matrix")
    if single:
        values = T.reshape(values, (n, n))
    return GramMatrix(values)


def lu_det(M: np.ndarray) -> np.ndarray:
    """Determinants of ``[..., N, N]`` matrices by LU with partial pivoting."""
    A = np.array(M, dtype=np.float64, copy=True)
    batch_shape = A.shape[:-2]
    n = A.shape[-1]
    A = A.reshape(-1, n, n)
    det = np.ones(A.shape[0])
    rows = np.arange(A.shape[0])
    for j in range(n):
        piv = j + np.argmax(np.abs(A[:, j:, j]), axis=1)
        swap = piv != j
        if np.any(swap):
            r = rows[swap]
            tmp = A[r, j, :].copy()
            A[r, j, :] = A[r, piv[swap], :]
            A[r, piv[swap], :] = tmp
            det[swap] = -det[swap]
        pivot = A[:, j, j]
        det = det * pivot
        nz = pivot != 0.0
        if j + 1 < n and np.any(nz):
            f = np.zeros((A.shape[0], n - j - 1))
            f[nz] = A[nz, j + 1:, j] / pivot[nz, None]
            with np.errstate(invalid="ignore"):
                A[:, j + 1:, :] -= f[:, :, None] * A[:, j, None, :]
    return det.reshape(batch_shape)


def det_gradient(G: np.ndarray, det: float) -> np.ndarray:
    """``d det(G) / dG`` for one matrix, i.e. the transposed adjugate."""
    n = G.shape[0]
    cond = np.linalg.cond(G)
    if np.isfinite(cond) and cond < COND_LIMIT:
        return det * np.linalg.inv(G).T
    Gj = G + JITTER * np.eye(n)
    return float(lu_det(Gj)) * np.linalg.inv(Gj).T


def gram_det_loss(G: GramMatrix | Tensor) -> Tensor:
    """Batch mean of per-sample ``det(G)``; a single matrix gives its determinant."""
    values = G.values if isinstance(G, GramMatrix) else G
    gd = values.data
    single = gd.ndim == 2
    g3 = gd[None] if single else gd
    if g3.ndim != 3 or g3.shape[1] != g3.shape[2]:
        raise DimensionError(f"gram_det_loss: expected square matrices, got {gd.shape}")
    dets = lu_det(g3)
    bad = np.flatnonzero(~np.isfinite(dets))
    if bad.size:
        raise NumericError(f"gram_det_loss: non-finite determinant for sample {int(bad[0])}")
    nb = g3.shape[0]

    def bw(g):
        grads = np.stack([det_gradient(g3[b], dets[b]) for b in range(nb)]) * (float(g) / nb)
        return (grads[0] if single else grads,)

    return T.make_op(np.asarray(dets.mean()), (values,), bw, "gram_det_loss")


def equicorrelated_matrix(N: int, c: float) -> np.ndarray:
    return np.full((N, N), float(c)) + (1.0 - c) * np.eye(N)


def equicorrelated_det(N: int, c: float) -> float:
    """Closed-form determinant of the unit-diagonal matrix with constant off-diagonal c."""
    if N < 2:
        raise DomainError(f"equicorrelated_det: N must be >= 2, got {N}")
    if not -1.0 / (N - 1) <= c <= 1.0:
        raise DomainError(f"equicorrelated_det: c={c} outside [-1/(N-1), 1]")
    return (1.0 - c) ** (N - 1) * (1.0 + (N - 1) * c)


def check_gram(G: np.ndarray, tol: float = 1e-9, psd_tol: float = 1e-8) -> None:
    """Raise :class:`ContractError` if a Gram matrix breaks its invariants."""
    G = np.asarray(G)
    mats = G[None] if G.ndim == 2 else G
    for b, g in enumerate(mats):
        if np.max(np.abs(g - g.T)) >= tol:
            raise ContractError(f"Gram matrix {b} not symmetric")
        if np.max(np.abs(np.diag(g) - 1.0)) >= tol:
            raise ContractError(f"Gram matrix {b} diagonal not unit")
        if np.min(g) < -1.0 - tol or np.max(g) > 1.0 + tol:
            raise ContractError(f"Gram matrix {b} has entries outside [-1, 1]")
        if np.min(np.linalg.eigvalsh(g)) < -psd_tol:
            raise ContractError(f"Gram matrix {b} not positive semidefinite")


def mean_off_diagonal(G: np.ndarray) -> float:
    G = np.asarray(G)
    mats = G[None] if G.ndim == 2 else G
    n = mats.shape[-1]
    mask = ~np.eye(n, dtype=bool)
    return float(mats[:, mask].mean())
