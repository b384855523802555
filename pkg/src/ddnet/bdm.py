"""Basis decomposition: project a feature onto a stack of normalized basis
rows and rebuild it as the coefficient-weighted sum of those rows.

Shapes follow the [B, G, rows, F] convention: B batch, G groups (channels),
F flattened feature length. The original feature has a single row, the basis
set has ``c`` rows, the coefficients are [B, G, 1, c].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _result,
    batched_matmul,
    l2_normalize_rows,
    transpose_last,
)

NORM_EPS = 1e-8
_UNIT_TOL = 1e-5


@dataclass
class BasisSet:
    """Basis rows P [B,G,c,F]. ``deficient`` marks rows zeroed by orthonormalization."""

    tensor: Tensor
    normalized: bool = False
    deficient: np.ndarray = field(default=None, repr=False)

    @property
    def shape(self):
        return self.tensor.shape


def normalize_basis(p_raw: Tensor, eps: float = NORM_EPS) -> BasisSet:
    return BasisSet(l2_normalize_rows(p_raw, eps), normalized=True)


def _check_pair(t: Tensor, p: Tensor, what: str) -> None:
    if t.ndim != 4 or p.ndim != 4:
        raise ShapeError(f"{what}: expected rank-4 [B,G,rows,F] tensors, got {t.shape} and {p.shape}")
    if t.shape[:2] != p.shape[:2]:
        raise ShapeError(f"{what}: (B,G) extents differ: {t.shape[:2]} vs {p.shape[:2]}")


def decompose(t: Tensor, basis: BasisSet) -> Tensor:
    """Coefficients S = T . P^T, one per basis row."""
    if not basis.normalized:
        raise ValueError("decompose requires a normalized basis set")
    p = basis.tensor
    _check_pair(t, p, "decompose")
    if t.shape[2] != 1:
        raise ShapeError(f"decompose: original feature must have one row, got {t.shape[2]}")
    if t.shape[3] != p.shape[3]:
        raise ShapeError(f"decompose: feature length F differs: {t.shape[3]} vs {p.shape[3]}")
    return batched_matmul(t, transpose_last(p))


def reconstruct(s: Tensor, basis: BasisSet) -> Tensor:
    """O = S . P, the coefficient-weighted sum of basis rows."""
    p = basis.tensor
    _check_pair(s, p, "reconstruct")
    if s.shape[3] != p.shape[2]:
        raise ShapeError(f"reconstruct: {s.shape[3]} coefficients for {p.shape[2]} basis rows")
    return batched_matmul(s, p)


def bdm_forward(t_raw: Tensor, p_raw: Tensor, eps: float = NORM_EPS, orthogonal: bool = False) -> Tensor:
    """Normalize the raw basis, then decompose and reconstruct ``t_raw``.

    With ``orthogonal=True`` the basis is orthonormalized instead of only
    normalized (used for the orthogonality ablation).
    """
    basis = orthonormalize_basis(p_raw, eps) if orthogonal else normalize_basis(p_raw, eps)
    return project(t_raw, basis)


def project(t: Tensor, basis: BasisSet) -> Tensor:
    """reconstruct(decompose(t, basis), basis) as a single graph node."""
    if not basis.normalized:
        raise ValueError("project requires a normalized basis set")
    p = basis.tensor
    _check_pair(t, p, "project")
    if t.shape[2] != 1 or t.shape[3] != p.shape[3]:
        raise ShapeError(f"project: feature dims {t.shape} incompatible with basis dims {p.shape}")
    T, P = t.data, p.data
    coef = np.matmul(P, np.swapaxes(T, -1, -2))  # [B,G,c,1]
    out = np.matmul(np.swapaxes(coef, -1, -2), P)

    def bw(g):
        gcoef = np.matmul(P, np.swapaxes(g, -1, -2))
        gt = np.matmul(np.swapaxes(gcoef, -1, -2), P) if t.requires_grad else None
        gp = coef * g + gcoef * T if p.requires_grad else None
        return gt, gp

    return _result(out, (t, p), bw, "bdm_project")


def orthonormalize_rows(p: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Modified Gram-Schmidt over the row axis of [..., c, F], differentiable.

    Rows whose residual vanishes come out as (near-)zero rather than NaN
    because each normalization divides by sqrt(|v|^2 + eps^2).
    """
    P = p.data
    c = P.shape[-2]
    if c > P.shape[-1]:
        raise ShapeError(f"orthonormalize: {c} rows exceed feature length {P.shape[-1]}")
    V = P.copy()
    Q = np.zeros_like(P)
    pre = np.zeros_like(P)  # row i just before its normalization
    norms = np.zeros(P.shape[:-1] + (1,), dtype=P.dtype)
    coef = np.zeros(P.shape[:-1] + (c,), dtype=P.dtype)  # coef[..., j, i] = <v_j, q_i>
    for i in range(c):
        v = V[..., i, :]
        pre[..., i, :] = v
        n = np.sqrt(np.einsum("...f,...f->...", v, v) + eps * eps)[..., None]
        norms[..., i, :] = n
        q = v / n
        Q[..., i, :] = q
        if i + 1 < c:
            rest = V[..., i + 1:, :]
            r = np.einsum("...jf,...f->...j", rest, q)
            coef[..., i + 1:, i] = r
            V[..., i + 1:, :] = rest - r[..., None] * q[..., None, :]

    def bw(gq):
        gv = np.zeros_like(P)
        state = pre.copy()
        for i in range(c - 1, -1, -1):
            q = Q[..., i, :]
            g_q = gq[..., i, :].copy()
            if i + 1 < c:
                r = coef[..., i + 1:, i]
                # rows j > i back to their state before step i
                state[..., i + 1:, :] += r[..., None] * q[..., None, :]
                w = state[..., i + 1:, :]
                gw = gv[..., i + 1:, :]
                gdot = np.einsum("...jf,...f->...j", gw, q)
                g_q -= np.einsum("...j,...jf->...f", gdot, w) + np.einsum("...j,...jf->...f", r, gw)
                gv[..., i + 1:, :] = gw - gdot[..., None] * q[..., None, :]
            n = norms[..., i, :]
            gv[..., i, :] = (g_q - q * np.einsum("...f,...f->...", q, g_q)[..., None]) / n
        return (gv,)

    return _result(Q, (p,), bw, "orthonormalize_rows")


def orthonormalize_basis(p_raw: Tensor, eps: float = NORM_EPS) -> BasisSet:
    q = orthonormalize_rows(p_raw, eps)
    norms = np.sqrt(np.einsum("...f,...f->...", q.data, q.data))
    return BasisSet(q, normalized=True, deficient=norms < 1.0 - _UNIT_TOL)
