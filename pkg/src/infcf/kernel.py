"""Neural tangent kernel of a fully-connected ReLU autoencoder.

Inputs are L2-normalized rows, so every pairwise correlation lies in
[-1, 1] and the ReLU dual activations have the arc-cosine closed forms.
No bias terms enter the recursion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

# correlations this close to +-1 are treated as exactly +-1
_SNAP = 1e-12


@dataclass(frozen=True)
class KernelConfig:
    depth: int = 1
    activation: str = "relu"

    def __post_init__(self):
        if int(self.depth) != self.depth or self.depth < 1:
            raise ValueError(f"kernel depth must be an integer >= 1, got {self.depth}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {"depth": int(self.depth), "activation": self.activation}


@dataclass(eq=False)
class Gramian:
    matrix: np.ndarray
    row_basis: object = None
    col_basis: object = None


def _clip(rho):
    return np.clip(rho, -1.0, 1.0)


def relu_dual(rho):
    """Arc-cosine kernel of degree 1: (sqrt(1 - p^2) + p (pi - arccos p)) / pi."""
    rho = _clip(rho)
    return (np.sqrt(1.0 - rho * rho) + rho * (np.pi - np.arccos(rho))) / np.pi


def relu_dual_derivative(rho):
    """Arc-cosine kernel of degree 0: (pi - arccos p) / pi."""
    rho = _clip(rho)
    return (np.pi - np.arccos(rho)) / np.pi


def _relu_dual_second(rho):
    # 1 / (pi sqrt(1 - p^2)); taken as 0 on the boundary, where the clamp is flat
    rho = np.asarray(rho, dtype=np.float64)
    gap = 1.0 - rho * rho
    inside = gap > 0
    return np.where(inside, 1.0 / (np.pi * np.sqrt(np.where(inside, gap, 1.0))), 0.0)


def ntk_from_correlation(rho, depth: int = 1):
    """Theta^depth from the NTK recursion started at Sigma^0 = Theta^0 = rho."""
    sigma = _clip(np.asarray(rho, dtype=np.float64))
    theta = sigma
    for _ in range(depth):
        dot = relu_dual_derivative(sigma)
        sigma = relu_dual(sigma)
        theta = sigma + theta * dot
    return theta


def ntk_and_derivative(rho, depth: int = 1):
    """(Theta^depth, dTheta^depth/drho), with zero derivative where rho is clamped."""
    rho = np.asarray(rho, dtype=np.float64)
    sigma = _clip(rho)
    theta = sigma
    d_sigma = np.where(np.abs(rho) < 1.0, 1.0, 0.0)
    d_theta = d_sigma
    for _ in range(depth):
        dot = relu_dual_derivative(sigma)
        ddot = _relu_dual_second(sigma)
        new_sigma = relu_dual(sigma)
        # relu_dual' = relu_dual_derivative
        d_theta = dot * d_sigma + d_theta * dot + theta * ddot * d_sigma
        theta = new_sigma + theta * dot
        d_sigma = dot * d_sigma
        sigma = new_sigma
    return theta, d_theta


def direct_ntk(rho):
    """Single-layer closed form K = relu_dual(p) + relu_dual'(p) * p."""
    rho = _clip(np.asarray(rho, dtype=np.float64))
    return relu_dual(rho) + relu_dual_derivative(rho) * rho


# ---------------------------------------------------------------------------
# Row normalization and correlations


def _as_matrix(x):
    if hasattr(x, "matrix") and not isinstance(x, np.ndarray):
        return x.matrix
    if sp.issparse(x):
        return sp.csr_matrix(x)
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def row_norms(x) -> np.ndarray:
    if sp.issparse(x):
        return np.sqrt(np.asarray(x.multiply(x).sum(axis=1)).ravel())
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def normalize_rows(x):
    """Unit-norm rows; all-zero rows stay zero."""
    norms = row_norms(x)
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    if sp.issparse(x):
        return sp.csr_matrix(sp.diags(inv) @ x)
    return x * inv[:, None]


def correlation(a, b, same: bool = False, block_rows: int | None = None) -> np.ndarray:
    """Pairwise correlations of the normalized rows of ``a`` and ``b``.

    One sparse-dense product per row block; the block size does not change
    any entry. With ``same`` the result is made exactly symmetric.
    """
    an = normalize_rows(a)
    bn = normalize_rows(b)
    bt = bn.T.toarray() if sp.issparse(bn) else np.ascontiguousarray(bn.T)
    n = an.shape[0]
    step = n if not block_rows else block_rows
    out = np.empty((n, bt.shape[1]))
    for lo in range(0, n, max(step, 1)):
        blk = an[lo:lo + step] @ bt
        out[lo:lo + step] = np.asarray(blk)
    if same:
        out = 0.5 * (out + out.T)
        idx = np.flatnonzero(row_norms(a) > 0)
        out[idx, idx] = 1.0
    # the kernel has a sqrt cusp at |rho| = 1 that would amplify roundoff there
    near = np.abs(out) > 1.0 - _SNAP
    out[near] = np.sign(out[near])
    return out


def ntk_pair(x, y, cfg: KernelConfig = KernelConfig()) -> float:
    """Kernel value between two item-indicator rows."""
    x, y = _as_matrix(x), _as_matrix(y)
    return float(ntk_from_correlation(correlation(x, y), cfg.depth)[0, 0])


def gramian(a, b=None, cfg: KernelConfig = KernelConfig(), block_rows: int | None = None) -> Gramian:
    """Kernel matrix between the rows of ``a`` and the rows of ``b`` (``a`` if omitted)."""
    same = b is None or b is a
    ma = _as_matrix(a)
    mb = ma if same else _as_matrix(b)
    if ma.shape[1] != mb.shape[1]:
        raise ValueError(f"item universes differ: {ma.shape[1]} vs {mb.shape[1]} columns")
    ia, ib = getattr(a, "item_ids", None), getattr(b, "item_ids", None)
    if ia is not None and ib is not None and ia != ib:
        raise ValueError("item universes differ")
    rho = correlation(ma, mb, same=same, block_rows=block_rows)
    return Gramian(ntk_from_correlation(rho, cfg.depth), a, a if same else b)
