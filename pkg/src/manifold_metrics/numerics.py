"""Dense log-volume kernels and automatic-differentiation helpers.

Log-volumes are natural-log Gram determinants ``log det(M^T M)^(1/2)``
computed from a Householder QR factorization, never from ``M^T M``.

Differentiation is delegated to torch: forward mode (``torch.func.jvp``)
extracts Jacobian columns, reverse mode (``torch.func.vjp`` /
``torch.autograd``) extracts rows and parameter gradients.  The two modes
nest, so a ``jvp`` evaluated on tensors that require grad yields tangents
that can themselves be back-propagated to model parameters.
"""

from __future__ import annotations

import threading
from typing import Callable

import numpy as np
import torch
from torch.func import jvp as _torch_jvp
from torch.func import vjp as _torch_vjp

from .errors import DegenerateJacobianError, DimensionError

# torch.func transforms keep their nesting levels in process-wide state, so
# concurrent transforms from different threads corrupt each other. Calls are
# serialized; reentrant so nested transforms on one thread still work.
_AD_LOCK = threading.RLock()

# |R_ii| below RANK_RTOL * (largest column norm) marks a degenerate column set.
RANK_RTOL = 1e-12
DTYPE = torch.float64


def basis_vector(dim: int, index: int) -> np.ndarray:
    """Standard basis vector ``e_index`` in ``R^dim`` (0-based index)."""
    if not 0 <= index < dim:
        raise DimensionError(f"basis index {index} out of range for dimension {dim}")
    e = np.zeros(dim)
    e[index] = 1.0
    return e


def _qr_diagonal(m: np.ndarray) -> np.ndarray:
    r = np.linalg.qr(m, mode="r")
    return np.abs(np.diagonal(r, axis1=-2, axis2=-1))


def gram_log_volumes(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched Gram log-volumes.

    Parameters
    ----------
    m : array of shape (..., rows, cols) with rows >= cols >= 1

    Returns
    -------
    values : array of shape (...), ``nan`` where degenerate
    degenerate : boolean array of shape (...)
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2:
        raise DimensionError("expected at least a 2-D array")
    rows, cols = m.shape[-2:]
    if cols < 1 or rows < cols:
        raise DimensionError(f"need rows >= cols >= 1, got {rows}x{cols}")
    if not np.all(np.isfinite(m)):
        raise DimensionError("matrix entries must be finite")
    if cols == 1:
        diag = np.linalg.norm(m, axis=-2)
    else:
        diag = _qr_diagonal(m)
    scale = np.max(np.linalg.norm(m, axis=-2), axis=-1)
    degenerate = np.any(diag <= RANK_RTOL * scale[..., None], axis=-1) | (scale == 0.0)
    with np.errstate(divide="ignore"):
        values = np.sum(np.log(diag), axis=-1)
    values = np.where(degenerate, np.nan, values)
    return values, degenerate


def gram_log_volume(m) -> float:
    """``log det(M^T M)^(1/2)`` for a single full-column-rank matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    values, degenerate = gram_log_volumes(m)
    if degenerate:
        raise DegenerateJacobianError(
            f"rank-deficient column set ({m.shape[1]} columns)", n_columns=m.shape[1]
        )
    return float(values)


def log_abs_det(m) -> float:
    """``log |det M|`` of a square matrix via pivoted LU."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"log_abs_det needs a square matrix, got shape {m.shape}")
    sign, logdet = np.linalg.slogdet(m)
    if sign == 0 or not np.isfinite(logdet):
        raise DegenerateJacobianError(f"singular {m.shape[0]}x{m.shape[0]} matrix", n_columns=m.shape[1])
    # slogdet does not apply a relative rank cutoff; mirror the QR rule.
    scale = np.max(np.linalg.norm(m, axis=0))
    if logdet < m.shape[0] * np.log(scale) + np.log(RANK_RTOL):
        raise DegenerateJacobianError(f"numerically singular {m.shape[0]}x{m.shape[0]} matrix",
                                      n_columns=m.shape[1])
    return float(logdet)


def _to_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.to(DTYPE)
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def _like_input(t: torch.Tensor, reference):
    if isinstance(reference, torch.Tensor):
        return t
    return t.detach().numpy().copy()


def jvp(f: Callable, z, v):
    """Forward-mode Jacobian-vector product.

    Returns ``(f(z), J(z) @ v)``.  Accepts numpy arrays or tensors and returns
    the same kind.  With tensor inputs the outputs stay on the autograd graph.
    """
    zt, vt = _to_tensor(z), _to_tensor(v)
    if zt.shape != vt.shape:
        raise DimensionError(f"tangent shape {tuple(vt.shape)} != input shape {tuple(zt.shape)}")
    with _AD_LOCK:
        value, tangent = _torch_jvp(f, (zt,), (vt,))
    return _like_input(value, z), _like_input(tangent, z)


def vjp(f: Callable, z, u):
    """Reverse-mode vector-Jacobian product: returns ``(f(z), u^T J(z))``."""
    zt, ut = _to_tensor(z), _to_tensor(u)
    with _AD_LOCK:
        value, pullback = _torch_vjp(f, zt)
        if value.shape != ut.shape:
            raise DimensionError(f"cotangent shape {tuple(ut.shape)} != output shape {tuple(value.shape)}")
        (cotangent,) = pullback(ut)
    return _like_input(value, z), _like_input(cotangent, z)


def grad(loss: Callable, params):
    """Reverse-mode gradient of a scalar ``loss(params)``."""
    p = _to_tensor(params).detach().clone().requires_grad_(True)
    out = loss(p)
    if not isinstance(out, torch.Tensor) or out.numel() != 1:
        raise DimensionError("loss must return a scalar tensor")
    if not out.requires_grad:
        raise DimensionError("loss does not depend on the given parameters")
    (g,) = torch.autograd.grad(out, p, allow_unused=True)
    if g is None:
        raise DimensionError("loss does not depend on the given parameters")
    return _like_input(g, params)


def finite_difference_jacobian(f: Callable, z, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a numpy function; O(step^2) truncation."""
    if step <= 0:
        raise ValueError("step must be positive")
    z = np.asarray(z, dtype=np.float64)
    f0 = np.asarray(f(z), dtype=np.float64)
    jac = np.empty((f0.size, z.size))
    for j in range(z.size):
        dz = np.zeros_like(z)
        dz.flat[j] = step
        jac[:, j] = (np.asarray(f(z + dz)).ravel() - np.asarray(f(z - dz)).ravel()) / (2 * step)
    return jac


def batch_jacobian_forward(f: Callable, z: torch.Tensor, columns) -> torch.Tensor:
    """Selected Jacobian columns of a row-wise batched map by forward mode.

    ``f`` maps ``(B, Dz) -> (B, Dx)`` independently per row.  Each column is
    its own pass over the batch, so a column's value does not depend on which
    other columns were requested.  Returns ``(B, Dx, len(columns))``.
    """
    out = []
    with _AD_LOCK:
        for c in columns:
            tangent = torch.zeros_like(z)
            tangent[:, c] = 1.0
            out.append(_torch_jvp(f, (z,), (tangent,))[1])
    return torch.stack(out, dim=2)


def batch_jacobian_reverse(f: Callable, z: torch.Tensor) -> torch.Tensor:
    """Full Jacobian of a row-wise batched map, one vjp per output dimension."""
    with _AD_LOCK:
        value, pullback = _torch_vjp(f, z)
        dx = value.shape[1]
        rows = []
        for k in range(dx):
            u = torch.zeros_like(value)
            u[:, k] = 1.0
            (row,) = pullback(u)
            rows.append(row)
    return torch.stack(rows, dim=1)
