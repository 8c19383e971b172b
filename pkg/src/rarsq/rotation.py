"""The rotation trick: align a residual with its selected code.

For a residual ``r`` and code ``e`` the operator is::

    M = I - 2 lam lam^T + 2 q_hat r_hat^T,   lam = (r_hat + q_hat) / |r_hat + q_hat|
    q_tilde = (|e| / |r|) * M r

``M`` maps ``r_hat`` onto ``q_hat`` and is orthogonal. In the backward pass the
whole factor ``(|e|/|r|) M`` is treated as a constant, so gradients reaching
``q_tilde`` are sent back through ``(|e|/|r|) M^T``.

``M`` is never materialized on the training path; it is applied as two rank-1
updates.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-8
MAX_MATERIALIZE_DIM = 64


class Branch(enum.IntEnum):
    REGULAR = 0
    ANTIPODAL = 1  # r_hat ~ -q_hat: Householder reflection I - 2 r_hat r_hat^T
    PASSTHROUGH = 2  # |r| ~ 0: emit the code, identity backward


class StaleOperatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class RotationOperator:
    lam: np.ndarray
    r_hat: np.ndarray
    q_hat: np.ndarray
    scale: float
    branch: Branch
    code: np.ndarray

    @property
    def dim(self) -> int:
        return self.lam.shape[0]

    def rotate(self, v: np.ndarray) -> np.ndarray:
        """``M v`` without the scale; ``v`` may be a vector or an ``(m, n)`` block of columns."""
        v = np.asarray(v, dtype=np.float64)
        if self.branch is Branch.PASSTHROUGH:
            return v.copy()
        if self.branch is Branch.ANTIPODAL:
            return v - 2.0 * np.multiply.outer(self.r_hat, self.r_hat @ v)
        return v - 2.0 * np.multiply.outer(self.lam, self.lam @ v) + 2.0 * np.multiply.outer(self.q_hat, self.r_hat @ v)

    def rotate_transpose(self, g: np.ndarray) -> np.ndarray:
        """``M^T g``."""
        g = np.asarray(g, dtype=np.float64)
        if self.branch is Branch.PASSTHROUGH:
            return g.copy()
        if self.branch is Branch.ANTIPODAL:
            return g - 2.0 * np.multiply.outer(self.r_hat, self.r_hat @ g)
        return g - 2.0 * np.multiply.outer(self.lam, self.lam @ g) + 2.0 * np.multiply.outer(self.r_hat, self.q_hat @ g)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``scale * M v``; for the passthrough branch this is the code itself."""
        if self.branch is Branch.PASSTHROUGH:
            return self.code.copy()
        return self.scale * self.rotate(v)

    def matrix(self) -> np.ndarray:
        """Dense ``M`` (unscaled). Only for inspection in small dimensions."""
        m = self.dim
        if m > MAX_MATERIALIZE_DIM:
            raise ValueError(f"refusing to materialize a {m}x{m} rotation")
        eye = np.eye(m)
        if self.branch is Branch.PASSTHROUGH:
            return eye
        if self.branch is Branch.ANTIPODAL:
            return eye - 2.0 * np.outer(self.r_hat, self.r_hat)
        return eye - 2.0 * np.outer(self.lam, self.lam) + 2.0 * np.outer(self.q_hat, self.r_hat)

    def jacobian(self) -> np.ndarray:
        """The frozen linear map used in backward: ``scale * M`` (identity on passthrough)."""
        if self.branch is Branch.PASSTHROUGH:
            return np.eye(self.dim)
        return self.scale * self.matrix()


def compute_rotation(residual, code, eps: float = EPS) -> RotationOperator:
    r = np.asarray(residual, dtype=np.float64)
    e = np.asarray(code, dtype=np.float64)
    if r.ndim != 1 or r.shape != e.shape:
        raise ValueError(f"dimension mismatch: residual {r.shape} vs code {e.shape}")
    if r.shape[0] < 2:
        raise ValueError("rotation needs dimension >= 2")
    if not (np.isfinite(r).all() and np.isfinite(e).all()):
        raise ValueError("non-finite input to compute_rotation")

    r_norm = float(np.linalg.norm(r))
    e_norm = float(np.linalg.norm(e))
    if r_norm < eps or e_norm < eps:
        zero = np.zeros_like(r)
        return RotationOperator(zero, zero, zero, 1.0, Branch.PASSTHROUGH, e.copy())

    r_hat = r / r_norm
    q_hat = e / e_norm
    bisector = r_hat + q_hat
    b_norm = float(np.linalg.norm(bisector))
    scale = e_norm / r_norm
    if b_norm < eps:
        return RotationOperator(r_hat.copy(), r_hat, q_hat, scale, Branch.ANTIPODAL, e.copy())
    return RotationOperator(bisector / b_norm, r_hat, q_hat, scale, Branch.REGULAR, e.copy())


# -- batched torch path ------------------------------------------------------


@dataclass
class FrozenRotation:
    """Per-row rotation factors for a batch, all detached from the graph."""

    lam: torch.Tensor  # (B, m)
    r_hat: torch.Tensor
    q_hat: torch.Tensor
    scale: torch.Tensor  # (B, 1)
    branch: torch.Tensor  # (B,) int64, values of Branch
    code: torch.Tensor  # (B, m)
    residual: torch.Tensor  # value the factors were computed from


@torch.no_grad()
def compute_rotation_batch(residual: torch.Tensor, code: torch.Tensor, eps: float = EPS) -> FrozenRotation:
    if residual.shape != code.shape or residual.dim() != 2:
        raise ValueError(f"dimension mismatch: residual {tuple(residual.shape)} vs code {tuple(code.shape)}")
    r = residual.detach()
    e = code.detach()
    r_norm = r.norm(dim=1, keepdim=True)
    e_norm = e.norm(dim=1, keepdim=True)
    passthrough = (r_norm < eps) | (e_norm < eps)
    r_hat = r / r_norm.clamp_min(eps)
    q_hat = e / e_norm.clamp_min(eps)
    bisector = r_hat + q_hat
    b_norm = bisector.norm(dim=1, keepdim=True)
    antipodal = (b_norm < eps) & ~passthrough
    lam = torch.where(antipodal, r_hat, bisector / b_norm.clamp_min(eps))
    scale = torch.where(passthrough, torch.ones_like(r_norm), e_norm / r_norm.clamp_min(eps))

    branch = torch.full((r.shape[0],), int(Branch.REGULAR), dtype=torch.long)
    branch[antipodal.squeeze(1)] = int(Branch.ANTIPODAL)
    branch[passthrough.squeeze(1)] = int(Branch.PASSTHROUGH)
    return FrozenRotation(lam, r_hat, q_hat, scale, branch, e.clone(), r.clone())


def _rotate_rows(v, lam, a, b, branch):
    """Row-wise ``v - 2 lam (lam.v) + 2 a (b.v)``, with the rank-1 'a b^T' term
    dropped on antipodal rows and identity on passthrough rows."""
    regular = (branch == Branch.REGULAR).unsqueeze(1).to(v.dtype)
    keep = (branch != Branch.PASSTHROUGH).unsqueeze(1).to(v.dtype)
    lam_v = (lam * v).sum(dim=1, keepdim=True)
    b_v = (b * v).sum(dim=1, keepdim=True)
    return v - keep * 2.0 * lam * lam_v + regular * 2.0 * a * b_v


class _RotationTrick(torch.autograd.Function):
    @staticmethod
    def forward(ctx, residual, lam, r_hat, q_hat, scale, branch, code):
        out = scale * _rotate_rows(residual, lam, q_hat, r_hat, branch)
        passthrough = (branch == Branch.PASSTHROUGH).unsqueeze(1)
        out = torch.where(passthrough, code, out)
        ctx.save_for_backward(lam, r_hat, q_hat, scale, branch)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        lam, r_hat, q_hat, scale, branch = ctx.saved_tensors
        # (scale M)^T g = scale (g - 2 lam lam.g + 2 r_hat q_hat.g); identity on passthrough
        grad = scale * _rotate_rows(grad_out, lam, r_hat, q_hat, branch)
        passthrough = (branch == Branch.PASSTHROUGH).unsqueeze(1)
        grad = torch.where(passthrough, grad_out, grad)
        return grad, None, None, None, None, None, None


def apply_rotation_trick(residual: torch.Tensor, op: FrozenRotation, check: bool = True) -> torch.Tensor:
    """``q_tilde = sg[scale * M] residual`` with the frozen backward map."""
    if check and not torch.equal(residual.detach(), op.residual.to(residual.dtype)):
        raise StaleOperatorError("residual changed since the rotation was computed")
    cast = lambda t: t.to(residual.dtype)  # noqa: E731
    return _RotationTrick.apply(
        residual, cast(op.lam), cast(op.r_hat), cast(op.q_hat), cast(op.scale), op.branch, cast(op.code)
    )


def rotation_trick(residual: torch.Tensor, code: torch.Tensor, eps: float = EPS) -> tuple[torch.Tensor, FrozenRotation]:
    """Compute the per-row operators and apply them in one go."""
    op = compute_rotation_batch(residual, code, eps)
    return apply_rotation_trick(residual, op, check=False), op


class _StraightThrough(torch.autograd.Function):
    # r + sg(e - r) is off by an ulp in float; this returns e bit-for-bit
    @staticmethod
    def forward(ctx, residual, code):
        return code.clone()

    @staticmethod
    def backward(ctx, grad_out):
        return grad_out, None


def straight_through(residual: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
    """Forward value ``code``, identity backward to ``residual``."""
    return _StraightThrough.apply(residual, code.detach())
