"""Residual vector quantization over a stack of codebooks.

Two gradient modes share one forward pass:

* ``rotation``: each depth emits ``q_tilde = sg[|e|/|r| M] r`` (see ``rotation``)
* ``ste``: each depth emits the code with an identity backward

Codebooks are learned by EMA (default) or, for ablations, by a codebook loss
on trainable vectors. Indices are 0-based throughout.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .rotation import FrozenRotation, rotation_trick, straight_through

MODES = ("rotation", "ste")
MAGIC = b"RARQ1"
_HEADER = struct.Struct("<5sIIIB")


def nearest_code(residual: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the nearest code by squared distance; ties go to the lowest index.

    Works on a single vector ``(m,)`` or a batch ``(B, m)``.
    """
    if codebook.numel() == 0:
        raise ValueError("empty codebook")
    single = residual.dim() == 1
    r = residual.unsqueeze(0) if single else residual
    if r.shape[-1] != codebook.shape[-1]:
        raise ValueError(f"dimension mismatch: {r.shape[-1]} vs codebook {codebook.shape[-1]}")
    # exact differences rather than the |r|^2 - 2 r.e + |e|^2 expansion, so ties stay ties
    dist = (r.unsqueeze(1) - codebook.unsqueeze(0)).pow(2).sum(-1)
    idx = dist.argmin(dim=1)  # first minimum wins
    return idx[0] if single else idx


@dataclass
class SkillPath:
    """Result of quantizing a batch of latents.

    ``residuals`` holds r_0..r_D, ``rotated`` q_tilde_1..q_tilde_D and ``ops``
    the frozen rotation factors per depth (empty in ste mode).
    """

    codes: torch.Tensor  # (B, D) long
    rotated: list[torch.Tensor]
    residuals: list[torch.Tensor]
    z_hat: torch.Tensor
    ops: list[FrozenRotation] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return self.codes.shape[1]


class CodebookStack(nn.Module):
    """``D`` codebooks of ``K`` vectors in ``R^m`` plus EMA state and usage counts."""

    def __init__(self, dim: int, size: int = 16, depth: int = 2, mode: str = "rotation",
                 learn: str = "ema", dtype=torch.float32):
        super().__init__()
        if size < 2 or depth < 1:
            raise ValueError("need K >= 2 and D >= 1")
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if learn not in ("ema", "loss"):
            raise ValueError(f"learn must be 'ema' or 'loss', got {learn!r}")
        self.dim, self.size, self.depth, self.mode, self.learn = dim, size, depth, mode, learn
        vectors = torch.zeros(depth, size, dim, dtype=dtype)
        if learn == "loss":
            self.vectors = nn.Parameter(vectors)
        else:
            self.register_buffer("vectors", vectors)
        self.register_buffer("ema_count", torch.ones(depth, size, dtype=dtype))
        self.register_buffer("ema_sum", torch.zeros(depth, size, dim, dtype=dtype))
        self.register_buffer("usage", torch.zeros(depth, size, dtype=torch.long))
        self.initialized = False

    # -- initialization ------------------------------------------------------

    @torch.no_grad()
    def init_kmeanspp(self, latents: torch.Tensor, seed: int = 0, lloyd_iters: int = 0) -> None:
        """Seed every depth with k-means++ on the residuals of ``latents``.

        With ``lloyd_iters > 0`` the seeds are refined by that many k-means
        iterations before the next depth's residuals are formed, so deeper
        codebooks start from residuals about cluster means rather than about
        arbitrary sample points.
        """
        from sklearn.cluster import KMeans, kmeans_plusplus

        residual = latents.detach().to(torch.float64)
        for d in range(self.depth):
            x = residual.numpy()
            if len(x) < self.size:
                x = np.resize(x, (self.size, x.shape[1]))
            if len(np.unique(x, axis=0)) < self.size:
                # not enough distinct points: jitter so k-means++ can still pick K centers
                rng = np.random.default_rng(seed + d)
                x = x + 1e-4 * rng.standard_normal(x.shape)
            centers, _ = kmeans_plusplus(x, self.size, random_state=seed + d)
            if lloyd_iters > 0:
                km = KMeans(self.size, init=centers, n_init=1, max_iter=lloyd_iters).fit(x)
                centers = km.cluster_centers_
            centers = torch.as_tensor(centers, dtype=self.vectors.dtype)
            self.vectors.data[d] = centers
            self.ema_count[d] = 1.0
            self.ema_sum[d] = centers * (1.0 + 1e-5)
            idx = nearest_code(residual, centers.to(residual.dtype))
            residual = residual - centers.to(residual.dtype)[idx]
        self.initialized = True

    # -- forward -------------------------------------------------------------

    def quantize(self, z: torch.Tensor, record: bool = False, mode: str | None = None) -> SkillPath:
        mode = mode or self.mode
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        single = z.dim() == 1
        r = z.unsqueeze(0) if single else z
        if r.shape[-1] != self.dim:
            raise ValueError(f"latent dim {r.shape[-1]} != codebook dim {self.dim}")
        vectors = self.vectors.to(r.dtype)
        residuals, rotated, codes, ops = [r], [], [], []
        for d in range(self.depth):
            if not torch.isfinite(r).all():
                raise FloatingPointError(f"non-finite residual entering depth {d + 1}")
            idx = nearest_code(r.detach(), vectors[d].detach())
            e = vectors[d][idx].detach()
            if mode == "rotation":
                q, op = rotation_trick(r, e)
                ops.append(op)
            else:
                q = straight_through(r, e)
            r = r - q
            codes.append(idx)
            rotated.append(q)
            residuals.append(r)
        z_hat = rotated[0]
        for q in rotated[1:]:
            z_hat = z_hat + q
        codes = torch.stack(codes, dim=1)
        if record:
            self.record_usage(codes)
        if single:
            return SkillPath(codes[0], [q[0] for q in rotated], [x[0] for x in residuals], z_hat[0], ops)
        return SkillPath(codes, rotated, residuals, z_hat, ops)

    def lookup(self, codes: torch.Tensor) -> torch.Tensor:
        """Plain sum of the selected codebook vectors, ``(B, D) -> (B, m)``."""
        if codes.min() < 0 or codes.max() >= self.size:
            raise IndexError(f"code out of range [0, {self.size})")
        out = self.vectors[0][codes[..., 0]]
        for d in range(1, self.depth):
            out = out + self.vectors[d][codes[..., d]]
        return out

    def codebook_loss(self, path: SkillPath) -> torch.Tensor:
        """``sum_d |sg(r_{d-1}) - e_{d,k_d}|^2`` for codebooks trained by loss."""
        total = 0.0
        for d in range(self.depth):
            e = self.vectors[d][path.codes[:, d]]
            total = total + (path.residuals[d].detach() - e).pow(2).sum(-1).mean()
        return total

    # -- EMA -----------------------------------------------------------------

    @torch.no_grad()
    def ema_update(self, path: SkillPath, decay: float = 0.99) -> None:
        """EMA codebook step; depth-d statistics use the pre-quantization residual r_{d-1}."""
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must be in (0, 1), got {decay}")
        for d in range(self.depth):
            target = path.residuals[d].detach().to(self.ema_sum.dtype)
            onehot = torch.nn.functional.one_hot(path.codes[:, d], self.size).to(target.dtype)
            n = onehot.sum(0)
            s = onehot.T @ target
            self.ema_count[d] = decay * self.ema_count[d] + (1 - decay) * n
            self.ema_sum[d] = decay * self.ema_sum[d] + (1 - decay) * s
            self.vectors.data[d] = self.ema_sum[d] / (self.ema_count[d] + 1e-5).unsqueeze(1)

    # -- usage ---------------------------------------------------------------

    @torch.no_grad()
    def record_usage(self, codes: torch.Tensor) -> None:
        codes = codes.reshape(-1, self.depth)
        for d in range(self.depth):
            self.usage[d] += torch.bincount(codes[:, d], minlength=self.size)

    def reset_usage(self) -> None:
        self.usage.zero_()

    def usage_metrics(self) -> list[dict]:
        return usage_metrics(self.usage)

    # -- checkpoint ------------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_HEADER.pack(MAGIC, self.dim, self.size, self.depth, MODES.index(self.mode)))
        buf.write(np.ascontiguousarray(self.vectors.detach().numpy(), dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(self.ema_count.numpy(), dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(self.ema_sum.numpy(), dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["CodebookStack", int]:
        magic, m, k, d, mode = _HEADER.unpack_from(data, offset)
        if magic != MAGIC:
            raise ValueError(f"bad quantizer magic {magic!r}")
        stack = cls(m, k, d, MODES[mode])
        pos = offset + _HEADER.size

        def take(shape):
            nonlocal pos
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            return torch.from_numpy(arr.astype(np.float32))

        stack.vectors.data.copy_(take((d, k, m)))
        stack.ema_count.copy_(take((d, k)))
        stack.ema_sum.copy_(take((d, k, m)))
        stack.initialized = True
        return stack, pos


def usage_metrics(histogram) -> list[dict]:
    """Per-depth active count, frequencies and perplexity ``exp(-sum p log p)``."""
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.ndim == 1:
        hist = hist[None]
    out = []
    for row in hist:
        total = row.sum()
        if total <= 0:
            raise ValueError("empty usage histogram")
        p = row / total
        nz = p[p > 0]
        entropy = float(-(nz * np.log(nz)).sum())
        out.append({
            "active": int((p > 0).sum()),
            "frequencies": p,
            "entropy": entropy,
            "perplexity": float(np.exp(entropy)),
        })
    return out


def quantization_error(z: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance between latents and their quantized versions."""
    return (z - z_hat).abs().sum(-1).mean()


def fit_codebooks(latents: torch.Tensor, size: int = 16, depth: int = 2, epochs: int = 30, batch_size: int = 256,
                  decay: float = 0.99, seed: int = 0, lloyd_iters: int = 0) -> CodebookStack:
    """Learn a stack directly on fixed latents: initialize on the first batch, then EMA epochs."""
    latents = torch.as_tensor(latents)
    gen = torch.Generator().manual_seed(seed)
    stack = CodebookStack(latents.shape[1], size, depth, "ste", dtype=latents.dtype)
    perm = torch.randperm(len(latents), generator=gen)
    stack.init_kmeanspp(latents[perm[:batch_size]], seed, lloyd_iters)
    for _ in range(epochs):
        perm = torch.randperm(len(latents), generator=gen)
        for start in range(0, len(latents), batch_size):
            stack.ema_update(stack.quantize(latents[perm[start : start + batch_size]]), decay)
    return stack
