"""Stage 1: action-chunk autoencoder with a residual quantizer in the middle."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .autodiff import AdamW, AdamWConfig
from .quantizer import CodebookStack, SkillPath, quantization_error

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Stage1Config:
    mode: str = "rotation"
    codebook_size: int = 16  # K
    depth: int = 2  # D
    horizon: int = 8  # T
    action_dim: int = 2  # A
    latent_dim: int = 2  # m
    hidden: int = 128
    decoder: str = "mlp"  # or "attention"
    beta: float = 0.25
    commit_grad: str = "residual"  # or "literal": sg on r, gradient through the rotated code
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 50
    warmup_epochs: int = 10
    weight_decay: float = 1e-6
    ema_decay: float = 0.99
    codebook_learning: str = "ema"  # or "loss"
    kmeans_iters: int = 0  # Lloyd refinement of the k-means++ seeds
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.commit_grad not in ("residual", "literal"):
            raise ValueError(f"unknown commit_grad {self.commit_grad!r}")


class Normalizer:
    """Per-dimension min/max map to [-1, 1]."""

    def __init__(self, low, high):
        self.low = np.asarray(low, dtype=np.float32)
        self.high = np.asarray(high, dtype=np.float32)

    @classmethod
    def fit(cls, chunks: np.ndarray) -> "Normalizer":
        flat = chunks.reshape(-1, chunks.shape[-1])
        return cls(flat.min(0), flat.max(0))

    @property
    def span(self) -> np.ndarray:
        return np.where(self.high > self.low, self.high - self.low, 2.0).astype(np.float32)

    def normalize(self, x):
        if isinstance(x, torch.Tensor):
            low, span = torch.from_numpy(self.low).to(x.dtype), torch.from_numpy(self.span).to(x.dtype)
            return 2.0 * (x - low) / span - 1.0
        return (2.0 * (x - self.low) / self.span - 1.0).astype(np.float32)

    def denormalize(self, x):
        if isinstance(x, torch.Tensor):
            low, span = torch.from_numpy(self.low).to(x.dtype), torch.from_numpy(self.span).to(x.dtype)
            return (x + 1.0) * span / 2.0 + low
        return ((x + 1.0) * self.span / 2.0 + self.low).astype(np.float32)


def mlp(sizes: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class AttentionDecoder(nn.Module):
    """Latent -> T query tokens -> bidirectional transformer blocks -> actions."""

    def __init__(self, latent_dim, horizon, action_dim, width=128, layers=4, heads=4):
        super().__init__()
        from .cst import TransformerBlock

        self.horizon = horizon
        self.inp = nn.Linear(latent_dim, width)
        self.pos = nn.Parameter(torch.zeros(horizon, width))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads, causal=False) for _ in range(layers))
        self.out = nn.Linear(width, action_dim)

    def forward(self, z):
        x = self.inp(z).unsqueeze(1) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.out(x).reshape(z.shape[0], -1)


class SkillAutoencoder(nn.Module):
    def __init__(self, cfg: Stage1Config):
        super().__init__()
        self.cfg = cfg
        flat = cfg.horizon * cfg.action_dim
        # single hidden layer encoder
        self.encoder = mlp([flat, cfg.hidden, cfg.latent_dim])
        if cfg.decoder == "mlp":
            self.decoder = mlp([cfg.latent_dim, cfg.hidden, cfg.hidden, flat])
        elif cfg.decoder == "attention":
            self.decoder = AttentionDecoder(cfg.latent_dim, cfg.horizon, cfg.action_dim, cfg.hidden)
        else:
            raise ValueError(f"unknown decoder {cfg.decoder!r}")
        self.stack = CodebookStack(cfg.latent_dim, cfg.codebook_size, cfg.depth, cfg.mode, cfg.codebook_learning)
        self.normalizer = Normalizer(-np.ones(cfg.action_dim), np.ones(cfg.action_dim))

    def encode(self, chunks: torch.Tensor) -> torch.Tensor:
        z = self.encoder(chunks.reshape(chunks.shape[0], -1))
        if not torch.isfinite(z).all():
            raise FloatingPointError("non-finite encoder output")
        return z

    def decode(self, z_hat: torch.Tensor) -> torch.Tensor:
        return self.decoder(z_hat).reshape(-1, self.cfg.horizon, self.cfg.action_dim)

    def reconstruct(self, chunks: torch.Tensor, record: bool = False):
        """Returns ``(a_hat, path, losses)`` for normalized chunks ``(B, T, A)``."""
        z = self.encode(chunks)
        path = self.stack.quantize(z, record=record)
        a_hat = self.decode(path.z_hat)
        losses = stage1_losses(chunks, a_hat, path, self.cfg.beta, self.cfg.commit_grad)
        if self.stack.learn == "loss":
            losses["codebook"] = self.stack.codebook_loss(path)
            losses["total"] = losses["total"] + losses["codebook"]
        if not torch.isfinite(losses["total"]):
            raise FloatingPointError("NaN in stage-1 loss")
        return a_hat, path, losses

    @torch.no_grad()
    def codes_for(self, chunks: torch.Tensor) -> torch.Tensor:
        """Ground-truth skill codes of normalized chunks."""
        return self.stack.quantize(self.encode(chunks)).codes

    # -- checkpoint ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        return self.stack.to_bytes() + pack_tensors(
            {"config": asdict(self.cfg), "norm_low": self.normalizer.low.tolist(),
             "norm_high": self.normalizer.high.tolist()},
            {k: v for k, v in self.state_dict().items() if not k.startswith("stack.")},
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SkillAutoencoder":
        stack, pos = CodebookStack.from_bytes(data)
        meta, tensors, _ = unpack_tensors(data, pos)
        cfg = Stage1Config(**meta["config"])
        model = cls(cfg)
        missing = model.load_state_dict(tensors, strict=False)
        if missing.unexpected_keys or any(not k.startswith("stack.") for k in missing.missing_keys):
            raise ValueError(f"checkpoint does not match model: {missing}")
        model.stack = stack
        if stack.learn != cfg.codebook_learning:
            stack.learn = cfg.codebook_learning
        model.normalizer = Normalizer(meta["norm_low"], meta["norm_high"])
        return model

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SkillAutoencoder":
        return cls.from_bytes(Path(path).read_bytes())


def stage1_losses(chunks, a_hat, path: SkillPath, beta: float, commit_grad: str = "residual"):
    """Reconstruction MSE plus ``beta * sum_d |r_{d-1} - q_tilde_d|^2``.

    Both commitment forms have the same value. ``"residual"`` stops the
    gradient on ``q_tilde_d`` and pulls ``r_{d-1}`` toward it. ``"literal"``
    stops it on ``r_{d-1}`` and differentiates ``q_tilde_d`` through the frozen
    ``(|e|/|r|) M``; that gradient points away from the code and diverges in
    practice, so it is kept only for comparison.
    """
    recon = (chunks - a_hat).pow(2).mean()
    commit = 0.0
    for d, q in enumerate(path.rotated):
        r = path.residuals[d]
        if commit_grad == "literal":
            term = r.detach() - q
        else:
            term = r - q.detach()
        commit = commit + term.pow(2).sum(-1).mean()
    commit = beta * commit
    return {"recon": recon, "commit": commit, "total": recon + commit}


# -- tensor blob ---------------------------------------------------------------


def pack_tensors(meta: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    """Deterministic layout: u32 header length, JSON header, raw little-endian f32."""
    index = [[name, list(t.shape)] for name, t in tensors.items()]
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for t in tensors.values():
        buf.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())
    return buf.getvalue()


def unpack_tensors(data: bytes, offset: int = 0) -> tuple[dict, dict[str, torch.Tensor], int]:
    (length,) = struct.unpack_from("<I", data, offset)
    pos = offset + 4
    header = json.loads(data[pos : pos + length])
    pos += length
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, "<f4", count, pos).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * count
    return header["meta"], tensors, pos


# -- training --------------------------------------------------------------------


METRIC_FIELDS = ("epoch", "recon", "commit", "quant_l1")


@dataclass
class Stage1Result:
    model: SkillAutoencoder
    metrics: list[dict] = field(default_factory=list)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    return torch.Generator().manual_seed(seed)


def train_stage1(chunks: np.ndarray, cfg: Stage1Config, metrics_path=None) -> Stage1Result:
    """Train encoder/decoder by AdamW and codebooks by EMA on raw action chunks ``(N, T, A)``."""
    if len(chunks) == 0:
        raise ValueError("empty dataset")
    gen = seed_everything(cfg.seed)
    model = SkillAutoencoder(cfg)
    model.normalizer = Normalizer.fit(chunks)
    data = torch.from_numpy(model.normalizer.normalize(chunks))
    n = len(data)
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    opt = AdamW(model.parameters(), AdamWConfig(
        lr=cfg.lr, weight_decay=cfg.weight_decay,
        warmup_steps=cfg.warmup_epochs * steps_per_epoch, total_steps=cfg.epochs * steps_per_epoch))

    result = Stage1Result(model)
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(n, generator=gen)
        if not model.stack.initialized:
            with torch.no_grad():
                model.stack.init_kmeanspp(model.encode(data[perm[: cfg.batch_size]]), cfg.seed, cfg.kmeans_iters)
        model.stack.reset_usage()
        sums = {"recon": 0.0, "commit": 0.0, "quant_l1": 0.0}
        for start in range(0, n, cfg.batch_size):
            batch = data[perm[start : start + cfg.batch_size]]
            _, path, losses = model.reconstruct(batch, record=True)
            total = losses["total"]
            if not torch.isfinite(total) or total.item() > 1e3:
                raise TrainingDiverged(f"epoch {epoch}: loss {total.item():.4g} (recon {losses['recon'].item():.4g})")
            opt.zero_grad()
            total.backward()
            opt.step()
            if model.stack.learn == "ema":
                model.stack.ema_update(path, cfg.ema_decay)
            w = len(batch) / n
            sums["recon"] += w * losses["recon"].item()
            sums["commit"] += w * float(losses["commit"].detach())
            sums["quant_l1"] += w * quantization_error(path.residuals[0], path.z_hat).item()
        row = {"epoch": epoch, **sums}
        for d, m in enumerate(model.stack.usage_metrics(), start=1):
            row[f"active_codes_d{d}"] = m["active"]
            row[f"perplexity_d{d}"] = m["perplexity"]
        result.metrics.append(row)
        log.info("epoch %d recon %.5f commit %.5f quant_l1 %.5f active %s", epoch, row["recon"],
                 row["commit"], row["quant_l1"], [row[f"active_codes_d{d}"] for d in range(1, cfg.depth + 1)])
    if metrics_path is not None:
        write_metrics_csv(result.metrics, metrics_path, cfg.depth)
    return result


def metric_columns(depth: int) -> list[str]:
    return [*METRIC_FIELDS, *(f"active_codes_d{d}" for d in range(1, depth + 1)),
            *(f"perplexity_d{d}" for d in range(1, depth + 1))]


def write_metrics_csv(rows: list[dict], path, depth: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=metric_columns(depth), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
