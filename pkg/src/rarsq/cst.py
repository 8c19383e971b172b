"""Stage 2: causal skill transformer over a frozen skill autoencoder.

An observation window plus a task embedding is encoded by a small causal
transformer into a context vector ``g``. Code heads predict the skill codes
depth by depth, each conditioned on embeddings of the codes chosen so far, and
an offset head predicts a continuous correction added to the decoded chunk.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .autodiff import AdamW, AdamWConfig
from .autoencoder import SkillAutoencoder, pack_tensors, seed_everything, unpack_tensors
from .envlab import PointMassEnv, scripted_expert

log = logging.getLogger(__name__)


class CheckpointMismatch(ValueError):
    pass


@dataclass
class CSTConfig:
    history: int = 10  # observation window h
    obs_dim: int = 12
    n_tasks: int = 4
    width: int = 128
    layers: int = 2
    heads: int = 4
    code_embed: int = 32
    dropout: float = 0.0
    obs_noise: float = 0.0  # std of Gaussian noise added to training windows
    depth_weights: tuple[float, ...] = (2.0, 1.0)
    offset_weight: float = 20.0
    autoregressive: bool = True
    refine: bool = True
    batch_size: int = 256
    lr: float = 8e-4
    epochs: int = 300
    warmup_epochs: int = 10
    weight_decay: float = 1e-6
    seed: int = 0

    def weight_for_depth(self, d: int) -> float:
        return self.depth_weights[d] if d < len(self.depth_weights) else 1.0


@dataclass
class SamplingConfig:
    top_p: float = 0.9
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"nucleus threshold must be in (0, 1], got {self.top_p}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


# -- transformer -------------------------------------------------------------------


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, width: int, heads: int, causal: bool = True, dropout: float = 0.0):
        super().__init__()
        self.causal = causal
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, dropout=dropout, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        mask = None
        if self.causal:
            n = x.shape[1]
            mask = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, h, attn_mask=mask, need_weights=False)[0])
        return x + self.drop(self.mlp(self.ln2(x)))


class CausalSkillTransformer(nn.Module):
    def __init__(self, cfg: CSTConfig, codebook_size: int, depth: int, horizon: int, action_dim: int):
        super().__init__()
        self.cfg = cfg
        self.codebook_size, self.depth = codebook_size, depth
        self.horizon, self.action_dim = horizon, action_dim
        w = cfg.width
        self.state_encoder = nn.Sequential(nn.Linear(cfg.obs_dim, w), nn.GELU(), nn.Linear(w, w))
        self.task_embedding = nn.Embedding(cfg.n_tasks, w)
        # room for the task token plus a window up to twice the configured length
        self.position = nn.Parameter(torch.randn(2 * cfg.history + 1, w) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(w, cfg.heads, dropout=cfg.dropout) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(w)

        self.code_embeddings = nn.ModuleList(nn.Embedding(codebook_size, cfg.code_embed) for _ in range(depth - 1))
        self.code_heads = nn.ModuleList()
        for d in range(depth):
            inp = w + (d * cfg.code_embed if cfg.autoregressive else 0)
            self.code_heads.append(nn.Sequential(nn.Linear(inp, w), nn.GELU(), nn.Linear(w, codebook_size)))
        self.offset_head = nn.Sequential(nn.Linear(w, w), nn.GELU(), nn.Linear(w, horizon * action_dim))
        for head in [*self.code_heads, self.offset_head]:
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)

    def encode_sequence(self, obs: torch.Tensor, task: torch.Tensor) -> torch.Tensor:
        """Features for every window position, ``(B, n, obs) -> (B, n, width)``."""
        n = obs.shape[1]
        if n + 1 > self.position.shape[0]:
            raise ValueError(f"window of {n} steps exceeds the position table")
        tokens = torch.cat([self.task_embedding(task).unsqueeze(1), self.state_encoder(obs)], dim=1)
        x = tokens + self.position[: n + 1]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)[:, 1:]

    def encode_context(self, obs: torch.Tensor, task: torch.Tensor) -> torch.Tensor:
        """Context ``g_t`` from a window ending at ``t``: ``(B, h, obs) -> (B, width)``."""
        if obs.shape[1] != self.cfg.history:
            raise ValueError(f"expected a window of {self.cfg.history} steps, got {obs.shape[1]}")
        g = self.encode_sequence(obs, task)[:, -1]
        if not torch.isfinite(g).all():
            raise FloatingPointError("non-finite context features")
        return g

    def code_logits(self, g: torch.Tensor, prefix: torch.Tensor, d: int) -> torch.Tensor:
        """Logits over the ``d``-th codebook (0-based) given codes ``prefix`` of shape ``(B, d)``."""
        if not 0 <= d < self.depth:
            raise ValueError(f"depth {d} out of range")
        if prefix.shape[-1] != d:
            raise ValueError(f"depth {d} needs {d} previous codes, got {prefix.shape[-1]}")
        inp = g
        if self.cfg.autoregressive and d > 0:
            emb = [self.code_embeddings[j](prefix[:, j]) for j in range(d)]
            inp = torch.cat([g, *emb], dim=-1)
        return self.code_heads[d](inp)

    def offset(self, g: torch.Tensor) -> torch.Tensor:
        out = self.offset_head(g).reshape(-1, self.horizon, self.action_dim)
        return out if self.cfg.refine else torch.zeros_like(out)


def predict_code_logits(model: CausalSkillTransformer, g, prefix, d: int) -> torch.Tensor:
    return model.code_logits(g, prefix, d)


# -- nucleus sampling ------------------------------------------------------------------


def nucleus_distribution(logits, top_p: float, temperature: float = 1.0) -> np.ndarray:
    """Tempered softmax truncated to the smallest descending prefix with mass >= ``top_p``."""
    if top_p <= 0:
        raise ValueError(f"nucleus threshold must be positive, got {top_p}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = np.asarray(logits, dtype=np.float64) / temperature
    if not np.isfinite(x).all():
        raise ValueError("non-finite logits")
    probs = np.exp(x - x.max())
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    reached = np.nonzero(cum >= top_p)[0]
    n_keep = reached[0] + 1 if len(reached) else len(order)
    out = np.zeros_like(probs)
    kept = order[:n_keep]
    out[kept] = probs[kept] / probs[kept].sum()
    return out


def nucleus_sample(logits, cfg: SamplingConfig, rng: np.random.Generator) -> int:
    probs = nucleus_distribution(logits, cfg.top_p, cfg.temperature)
    # inverse CDF: one uniform draw per sample keeps streams reproducible
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    nonzero = np.nonzero(probs)[0]
    return int(min(max(idx, nonzero[0]), nonzero[-1]))


# -- policy ------------------------------------------------------------------------------


@dataclass
class SkillPolicy:
    """A trained transformer paired with the frozen stage-1 model it decodes through."""

    cst: CausalSkillTransformer
    skills: SkillAutoencoder

    @torch.no_grad()
    def sample_codes(self, g: torch.Tensor, sampling: SamplingConfig, rngs: Sequence[np.random.Generator]):
        """Autoregressive code sampling; returns codes ``(B, D)`` and their joint log-prob."""
        b = g.shape[0]
        codes = torch.zeros(b, self.cst.depth, dtype=torch.long)
        logp = np.zeros(b)
        for d in range(self.cst.depth):
            logits = self.cst.code_logits(g, codes[:, :d], d).double().numpy()
            for i in range(b):
                k = nucleus_sample(logits[i], sampling, rngs[i])
                codes[i, d] = k
                logp[i] += float(torch.log_softmax(torch.from_numpy(logits[i]), -1)[k])
        return codes, logp

    def compose(self, codes: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        """Decoded chunk in normalized action units (unclamped)."""
        base = self.skills.decode(self.skills.stack.lookup(codes))
        return base + self.cst.offset(g)

    @torch.no_grad()
    def compose_action(self, codes: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        """Action chunk in environment units, clamped to the training range."""
        a = self.compose(codes, g).clamp(-1.0, 1.0)
        return self.skills.normalizer.denormalize(a)

    @torch.no_grad()
    def plan(self, envs, windows: np.ndarray, tasks: np.ndarray, sampling: SamplingConfig, rngs) -> np.ndarray:
        obs = torch.as_tensor(windows, dtype=torch.float32)
        g = self.cst.encode_context(obs, torch.as_tensor(tasks))
        codes, _ = self.sample_codes(g, sampling, rngs)
        return self.compose_action(codes, g).numpy()

    # -- checkpoint ---------------------------------------------------------------

    _MAGIC = b"CSTP1"
    _HEADER = struct.Struct("<5sIIIIIIIBB")

    def to_bytes(self) -> bytes:
        c = self.cst
        header = self._HEADER.pack(self._MAGIC, c.cfg.history, c.codebook_size, c.depth, c.horizon,
                                   c.cfg.obs_dim, c.action_dim, self.skills.cfg.latent_dim,
                                   int(c.cfg.autoregressive), int(c.cfg.refine))
        meta = {"config": asdict(c.cfg), "stage1_sha256": stage1_digest(self.skills)}
        return header + pack_tensors(meta, c.state_dict())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, skills: SkillAutoencoder | str | Path) -> "SkillPolicy":
        if not isinstance(skills, SkillAutoencoder):
            skills = SkillAutoencoder.load(skills)
        data = Path(path).read_bytes()
        magic, h, k, d, t, obs_dim, a_dim, m, ar, refine = cls._HEADER.unpack_from(data, 0)
        if magic != cls._MAGIC:
            raise ValueError(f"{path} is not a policy checkpoint")
        s = skills.cfg
        if (k, d, m) != (s.codebook_size, s.depth, s.latent_dim) or (t, a_dim) != (s.horizon, s.action_dim):
            raise CheckpointMismatch(
                f"policy expects K={k}, D={d}, m={m}, T={t}, A={a_dim}; quantizer has "
                f"K={s.codebook_size}, D={s.depth}, m={s.latent_dim}, T={s.horizon}, A={s.action_dim}")
        meta, tensors, _ = unpack_tensors(data, cls._HEADER.size)
        raw = meta["config"]
        raw["depth_weights"] = tuple(raw["depth_weights"])
        cfg = CSTConfig(**raw)
        cst = CausalSkillTransformer(cfg, k, d, t, a_dim)
        cst.load_state_dict(tensors)
        cst.eval()
        return cls(cst, skills)


def stage1_digest(skills: SkillAutoencoder) -> str:
    return hashlib.sha256(skills.to_bytes()).hexdigest()


# -- loss & training ------------------------------------------------------------------


def cst_loss(policy: SkillPolicy, obs, tasks, chunks, codes=None, base=None) -> dict[str, torch.Tensor]:
    """Teacher-forced code cross-entropy per depth plus the weighted offset MSE.

    ``chunks`` are normalized expert chunks. Ground-truth ``codes`` and the
    decoded ``base`` chunk are recomputed from the frozen stage-1 model when not
    supplied.
    """
    cst, cfg = policy.cst, policy.cst.cfg
    if codes is None:
        codes = policy.skills.codes_for(chunks)
    if base is None:
        with torch.no_grad():
            base = policy.skills.decode(policy.skills.stack.lookup(codes))
    g = cst.encode_context(obs, tasks)
    out: dict[str, torch.Tensor] = {}
    total = torch.zeros(())
    for d in range(cst.depth):
        ce = F.cross_entropy(cst.code_logits(g, codes[:, :d], d), codes[:, d])
        out[f"ce_d{d + 1}"] = ce
        total = total + cfg.weight_for_depth(d) * ce
    refine = (chunks - (base + cst.offset(g))).pow(2).mean()
    out["offset"] = refine
    out["total"] = total + cfg.offset_weight * refine
    return out


@dataclass
class CSTResult:
    policy: SkillPolicy
    metrics: list[dict] = field(default_factory=list)


def train_cst(skills: SkillAutoencoder, windows: np.ndarray, tasks: np.ndarray, chunks: np.ndarray,
              cfg: CSTConfig, metrics_path=None) -> CSTResult:
    """Train the transformer on ``(obs windows, task ids, raw action chunks)``; stage 1 stays frozen."""
    gen = seed_everything(cfg.seed)
    s = skills.cfg
    cst = CausalSkillTransformer(cfg, s.codebook_size, s.depth, s.horizon, s.action_dim)
    policy = SkillPolicy(cst, skills)
    skills.eval()
    for p in skills.parameters():
        p.requires_grad_(False)

    obs = torch.as_tensor(windows, dtype=torch.float32)
    task_t = torch.as_tensor(tasks, dtype=torch.long)
    target = torch.from_numpy(skills.normalizer.normalize(chunks))
    with torch.no_grad():
        codes = skills.codes_for(target)
        base = skills.decode(skills.stack.lookup(codes))

    n = len(obs)
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    opt = AdamW(cst.parameters(), AdamWConfig(
        lr=cfg.lr, weight_decay=cfg.weight_decay,
        warmup_steps=cfg.warmup_epochs * steps_per_epoch, total_steps=cfg.epochs * steps_per_epoch))
    result = CSTResult(policy)
    for epoch in range(1, cfg.epochs + 1):
        cst.train()
        perm = torch.randperm(n, generator=gen)
        sums: dict[str, float] = {}
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch_obs = obs[idx]
            if cfg.obs_noise > 0:
                batch_obs = batch_obs + cfg.obs_noise * torch.randn(batch_obs.shape, generator=gen)
            losses = cst_loss(policy, batch_obs, task_t[idx], target[idx], codes[idx], base[idx])
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v.item() * len(idx) / n
        result.metrics.append({"epoch": epoch, **sums})
        if epoch == 1 or epoch % 25 == 0 or epoch == cfg.epochs:
            log.info("cst epoch %d %s", epoch, {k: round(v, 5) for k, v in sums.items()})
    cst.eval()
    if metrics_path is not None:
        fields = list(result.metrics[0])
        with open(metrics_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for row in result.metrics:
                w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
    return result


# -- rollouts ----------------------------------------------------------------------------


class Planner(Protocol):
    def plan(self, envs, windows: np.ndarray, tasks: np.ndarray, sampling: SamplingConfig, rngs) -> np.ndarray:
        ...


class ExpertPlanner:
    """Scripted expert that plans a chunk by simulating a copy of each env."""

    def __init__(self, horizon: int = 8):
        self.horizon = horizon

    def plan(self, envs, windows, tasks, sampling, rngs) -> np.ndarray:
        import copy

        out = np.zeros((len(envs), self.horizon, 2))
        for i, env in enumerate(envs):
            sim = copy.deepcopy(env)
            for t in range(self.horizon):
                if sim.done:
                    break
                out[i, t] = scripted_expert(sim)
                sim.step(out[i, t])
        return out


@dataclass
class EpisodeRecord:
    task_id: int
    seed: int
    observations: np.ndarray
    actions: np.ndarray
    success: bool
    stages_completed: int
    n_stages: int


def rollout_batch(planner: Planner, task_ids: Sequence[int], env_seeds: Sequence[int], sampling: SamplingConfig,
                  history: int = 10, replan_every: int = 8, horizon: int | None = None) -> list[EpisodeRecord]:
    """Run several independent episodes in lock-step, re-planning every ``replan_every`` steps."""
    envs = [PointMassEnv(t) if horizon is None else PointMassEnv(t, horizon=horizon) for t in task_ids]
    first = [env.reset(s) for env, s in zip(envs, env_seeds)]
    rngs = [np.random.default_rng([sampling.seed, t, s]) for t, s in zip(task_ids, env_seeds)]
    obs_hist = [[o] for o in first]
    act_hist: list[list[np.ndarray]] = [[] for _ in envs]
    tasks = np.asarray(task_ids, dtype=np.int64)
    while not all(env.done for env in envs):
        live = [i for i, env in enumerate(envs) if not env.done]
        windows = np.stack([_window(obs_hist[i], history) for i in live])
        chunks = planner.plan([envs[i] for i in live], windows, tasks[live], sampling, [rngs[i] for i in live])
        if replan_every < 1 or replan_every > chunks.shape[1]:
            raise ValueError(f"replan_every must be in [1, {chunks.shape[1]}]")
        for j, i in enumerate(live):
            env = envs[i]
            for t in range(replan_every):
                if env.done:
                    break
                obs, _ = env.step(chunks[j, t])
                act_hist[i].append(np.clip(chunks[j, t], -1, 1))
                obs_hist[i].append(obs)
    records = []
    for i, env in enumerate(envs):
        records.append(EpisodeRecord(int(task_ids[i]), int(env_seeds[i]), np.asarray(obs_hist[i]),
                                     np.asarray(act_hist[i]), env.success, env.stage, env.n_stages))
    return records


def rollout(planner: Planner, task_id: int, env_seed: int, sampling: SamplingConfig,
            history: int = 10, replan_every: int = 8) -> EpisodeRecord:
    return rollout_batch(planner, [task_id], [env_seed], sampling, history, replan_every)[0]


def _window(history_obs: list[np.ndarray], h: int) -> np.ndarray:
    recent = history_obs[-h:]
    pad = [recent[0]] * (h - len(recent))
    return np.stack(pad + recent)
