"""Reverse-mode differentiation helpers.

Graph construction and the backward sweep are delegated to ``torch.autograd``;
this module adds the pieces the rest of the package relies on: a checked
``backward`` that returns a gradient map, an independent central-difference
oracle, and a functional AdamW with linear warmup + cosine decay.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch

ParamMap = Mapping[str, torch.Tensor]


class NonFiniteError(FloatingPointError):
    """A NaN/Inf showed up in a forward value or a gradient."""


def _as_named(params: ParamMap | Sequence[torch.Tensor]) -> dict[str, torch.Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {str(i): p for i, p in enumerate(params)}


def backward(loss: torch.Tensor, params: ParamMap | Sequence[torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``loss`` w.r.t. every leaf in ``params``.

    Leaves the loss does not depend on get an all-zero gradient. A constant
    loss (no graph) yields zeros everywhere.
    """
    named = _as_named(params)
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NonFiniteError(f"loss is not finite ({loss.item()})")
    leaves = list(named.values())
    if loss.grad_fn is None or not leaves:
        return {k: torch.zeros_like(v) for k, v in named.items()}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with torch.autograd.detect_anomaly(check_nan=True):
                grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    except RuntimeError as exc:
        # anomaly mode names the offending backward function in the message
        if "nan" in str(exc).lower():
            raise NonFiniteError(str(exc).splitlines()[0]) from exc
        raise
    out = {}
    for (k, v), g in zip(named.items(), grads):
        out[k] = torch.zeros_like(v) if g is None else g
    return out


def finite_diff_check(
    f: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    params: ParamMap | Sequence[torch.Tensor],
    eps: float = 1e-6,
    analytic: Mapping[str, torch.Tensor] | None = None,
    floor: float = 1e-3,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps a dict of tensors to a scalar. Every coordinate of every
    parameter is perturbed, so keep the problems small. Error per coordinate
    is ``|a - c| / max(|a| + |c|, floor * max|a|)``: coordinates whose
    gradient is tiny next to the largest one are judged on that larger scale,
    otherwise round-off in near-zero entries dominates the maximum.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-8, 1e-4], got {eps}")
    base = {k: v.detach().clone() for k, v in _as_named(params).items()}

    def evaluate(values: dict[str, torch.Tensor]) -> float:
        with torch.no_grad():
            return float(f(values))

    first, second = evaluate(base), evaluate(base)
    if first != second:
        raise RuntimeError(f"f is not deterministic: {first!r} != {second!r}")

    if analytic is None:
        leaves = {k: v.clone().requires_grad_(True) for k, v in base.items()}
        analytic = backward(f(leaves), leaves)

    scale = max((float(a.detach().abs().max()) for a in analytic.values() if a.numel()), default=0.0)
    denom_floor = max(floor * scale, 1e-12)
    worst = 0.0
    for name, value in base.items():
        flat = value.reshape(-1)
        a_flat = analytic[name].detach().reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = evaluate(base)
            flat[i] = orig - eps
            down = evaluate(base)
            flat[i] = orig
            c = (up - down) / (2 * eps)
            a = a_flat[i].item()
            worst = max(worst, abs(a - c) / max(abs(a) + abs(c), denom_floor))
    return worst


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    warmup_steps: int = 0
    total_steps: int = 0  # 0 disables cosine decay


@dataclass
class OptimizerState:
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)
    step: int = 0


def scheduled_lr(step: int, cfg: AdamWConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to zero at ``total_steps``."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.total_steps <= cfg.warmup_steps:
        return cfg.lr
    progress = min(1.0, (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps))
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: OptimizerState,
    cfg: AdamWConfig,
) -> float:
    """One decoupled-weight-decay Adam update, in place. Returns the lr used."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.exp_avg):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)} grad {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteError("non-finite gradient passed to adamw_step")

    state.step += 1
    lr = scheduled_lr(state.step, cfg)
    bc1 = 1.0 - cfg.beta1**state.step
    bc2 = 1.0 - cfg.beta2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        p.mul_(1.0 - lr * cfg.weight_decay)
        m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
        denom = (v / bc2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return lr


class AdamW:
    """Thin stateful wrapper so training loops read like the usual torch ones."""

    def __init__(self, params, cfg: AdamWConfig):
        self.params = [p for p in params if p.requires_grad]
        self.cfg = cfg
        self.state = OptimizerState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in self.params]
        return adamw_step(self.params, grads, self.state, self.cfg)
