"""Task and compression losses, and AdamW with parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ndcore as nd
from .ndcore import ContractError, Tensor, _node

VARIANTS = ("adaptive", "linear")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true classes."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ContractError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return _node(np.asarray(loss), (logits,), backward, "cross_entropy")


def _stack(alphas: Sequence[Tensor]) -> Tensor:
    parts = [nd.reshape(a, (1,)) for a in alphas]
    if not parts:
        return Tensor(np.zeros(0))
    data = np.concatenate([p.data for p in parts])
    return _node(data, parts, lambda g: tuple(g[i : i + 1] for i in range(len(parts))), "stack")


def compression_loss_linear(alphas: Sequence[Tensor]) -> Tensor:
    """-sum(alpha): constant pressure on every threshold."""
    return nd.neg(nd.sum(_stack(alphas)))


def compression_loss_adaptive(alphas: Sequence[Tensor]) -> Tensor:
    """sum(exp(-alpha)): pressure that fades as thresholds grow."""
    return nd.sum(nd.exp(nd.neg(_stack(alphas))))


@dataclass
class LossBreakdown:
    l_acc: float
    l_cmp: float
    l_acmp: float
    gamma: float
    variant: str
    l_tot: float
    total: Tensor = field(repr=False)

    @property
    def compression_term(self) -> float:
        return self.l_acmp if self.variant == "adaptive" else self.l_cmp


def total_loss(l_acc: Tensor, alphas: Sequence[Tensor], gamma: float, variant: str = "adaptive") -> LossBreakdown:
    if variant not in VARIANTS:
        raise ContractError(f"unknown compression variant {variant!r}; expected one of {VARIANTS}")
    if gamma < 0:
        raise ContractError(f"gamma must be non-negative, got {gamma}")
    lin = compression_loss_linear(alphas)
    ada = compression_loss_adaptive(alphas)
    chosen = ada if variant == "adaptive" else lin
    tot = l_acc + nd.scale(chosen, gamma)
    return LossBreakdown(
        l_acc=l_acc.item(),
        l_cmp=lin.item(),
        l_acmp=ada.item(),
        gamma=gamma,
        variant=variant,
        l_tot=tot.item(),
        total=tot,
    )


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    weight_decay: float = 0.0
    name: str = ""
    clamp_min: Optional[float] = None


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, groups: Iterable[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = list(groups)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g.params]

    def zero_grad(self) -> None:
        nd.zero_grad(self.params())

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for group in self.groups:
            for p in group.params:
                if p.grad is None:
                    continue
                key = id(p)
                m = self.m.get(key)
                if m is None:
                    m = self.m[key] = np.zeros_like(p.data)
                    self.v[key] = np.zeros_like(p.data)
                v = self.v[key]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad * p.grad
                if group.lr == 0.0:
                    continue
                if group.weight_decay:
                    p.data *= 1.0 - group.lr * group.weight_decay
                p.data -= group.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                if group.clamp_min is not None:
                    np.maximum(p.data, group.clamp_min, out=p.data)


def adamw_step(state: AdamW) -> None:
    state.step()
