"""Budget-driven threshold learning, freeze, recovery and the static-rank baseline."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import ndcore as nd
from .data import Dataset, iter_batches
from .lowrank import ZERO_EPS, DecomposedLinear, DenseLinear, merge, truncated
from .losses_opt import VARIANTS, AdamW, ParamGroup, cross_entropy, total_loss
from .models import Model, parameters
from .ndcore import ContractError
from .softthresh import SoftThresholdParams, soft_threshold_forward

logger = logging.getLogger(__name__)

RECOMMENDED = {"batch_size": 32, "base_lr": 2e-5, "threshold_lr": (1e-2, 1e-3), "gamma": (0.001, 0.01, 0.1)}
GAMMA_GRID = RECOMMENDED["gamma"]


class BudgetUnreachable(RuntimeError):
    pass


@dataclass
class TrainConfig:
    cr: Optional[float] = 0.5
    target_params: Optional[int] = None
    gamma: float = 0.01
    variant: str = "adaptive"
    base_lr: float = 1e-3
    threshold_lr: float = 1e-2
    weight_decay: float = 0.01
    batch_size: int = 32
    n_recovery_epochs: int = 2
    max_budget_steps: int = 2000
    seed: int = 0
    eval_every: int = 0
    eps: float = ZERO_EPS
    log_sigmas: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.gamma < 0:
            raise ContractError("gamma must be non-negative")
        if self.cr is not None and not 0.0 <= self.cr < 1.0:
            raise ContractError(f"cr must lie in [0, 1), got {self.cr}")

    def target(self, dense_total: int) -> int:
        """Parameter budget P over the compressible layers."""
        if self.target_params is not None:
            p = int(self.target_params)
        elif self.cr is not None:
            p = int(round((1.0 - self.cr) * dense_total))
        else:
            raise ContractError("either cr or target_params must be set")
        if not 0 < p <= dense_total:
            raise ContractError(f"target parameter count {p} outside (0, {dense_total}]")
        return p


@dataclass
class RunTelemetry:
    layers: dict[str, dict] = field(default_factory=dict)
    target_params: int = 0
    dense_params: int = 0
    eps: float = ZERO_EPS
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    freeze_step: Optional[int] = None

    def header(self) -> dict:
        return {
            "record": "header",
            "layers": self.layers,
            "target_params": self.target_params,
            "dense_params": self.dense_params,
            "eps": self.eps,
        }

    def records(self) -> Iterator[dict]:
        yield self.header()
        yield from self.steps
        yield from self.epochs
        yield {"record": "freeze", "step": self.freeze_step}


def recompute_live_params(header: dict, record: dict) -> int:
    """Live compressed parameter count from a step record's alphas and sigmas."""
    total = 0
    for path, meta in header["layers"].items():
        p = SoftThresholdParams(record["alphas"][path], meta["s"], meta["c"])
        th = soft_threshold_forward(np.asarray(record["sigmas"][path]), p)
        k = int(np.count_nonzero(np.abs(th) > header["eps"]))
        total += k * (meta["M"] + meta["N"])
    return total


# ---------------------------------------------------------------- metrics


def predict(model: Model, ds: Dataset, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    if len(ds) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    max_len = getattr(getattr(model, "cfg", None), "max_seq_len", None)
    logits = []
    with nd.no_grad():
        for ids, _ in iter_batches(ds, batch_size, None, max_len):
            logits.append(model(ids).data)
    out = np.concatenate(logits)
    return out.argmax(axis=1), out


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.size == 0:
        raise ContractError("accuracy of an empty prediction set")
    return float(np.mean(pred == labels))


def f1_score(pred, labels, positive: int = 1) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    tp = np.sum((pred == positive) & (labels == positive))
    fp = np.sum((pred == positive) & (labels != positive))
    fn = np.sum((pred != positive) & (labels == positive))
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def mcc(pred, labels, n_classes: Optional[int] = None) -> float:
    """Matthews correlation (multiclass form; equals the usual one for two classes)."""
    pred, labels = np.asarray(pred, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    k = n_classes or int(max(pred.max(initial=0), labels.max(initial=0))) + 1
    conf = np.zeros((k, k))
    np.add.at(conf, (labels, pred), 1.0)
    t, p = conf.sum(axis=1), conf.sum(axis=0)
    c, s = np.trace(conf), conf.sum()
    denom = np.sqrt((s * s - p @ p) * (s * s - t @ t))
    return float((c * s - t @ p) / denom) if denom else 0.0


def evaluate(model: Model, ds: Dataset) -> float:
    pred, _ = predict(model, ds)
    return accuracy(pred, ds.labels)


# ---------------------------------------------------------------- optimisation plumbing


_DECAY_NAMES = ("W", "U", "V", "U_k", "VS_k")


def build_optimizer(model: Model, base_lr: float, threshold_lr: float, weight_decay: float) -> AdamW:
    decay, plain, thresholds = [], [], []
    for name, t in parameters(model).items():
        if not t.requires_grad:
            continue
        leaf = name.rsplit("/", 1)[-1]
        if leaf == "alpha":
            thresholds.append(t)
        elif leaf in _DECAY_NAMES:
            decay.append(t)
        else:
            plain.append(t)
    return AdamW(
        [
            ParamGroup(decay, base_lr, weight_decay, "decay"),
            ParamGroup(plain, base_lr, 0.0, "no_decay"),
            ParamGroup(thresholds, threshold_lr, 0.0, "threshold", clamp_min=0.0),
        ]
    )


def _batches(ds: Dataset, batch_size: int, rng: np.random.Generator, max_len) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    while True:
        yield from iter_batches(ds, batch_size, rng, max_len)


def _max_len(model: Model):
    return getattr(getattr(model, "cfg", None), "max_seq_len", None)


def train_plain(model: Model, train: Dataset, steps: int, lr: float, batch_size: int, seed: int, weight_decay: float = 0.01) -> list[float]:
    """Accuracy-loss-only AdamW training for a fixed number of steps."""
    opt = build_optimizer(model, lr, 0.0, weight_decay)
    rng = np.random.default_rng(seed)
    it = _batches(train, batch_size, rng, _max_len(model))
    losses = []
    for _ in range(steps):
        ids, y = next(it)
        opt.zero_grad()
        loss = cross_entropy(model(ids), y)
        nd.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses


def pretrain(model: Model, train: Dataset, epochs: int, lr: float = 1e-3, batch_size: int = 32, seed: int = 0) -> list[float]:
    steps = epochs * -(-len(train) // batch_size)
    return train_plain(model, train, steps, lr, batch_size, seed)


# ---------------------------------------------------------------- adaptive fine-tuning


def finetune(model: Model, train: Dataset, cfg: TrainConfig, val: Optional[Dataset] = None) -> tuple[Model, RunTelemetry]:
    """Learn per-layer thresholds until the parameter budget is met, freeze them, then recover.

    Phase 1 cycles shuffled mini-batches and checks the live parameter count
    after every optimizer step; the first time it is at or below the target
    the threshold group's learning rate is set to zero. Phase 2 runs
    ``n_recovery_epochs`` epochs of the same total loss.
    """
    reg = model.registry
    layers = reg.decomposed()
    if not layers:
        raise ContractError("finetune needs at least one decomposed layer; call replace_linears first")
    if any(float(l.alpha.data) != 0.0 for _, l in layers):
        logger.warning("finetune started with non-zero thresholds")

    tel = RunTelemetry(
        layers={p: {"M": l.shape[0], "N": l.shape[1], "s": l.s, "c": l.c} for p, l in layers},
        dense_params=reg.dense_total(),
        eps=cfg.eps,
    )
    target = cfg.target(tel.dense_params)
    tel.target_params = target
    alphas = [l.alpha for _, l in layers]
    opt = build_optimizer(model, cfg.base_lr, cfg.threshold_lr, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    max_len = _max_len(model)

    def live() -> int:
        return reg.compressed_total("merged", cfg.eps)

    def record(step: int, phase: str, parts=None) -> int:
        count = live()
        rec = {
            "record": "step",
            "step": step,
            "phase": phase,
            "l_acc": None if parts is None else parts.l_acc,
            "l_comp": None if parts is None else parts.compression_term,
            "l_tot": None if parts is None else parts.l_tot,
            "alphas": {p: float(l.alpha.data) for p, l in layers},
            "ranks": {p: l.rank(cfg.eps) for p, l in layers},
            "live_params": count,
        }
        if cfg.log_sigmas:
            rec["sigmas"] = {p: l.sigma.data.tolist() for p, l in layers}
        tel.steps.append(rec)
        return count

    def one_step(ids, y):
        opt.zero_grad()
        parts = total_loss(cross_entropy(model(ids), y), alphas, cfg.gamma, cfg.variant)
        nd.backward(parts.total)
        opt.step()
        return parts

    def freeze(step: int) -> None:
        opt.group("threshold").lr = 0.0
        for _, l in layers:
            l.freeze()
        tel.freeze_step = step
        logger.info("budget reached at step %d: %d <= %d params", step, tel.steps[-1]["live_params"], target)

    step = 0
    it = _batches(train, cfg.batch_size, rng, max_len)
    # A budget at or above the dense size requests no compression at all, even
    # though full-rank factors count k*(M+N) > M*N.
    if record(0, "budget") <= target or target >= tel.dense_params:
        freeze(0)
    while tel.freeze_step is None:
        if step >= cfg.max_budget_steps:
            raise BudgetUnreachable(
                f"parameter budget {target} not reached within {cfg.max_budget_steps} steps "
                f"(live count {tel.steps[-1]['live_params']}); raise gamma or threshold_lr"
            )
        parts = one_step(*next(it))
        step += 1
        if record(step, "budget", parts) <= target:
            freeze(step)
        if cfg.eval_every and val is not None and step % cfg.eval_every == 0:
            tel.epochs.append({"record": "eval", "step": step, "phase": "budget", "accuracy": evaluate(model, val)})

    if val is not None:
        tel.epochs.append({"record": "eval", "step": step, "phase": "freeze", "accuracy": evaluate(model, val)})
    for epoch in range(cfg.n_recovery_epochs):
        for ids, y in iter_batches(train, cfg.batch_size, rng, max_len):
            parts = one_step(ids, y)
            step += 1
            record(step, "recover", parts)
        if val is not None:
            tel.epochs.append({"record": "eval", "step": step, "phase": "recover", "epoch": epoch, "accuracy": evaluate(model, val)})
    return model, tel


def merge_model(model: Model, eps: float = ZERO_EPS) -> Model:
    """Copy of ``model`` with every decomposed layer collapsed to its two-factor form."""
    out = copy.deepcopy(model)
    for path, layer in out.registry.decomposed():
        out.registry[path] = merge(layer, eps)
    return out


# ---------------------------------------------------------------- static baseline


@dataclass
class StaticBaselineResult:
    k: int
    params: int
    budget: int
    gap: int
    steps: int
    metric: float

    def to_dict(self) -> dict:
        return asdict(self)


def uniform_rank(shapes: list[tuple[int, int]], budget: int) -> int:
    """Largest uniform k with sum k*(M+N) <= budget (and k <= every layer's rank)."""
    per_rank = sum(m + n for m, n in shapes)
    k = min(budget // per_rank, min(min(s) for s in shapes))
    return max(int(k), 0)


def static_rank_baseline(
    dense_model: Model,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    budget: int,
    steps: int,
    which: Optional[list[str]] = None,
) -> tuple[Model, float, StaticBaselineResult]:
    """Hard uniform-rank truncated SVD, fine-tuned with the accuracy loss only."""
    model = copy.deepcopy(dense_model)
    reg = model.registry
    paths = list(which) if which is not None else list(reg.compressible)
    for p in paths:
        if not isinstance(reg[p], DenseLinear):
            raise ContractError(f"static baseline needs dense layers; {p} is {reg[p].kind}")
    shapes = [reg[p].shape for p in paths]
    dense_total = sum(m * n for m, n in shapes)
    if budget >= dense_total:
        # no compression requested: the baseline is plain fine-tuning at full rank
        k, used = max(min(s) for s in shapes), dense_total
    else:
        k = uniform_rank(shapes, budget)
        for p in paths:
            layer = reg[p]
            reg[p] = truncated(layer.W.data, k, None if layer.bias is None else layer.bias.data)
        used = k * sum(m + n for m, n in shapes)
    reg.compressible = paths
    if used != budget:
        logger.info("static baseline uses k=%d: %d params against a budget of %d", k, used, budget)
    train_plain(model, train, steps, cfg.base_lr, cfg.batch_size, cfg.seed, cfg.weight_decay)
    metric = evaluate(model, val)
    return model, metric, StaticBaselineResult(k, used, budget, budget - used, steps, metric)
