"""End-to-end runs: data -> dense pretraining -> decompose -> finetune -> merge -> report."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Optional

from .config import ConfigError, resolve
from .data import DataError, Dataset, csv_load, load_interchange, synth_generate, train_val_split
from .models import BowClassifier, Encoder, EncoderConfig, Model, replace_linears
from .report import CompressionReport, compression_report
from .trainer import (
    RunTelemetry,
    StaticBaselineResult,
    TrainConfig,
    evaluate,
    finetune,
    merge_model,
    pretrain,
    static_rank_baseline,
)

logger = logging.getLogger(__name__)


def build_data(cfg: dict[str, Any]) -> tuple[Dataset, Dataset]:
    kind = cfg["data.kind"]
    seed = cfg["seed"]
    if kind == "synth":
        ds = synth_generate(
            seed, cfg["data.n"], cfg["data.seq_len"], cfg["data.vocab_size"], cfg["data.n_classes"], cfg["data.difficulty"]
        )
    elif kind == "csv":
        if not cfg["data.path"]:
            raise DataError("data.path is required for data.kind = csv")
        ds = csv_load(cfg["data.path"], cfg["data.text_column"], cfg["data.label_column"], cfg["data.vocab_cap"])
    elif kind == "interchange":
        ds = load_interchange(cfg["data.path"])
    else:
        raise ConfigError(f"unknown data.kind {kind!r}")
    if len(ds) < 2:
        raise DataError("dataset needs at least two examples")
    return train_val_split(ds, cfg["data.val_fraction"], seed)


def build_model(cfg: dict[str, Any], train: Dataset) -> Model:
    kind = cfg["model.kind"]
    if kind == "encoder":
        max_len = max(cfg["data.seq_len"], 1)
        if cfg["data.kind"] != "synth":
            max_len = max(max(len(ids) for ids, _ in train.examples), 1)
            max_len = min(max_len, cfg["data.seq_len"]) if cfg["data.seq_len"] else max_len
        enc = EncoderConfig(
            n_blocks=cfg["model.n_blocks"],
            d_model=cfg["model.d_model"],
            n_heads=cfg["model.n_heads"],
            d_ff=cfg["model.d_ff"],
            vocab_size=train.vocab_size,
            max_seq_len=max_len,
            n_classes=train.n_classes,
            norm=cfg["model.norm"],
        )
        return Encoder(enc, seed=cfg["seed"])
    if kind == "bow_mlp":
        return BowClassifier(train.vocab_size, cfg["model.hidden"], train.n_classes, seed=cfg["seed"])
    raise ConfigError(f"unknown model.kind {kind!r}")


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        cr=cfg["train.cr"],
        target_params=cfg["train.target_params"],
        gamma=cfg["train.gamma"],
        variant=cfg["train.variant"],
        base_lr=cfg["train.base_lr"],
        threshold_lr=cfg["train.threshold_lr"],
        weight_decay=cfg["train.weight_decay"],
        batch_size=cfg["train.batch_size"],
        n_recovery_epochs=cfg["train.n_recovery_epochs"],
        max_budget_steps=cfg["train.max_budget_steps"],
        seed=cfg["seed"],
        eval_every=cfg["train.eval_every"],
        eps=cfg["train.eps"],
        log_sigmas=cfg["train.log_sigmas"],
    )


@dataclass
class RunResult:
    config: dict[str, Any]
    train: Dataset
    val: Dataset
    dense: Model
    frozen: Model
    merged: Model
    telemetry: RunTelemetry
    report: CompressionReport
    dense_metric: float
    frozen_metric: float
    merged_metric: float
    baseline: Optional[StaticBaselineResult] = None
    extra: dict = field(default_factory=dict)

    @property
    def achieved_cr(self) -> float:
        return self.report.cr

    @property
    def total_steps(self) -> int:
        return self.telemetry.steps[-1]["step"]


def pretrained_dense(cfg: dict[str, Any]) -> tuple[Model, Dataset, Dataset]:
    train, val = build_data(cfg)
    model = build_model(cfg, train)
    if cfg["pretrain.epochs"] > 0:
        pretrain(model, train, cfg["pretrain.epochs"], cfg["pretrain.lr"], cfg["train.batch_size"], cfg["seed"])
    return model, train, val


def run_compression(cfg: dict[str, Any], dense: Optional[tuple[Model, Dataset, Dataset]] = None) -> RunResult:
    """Run the full pipeline for one resolved config.

    ``dense`` may carry an already pretrained (model, train, val) triple so
    that sweeps over the compression ratio share one pretraining run per seed.
    """
    cfg = resolve(cfg)
    if dense is None:
        dense = pretrained_dense(cfg)
    dense_model, train, val = dense
    dense_metric = evaluate(dense_model, val)

    model = copy.deepcopy(dense_model)
    replace_linears(model, cfg["compress.which"], cfg["compress.sharpness"], cfg["compress.calibrate"])
    tcfg = train_config(cfg)
    model, tel = finetune(model, train, tcfg, val)
    frozen_metric = evaluate(model, val)
    merged = merge_model(model, tcfg.eps)
    merged_metric = evaluate(merged, val)
    seq_len = getattr(getattr(merged, "cfg", None), "max_seq_len", 1)
    rep = compression_report(merged, seq_len, tcfg.eps)

    baseline = None
    if cfg["baseline.static"]:
        budget = tel.steps[tel.freeze_step]["live_params"]
        _, _, baseline = static_rank_baseline(
            dense_model, train, val, tcfg, budget, tel.steps[-1]["step"], list(model.registry.compressible)
        )
    return RunResult(cfg, train, val, dense_model, model, merged, tel, rep, dense_metric, frozen_metric, merged_metric, baseline)
