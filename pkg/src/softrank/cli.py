"""softrank command line: compress, inspect, eval, sweep, merge.

Exit statuses: 0 success, 2 config error, 3 budget unreachable, 4 data error,
5 checkpoint error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from . import config as config_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError
from .data import DataError, load_interchange, save_interchange
from .experiments import RunResult, pretrained_dense, run_compression
from .ndcore import ContractError, DimensionError
from .report import (
    TELEMETRY_SCHEMA,
    compression_report,
    layers_csv,
    loss_curve_csv,
    params_csv,
    ranks_csv,
    sweep_csv,
    sweep_summary_csv,
)
from .trainer import BudgetUnreachable, accuracy, f1_score, mcc, merge_model, predict

logger = logging.getLogger("softrank")

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
MANIFEST_SCHEMA = "softrank.manifest/1"
EVAL_SCHEMA = "softrank.eval/1"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump_json(path: Path, doc: Any) -> None:
    _write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_run_config(path, seed: Optional[int] = None, cr: Optional[float] = None) -> dict[str, Any]:
    cfg = config_mod.load(path)
    if seed is not None:
        cfg["seed"] = seed
    if cr is not None:
        cfg["train.cr"] = cr
    return config_mod.resolve(cfg)


def write_run(res: RunResult, out_dir: Path, started: str) -> dict:
    """Write checkpoints, telemetry, reports and the manifest of one compress run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.frozen, out_dir / "frozen.slm")
    save_checkpoint(res.merged, out_dir / "model.slm")
    save_interchange(res.val, out_dir / "val.tsv")

    with (out_dir / "telemetry.jsonl").open("w", encoding="utf-8") as fh:
        for rec in res.telemetry.records():
            if rec.get("record") == "header":
                rec = {"schema": TELEMETRY_SCHEMA, **rec}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    report = res.report.to_dict()
    report.update(
        {
            "metrics": {"dense": res.dense_metric, "frozen": res.frozen_metric, "merged": res.merged_metric},
            "freeze_step": res.telemetry.freeze_step,
            "target_params": res.telemetry.target_params,
            "total_steps": res.total_steps,
            "static_baseline": None if res.baseline is None else res.baseline.to_dict(),
        }
    )
    _dump_json(out_dir / "report.json", report)
    _write(out_dir / "layers.csv", layers_csv(res.report))
    _write(out_dir / "ranks.csv", ranks_csv(res.report))
    _write(out_dir / "params.csv", params_csv(res.report, res.merged_metric, res.dense_metric))
    _write(out_dir / "loss_curve.csv", loss_curve_csv(res.telemetry.steps))

    manifest = {
        "schema": MANIFEST_SCHEMA,
        "run_id": config_mod.run_id(res.config),
        "config": res.config,
        "seed": res.config["seed"],
        "started": started,
        "finished": _now(),
        "achieved_cr": res.achieved_cr,
        "final_metric": res.merged_metric,
        "ranks": res.report.ranks(),
    }
    _dump_json(out_dir / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------- commands


def cmd_compress(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.cr)
    out_dir = Path(args.out_dir or f"runs/{config_mod.run_id(cfg)}")
    started = _now()
    res = run_compression(cfg)
    man = write_run(res, out_dir, started)
    print(
        f"run {man['run_id']}: achieved CR {res.achieved_cr:.4f} "
        f"(target params {res.telemetry.target_params}, frozen at step {res.telemetry.freeze_step}); "
        f"accuracy dense {res.dense_metric:.4f} -> merged {res.merged_metric:.4f}; outputs in {out_dir}"
    )
    if res.baseline is not None:
        print(f"static baseline k={res.baseline.k}: accuracy {res.baseline.metric:.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    seq_len = args.seq_len or getattr(getattr(model, "cfg", None), "max_seq_len", 1)
    rep = compression_report(model, seq_len)
    text = layers_csv(rep)
    if args.out_dir:
        out = Path(args.out_dir)
        _write(out / "inspect.csv", text)
        _write(out / "ranks.csv", ranks_csv(rep))
        _dump_json(out / "inspect.json", rep.to_dict())
    sys.stdout.write(text)
    t = rep.totals()
    print(f"# compressible params {t['params_merged']} / {t['params_dense']} dense, CR {t['cr']:.4f}, MAC ratio {t['mac_ratio']:.4f}")
    return EXIT_OK


def _check_topology(model, ds) -> None:
    cfg = getattr(model, "cfg", None)
    vocab = cfg.vocab_size if cfg is not None else getattr(model, "vocab_size", None)
    n_classes = model.registry["head"].shape[0]
    if vocab is not None and ds.vocab_size > vocab:
        raise DimensionError(f"dataset vocab_size {ds.vocab_size} exceeds checkpoint vocab_size {vocab}")
    if ds.n_classes != n_classes:
        raise DimensionError(f"dataset has {ds.n_classes} classes, checkpoint head has {n_classes}")


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_interchange(args.data)
    if len(ds) == 0:
        raise DataError(f"{args.data}: empty evaluation set")
    _check_topology(model, ds)
    pred, _ = predict(model, ds)
    labels = ds.labels
    record = {
        "schema": EVAL_SCHEMA,
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "n": len(ds),
        "accuracy": accuracy(pred, labels),
        "mcc": mcc(pred, labels, ds.n_classes),
        "f1": f1_score(pred, labels) if ds.n_classes == 2 else None,
    }
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    _dump_json(out / f"eval_{Path(args.checkpoint).stem}.json", record)
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def cmd_merge(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not any(True for _ in model.registry.decomposed()):
        raise ContractError("checkpoint has no decomposed layers to merge")
    for _, layer in model.registry.decomposed():
        if not layer.frozen:
            raise ContractError("checkpoint thresholds are not frozen; finish fine-tuning before merging")
    merged = merge_model(model)
    out = Path(args.out) if args.out else Path(args.out_dir or Path(args.checkpoint).parent) / "merged.slm"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(merged, out)
    rep = compression_report(merged)
    print(f"merged checkpoint written to {out}; CR {rep.cr:.4f}")
    return EXIT_OK


def _sweep_child(job: tuple[dict, str, float, int]) -> dict:
    cfg, out_dir, cr, seed = job
    row = {"cr_requested": cr, "seed": seed, "out_dir": out_dir}
    try:
        started = _now()
        dense = _pretrained_cache(cfg)
        run_cfg = dict(cfg, **{"train.cr": cr})
        res = run_compression(run_cfg, dense)
        write_run(res, Path(out_dir), started)
        row.update(status="ok", cr_achieved=res.achieved_cr, metric=res.merged_metric, mac_ratio=res.report.mac_ratio)
    except Exception as exc:  # child failures are recorded, the sweep goes on
        logger.error("sweep run cr=%s seed=%s failed: %s", cr, seed, exc)
        row.update(status=f"error: {type(exc).__name__}: {exc}")
    return row


_PRETRAINED: dict[str, tuple] = {}


def _pretrained_cache(cfg: dict) -> tuple:
    key = config_mod.dumps({k: v for k, v in cfg.items() if not k.startswith(("train.", "sweep.", "compress.", "baseline."))})
    if key not in _PRETRAINED:
        _PRETRAINED[key] = pretrained_dense(cfg)
    return copy.deepcopy(_PRETRAINED[key])


def run_sweep(cfg: dict, cr_list: list[float], out_dir: Path, jobs: int = 1) -> list[dict]:
    for cr in cr_list:
        if not 0.0 < cr <= 1.0:
            raise ConfigError(f"sweep CR {cr} outside (0, 1]")
    work = []
    for s in range(cfg["sweep.n_seeds"]):
        seed = cfg["seed"] + s
        for cr in cr_list:
            child = dict(cfg, seed=seed)
            work.append((child, str(out_dir / f"cr{cr:g}_seed{seed}"), cr, seed))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_child, work))
    else:
        rows = [_sweep_child(job) for job in work]
    _write(out_dir / "sweep.csv", sweep_csv(rows))
    _write(out_dir / "summary.csv", sweep_summary_csv(rows))
    return rows


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    cr_list = config_mod.SCHEMA["sweep.cr_list"][0](args.cr) if args.cr else cfg["sweep.cr_list"]
    out_dir = Path(args.out_dir or f"runs/sweep_{config_mod.run_id(cfg)}")
    rows = run_sweep(cfg, cr_list, out_dir, args.jobs)
    sys.stdout.write((out_dir / "summary.csv").read_text())
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        print(f"# {len(failed)} of {len(rows)} runs failed; see sweep.csv")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softrank", description="Adaptive low-rank compression with learnable soft thresholds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compress", help="decompose, fine-tune to a parameter budget, merge")
    c.add_argument("--config", required=True)
    c.add_argument("--out-dir")
    c.add_argument("--seed", type=int)
    c.add_argument("--cr", type=float)
    c.set_defaults(func=cmd_compress)

    i = sub.add_parser("inspect", help="per-layer rank / parameter / MAC table of a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out-dir")
    i.add_argument("--seq-len", type=int)
    i.set_defaults(func=cmd_inspect)

    e = sub.add_parser("eval", help="evaluate a checkpoint on an interchange dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="compress + eval over several CRs and seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--cr", help="comma-separated CR list, e.g. 0.25,0.5,0.75")
    s.add_argument("--out-dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("merge", help="merge a frozen decomposed checkpoint into two-factor form")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out-dir")
    m.add_argument("--out")
    m.set_defaults(func=cmd_merge)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetUnreachable as exc:
        print(f"budget unreachable: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (DataError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
