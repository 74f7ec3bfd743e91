"""Rank, parameter and MAC accounting tables, written as schema-versioned CSV/JSON."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .lowrank import ZERO_EPS, break_even_rank, bias_count, mac_count, param_count
from .models import SLOTS, Model

REPORT_SCHEMA = "softrank.report/1"
LAYERS_SCHEMA = "softrank.layers/1"
RANKS_SCHEMA = "softrank.ranks/1"
PARAMS_SCHEMA = "softrank.params/1"
CURVE_SCHEMA = "softrank.loss_curve/1"
SWEEP_SCHEMA = "softrank.sweep/1"
SUMMARY_SCHEMA = "softrank.sweep_summary/1"
TELEMETRY_SCHEMA = "softrank.telemetry/1"

LAYER_COLUMNS = ["layer_path", "M", "N", "rank", "params_dense", "params_merged", "macs_dense", "macs_merged"]


class SchemaError(ValueError):
    pass


@dataclass
class LayerRow:
    layer_path: str
    M: int
    N: int
    rank: int
    params_dense: int
    params_merged: int
    macs_dense: int
    macs_merged: int
    kind: str
    compressible: bool
    break_even: float
    bias: int


@dataclass
class CompressionReport:
    seq_len: int
    layers: list[LayerRow] = field(default_factory=list)

    def _sum(self, attr: str, only_compressible: bool = True) -> int:
        return sum(getattr(r, attr) for r in self.layers if r.compressible or not only_compressible)

    @property
    def dense_params(self) -> int:
        return self._sum("params_dense")

    @property
    def compressed_params(self) -> int:
        return self._sum("params_merged")

    @property
    def cr(self) -> float:
        dense = self.dense_params
        return 1.0 - self.compressed_params / dense if dense else 0.0

    @property
    def mac_ratio(self) -> float:
        dense = self._sum("macs_dense")
        return self._sum("macs_merged") / dense if dense else 1.0

    def totals(self) -> dict:
        return {
            "params_dense": self.dense_params,
            "params_merged": self.compressed_params,
            "macs_dense": self._sum("macs_dense"),
            "macs_merged": self._sum("macs_merged"),
            "params_dense_all_layers": self._sum("params_dense", False),
            "params_merged_all_layers": self._sum("params_merged", False),
            "bias_params": self._sum("bias", False),
            "cr": self.cr,
            "mac_ratio": self.mac_ratio,
        }

    def ranks(self) -> dict[str, int]:
        return {r.layer_path: r.rank for r in self.layers if r.compressible}

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "seq_len": self.seq_len,
            "layers": [asdict(r) for r in self.layers],
            "totals": self.totals(),
        }


def compression_report(model: Model, seq_len: int = 1, eps: float = ZERO_EPS) -> CompressionReport:
    reg = model.registry
    rep = CompressionReport(seq_len)
    for path, layer in reg.items():
        m, n = layer.shape
        rep.layers.append(
            LayerRow(
                layer_path=path,
                M=m,
                N=n,
                rank=layer.rank(eps),
                params_dense=param_count(layer, "dense"),
                params_merged=param_count(layer, "merged", eps),
                macs_dense=mac_count(layer, "dense", seq_len),
                macs_merged=mac_count(layer, "merged", seq_len, eps),
                kind=layer.kind,
                compressible=path in reg.compressible,
                break_even=break_even_rank(m, n),
                bias=bias_count(layer),
            )
        )
    return rep


# ---------------------------------------------------------------- CSV helpers


def _csv_text(schema: str, header: list[str], rows: Iterable[list]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def read_csv(path, expected_schema: str) -> list[dict[str, str]]:
    """Read a report CSV, failing loudly on a missing or unknown schema line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# schema: "):
        raise SchemaError(f"{path}: missing schema line")
    found = lines[0][len("# schema: ") :].strip()
    if found != expected_schema:
        raise SchemaError(f"{path}: schema {found!r}, reader understands {expected_schema!r}")
    return list(csv.DictReader(lines[1:]))


def read_json(path, expected_schema: str) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    found = doc.get("schema") if isinstance(doc, dict) else None
    if found != expected_schema:
        raise SchemaError(f"{path}: schema {found!r}, reader understands {expected_schema!r}")
    return doc


def layers_csv(rep: CompressionReport) -> str:
    rows = [[getattr(r, c) for c in LAYER_COLUMNS] for r in rep.layers]
    t = rep.layers
    rows.append(["TOTAL"] + [""] * 3 + [sum(getattr(r, c) for r in t) for c in LAYER_COLUMNS[4:]])
    return _csv_text(LAYERS_SCHEMA, LAYER_COLUMNS, rows)


def ranks_csv(rep: CompressionReport) -> str:
    """Block x slot rank grid (one row per block)."""
    grid: dict[int, dict[str, int]] = {}
    other = []
    for r in rep.layers:
        parts = r.layer_path.split("/")
        if len(parts) == 3 and parts[0] == "block" and parts[2] in SLOTS:
            grid.setdefault(int(parts[1]), {})[parts[2]] = r.rank
        elif r.compressible:
            other.append(r)
    if grid:
        rows = [[b] + [grid[b].get(s, "") for s in SLOTS] for b in sorted(grid)]
        return _csv_text(RANKS_SCHEMA, ["block", *SLOTS], rows)
    return _csv_text(RANKS_SCHEMA, ["layer_path", "rank"], [[r.layer_path, r.rank] for r in other])


def params_csv(rep: CompressionReport, metric: Optional[float] = None, dense_metric: Optional[float] = None) -> str:
    t = rep.totals()
    rows = [
        ["dense", t["params_dense"], t["macs_dense"], 0.0, "" if dense_metric is None else dense_metric],
        ["compressed", t["params_merged"], t["macs_merged"], rep.cr, "" if metric is None else metric],
    ]
    return _csv_text(PARAMS_SCHEMA, ["model", "params", "macs", "cr", "metric"], rows)


def loss_curve_csv(steps: list[dict]) -> str:
    rows = [[s["step"], s["phase"], s["l_acc"], s["l_comp"], s["l_tot"], s["live_params"]] for s in steps]
    return _csv_text(CURVE_SCHEMA, ["step", "phase", "l_acc", "l_comp", "l_tot", "live_params"], rows)


def sweep_csv(rows: list[dict]) -> str:
    cols = ["cr_requested", "seed", "cr_achieved", "metric", "mac_ratio", "status", "out_dir"]
    return _csv_text(SWEEP_SCHEMA, cols, [[r.get(c, "") for c in cols] for r in rows])


def sweep_summary_csv(rows: list[dict]) -> str:
    by_cr: dict[float, list[dict]] = {}
    for r in rows:
        if r.get("status") == "ok":
            by_cr.setdefault(r["cr_requested"], []).append(r)
    out = []
    for cr in sorted(by_cr):
        runs = by_cr[cr]
        out.append(
            [
                cr,
                len(runs),
                sum(r["cr_achieved"] for r in runs) / len(runs),
                sum(r["metric"] for r in runs) / len(runs),
            ]
        )
    return _csv_text(SUMMARY_SCHEMA, ["cr_requested", "n_runs", "cr_achieved_mean", "metric_mean"], out)
