"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trend criteria (6, 7, 9) share one protocol: five seeds of the synthetic
bigram task, one pretrained dense encoder per seed, compressed at CR 0.25,
0.50 and 0.75, with a static uniform-rank baseline at the CR 0.50 budget.
"""

import copy
import json
import logging
import time

import numpy as np
import pytest
from conftest import record_criterion

from softrank import linalg
from softrank import ndcore as nd
from softrank.checkpoint import dumps, loads
from softrank.config import resolve
from softrank.experiments import pretrained_dense, run_compression
from softrank.gradcheck import check_gradients
from softrank.losses_opt import AdamW, ParamGroup, compression_loss_adaptive, compression_loss_linear, cross_entropy
from softrank.lowrank import decompose
from softrank.models import MLP, Encoder, EncoderConfig, parameters, replace_linears
from softrank.ndcore import Tensor
from softrank.report import compression_report
from softrank.softthresh import soft_threshold
from softrank.trainer import predict, recompute_live_params

SEEDS = range(5)
CRS = (0.25, 0.5, 0.75)
PROTOCOL = {"data.n": 3000, "data.val_fraction": 0.3, "train.gamma": 0.1}


@pytest.fixture(scope="module", autouse=True)
def quiet_logs():
    log = logging.getLogger("softrank")
    level = log.level
    log.setLevel(logging.ERROR)
    yield
    log.setLevel(level)


@pytest.fixture(scope="module")
def sweep():
    """{seed: {cr: RunResult}} for the shared protocol (about seven minutes on one core)."""
    out = {}
    for seed in SEEDS:
        cfg = resolve(dict(PROTOCOL, seed=seed))
        dense = pretrained_dense(cfg)
        out[seed] = {
            cr: run_compression(dict(cfg, **{"train.cr": cr, "baseline.static": cr == 0.5}), copy.deepcopy(dense))
            for cr in CRS
        }
    return out


def all_runs(sweep):
    return [(seed, cr, r) for seed, runs in sweep.items() for cr, r in runs.items()]


# ---------------------------------------------------------------- 1


def _rand(rng, *shape):
    return nd.parameter(rng.uniform(-1, 1, size=shape))


def _gradient_cases():
    rng = np.random.default_rng(0)
    cases = {}

    def weighted(fn, *shapes):
        params = [_rand(rng, *s) for s in shapes]
        w = Tensor(rng.uniform(-1, 1, size=fn(*params).shape))
        return (lambda: nd.sum(fn(*params) * w)), params

    ops = {
        "add": (lambda a, b: a + b, (3, 4), (4,)),
        "sub": (lambda a, b: a - b, (3, 4), (3, 4)),
        "mul": (lambda a, b: a * b, (2, 3, 4), (4,)),
        "scale": (lambda a: nd.scale(a, 0.3), (3, 4)),
        "neg": (lambda a: -a, (3,)),
        "tanh": (nd.tanh, (3, 4)),
        "exp": (nd.exp, (3, 4)),
        "gelu": (nd.gelu, (3, 4)),
        "sum": (lambda a: nd.sum(a, axis=0), (3, 4)),
        "mean": (lambda a: nd.mean(a, axis=1), (3, 4)),
        "reshape": (lambda a: nd.reshape(a, (4, 3)), (3, 4)),
        "swapaxes": (lambda a: nd.swapaxes(a, 1, 2), (2, 3, 4)),
        "take_rows": (lambda a: nd.take_rows(a, np.array([[1, 1], [0, 2]])), (3, 4)),
        "matmul": (lambda a, b: a @ b, (2, 3, 4), (4, 5)),
        "matmul_batched": (lambda a, b: a @ b, (2, 3, 4), (2, 4, 2)),
        "softmax_rows": (nd.softmax_rows, (3, 5)),
        "log_softmax_rows": (nd.log_softmax_rows, (3, 5)),
        "layer_norm": (lambda a, g, b: nd.layer_norm(a, g, b), (3, 5), (5,), (5,)),
    }
    for name, (fn, *shapes) in ops.items():
        cases[name] = weighted(fn, *shapes)

    labels = np.array([0, 2, 1])
    z = _rand(rng, 3, 3)
    cases["cross_entropy"] = (lambda: cross_entropy(z, labels)), [z]

    # soft threshold, upper branch and (with c != 0) lower branch, kept clear of the breakpoint
    x = nd.parameter(np.concatenate([rng.uniform(0.5, 1.5, 5), rng.uniform(0.0, 0.2, 4)]))
    a = nd.parameter(np.float64(0.35))
    w = Tensor(rng.uniform(-1, 1, 9))
    cases["soft_threshold_c0"] = (lambda: nd.sum(soft_threshold(x, a, 10.0) * w)), [x, a]
    cases["soft_threshold_c05"] = (lambda: nd.sum(soft_threshold(x, a, 10.0, 0.5) * w)), [x, a]

    layer = decompose(rng.standard_normal((6, 5)), bias=rng.standard_normal(6))
    layer.alpha.data = np.float64(0.5 * layer.sigma.data.min())
    xin = Tensor(rng.standard_normal((2, 3, 5)))
    wout = Tensor(rng.standard_normal((2, 3, 6)))
    cases["compressed_linear"] = (lambda: nd.sum(layer(xin) * wout)), list(layer.parameters().values())

    mlp = MLP([5, 6, 3], seed=1)
    replace_linears(mlp, calibrate=False)
    for _, l in mlp.registry.decomposed():
        l.alpha.data = np.float64(0.5 * l.sigma.data.min())
    xm, ym = rng.standard_normal((4, 5)), np.array([0, 1, 2, 1])
    cases["mlp_end_to_end"] = (lambda: cross_entropy(mlp(xm), ym)), list(parameters(mlp).values())

    enc = Encoder(EncoderConfig(n_blocks=1, d_model=4, n_heads=2, vocab_size=8, max_seq_len=4, n_classes=2), seed=2)
    replace_linears(enc, calibrate=False)
    for _, l in enc.registry.decomposed():
        l.alpha.data = np.float64(0.5 * l.sigma.data.min())
    ids = np.array([[2, 3, 4, 0], [5, 6, 7, 2]])
    ye = np.array([1, 0])
    cases["encoder_end_to_end"] = (lambda: cross_entropy(enc(ids), ye)), list(parameters(enc).values())
    return cases


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    worst = {name: check_gradients(fn, params, h=1e-5, atol=1e-6, rtol=1e-5) for name, (fn, params) in _gradient_cases().items()}
    elapsed = time.perf_counter() - t0
    failing = sorted(n for n, v in worst.items() if v > 1.0)
    ok = not failing and elapsed < 60
    record_criterion(
        1, ok, f"{len(worst)} gradient checks, worst tolerance ratio {max(worst.values()):.3g}, failing {failing}, {elapsed:.1f}s"
    )
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_02_svd_oracle():
    rng = np.random.default_rng(2024)
    worst_rec, worst_trunc = 0.0, 0.0
    for _ in range(200):
        m, n = int(rng.integers(1, 65)), int(rng.integers(1, 97))
        a = rng.standard_normal((m, n)) * rng.uniform(0.1, 10.0)
        res = linalg.svd(a)
        worst_rec = max(worst_rec, np.linalg.norm(res.reconstruct() - a) / np.linalg.norm(a))
        k = int(rng.integers(1, res.rank + 1))
        resid = np.linalg.norm(a - linalg.truncate(res, k).reconstruct())
        worst_trunc = max(worst_trunc, abs(resid - np.sqrt(np.sum(res.sigma[k:] ** 2))))
    ok = worst_rec <= 1e-9 and worst_trunc <= 1e-9
    record_criterion(2, ok, f"200 matrices: max reconstruction error {worst_rec:.2e}, max truncation identity error {worst_trunc:.2e}")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_03_compression_pressure():
    alphas = [nd.parameter(np.float64(0.0)) for _ in range(6)]
    opt = AdamW([ParamGroup(alphas, lr=1e-2, clamp_min=0.0, name="threshold")])
    strictly_up = True
    deriv_ok = True
    for _ in range(50):
        before = np.array([float(a.data) for a in alphas])
        opt.zero_grad()
        loss = compression_loss_adaptive(alphas)
        nd.backward(loss)
        deriv_ok &= all(abs(float(a.grad) + np.exp(-float(a.data))) <= 1e-15 for a in alphas)
        opt.step()
        strictly_up &= bool(np.all(np.array([float(a.data) for a in alphas]) > before))

    grid = np.concatenate([np.logspace(-8, 2, 200), np.linspace(0.01, 30, 200)])
    lin = [nd.parameter(np.float64(v)) for v in grid]
    ada = [nd.parameter(np.float64(v)) for v in grid]
    nd.backward(compression_loss_linear(lin))
    nd.backward(compression_loss_adaptive(ada))
    d_lin = np.array([float(a.grad) for a in lin])
    d_ada = np.array([float(a.grad) for a in ada])
    ordering = bool(np.all(np.abs(d_ada) < np.abs(d_lin))) and np.allclose(d_ada, -np.exp(-grid), rtol=1e-15, atol=0)
    ok = strictly_up and deriv_ok and ordering
    record_criterion(3, ok, f"alphas strictly increasing {strictly_up}, dL/dalpha = -exp(-alpha) {deriv_ok}, |adaptive| < |linear| on 400 points {ordering}")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_04_budget_targeting():
    t0 = time.perf_counter()
    cfg = resolve({"model.n_blocks": 4, "model.d_model": 64, "model.n_heads": 4, "train.cr": 0.5, "train.gamma": 0.1, "seed": 0})
    res = run_compression(cfg)
    tel = res.telemetry
    header = json.loads(json.dumps(tel.header()))
    mismatches = sum(recompute_live_params(header, json.loads(json.dumps(r))) != r["live_params"] for r in tel.steps)
    at_freeze = tel.steps[tel.freeze_step]["live_params"]
    cr_freeze = 1.0 - at_freeze / tel.dense_params
    elapsed = time.perf_counter() - t0
    ok = 0.48 <= cr_freeze <= 0.55 and mismatches == 0 and elapsed < 600
    record_criterion(
        4,
        ok,
        f"4x64 encoder: freeze at step {tel.freeze_step}, CR at freeze {cr_freeze:.4f}, final {res.achieved_cr:.4f}; "
        f"{len(tel.steps)} telemetry records, {mismatches} recompute mismatches, {elapsed:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_05_merge_equivalence(sweep):
    worst, differing = 0.0, 0
    for _, _, r in all_runs(sweep):
        pa, la = predict(r.frozen, r.val)
        pb, lb = predict(r.merged, r.val)
        differing += int(np.sum(pa != pb))
        worst = max(worst, float(np.max(np.linalg.norm(la - lb, axis=1) / np.linalg.norm(la, axis=1))))
    ok = differing == 0 and worst <= 1e-6
    record_criterion(5, ok, f"15 runs: {differing} differing predictions, max relative output difference {worst:.2e}")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_06_adaptive_vs_static(sweep):
    adaptive = np.array([sweep[s][0.5].merged_metric for s in SEEDS])
    static = np.array([sweep[s][0.5].baseline.metric for s in SEEDS])
    budgets = [(sweep[s][0.5].baseline.params, sweep[s][0.5].baseline.budget) for s in SEEDS]
    deltas = " ".join(f"{d:+.3f}" for d in adaptive - static)
    ok = adaptive.mean() >= static.mean()
    record_criterion(
        6,
        ok,
        f"mean accuracy adaptive {adaptive.mean():.4f} vs static {static.mean():.4f}; per-seed deltas {deltas}; "
        f"static params/budget {budgets}",
    )
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_07_cr_trend(sweep):
    means = [np.mean([sweep[s][cr].merged_metric for s in SEEDS]) for cr in CRS]
    achieved = [np.mean([sweep[s][cr].achieved_cr for s in SEEDS]) for cr in CRS]
    ok = all(a >= b for a, b in zip(means, means[1:]))
    table = ", ".join(f"CR {cr} (achieved {ac:.3f}): {m:.4f}" for cr, ac, m in zip(CRS, achieved, means))
    record_criterion(7, ok, f"mean accuracy over 5 seeds: {table}")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_08_mac_linearity(sweep):
    worst = 0.0
    for _, _, r in all_runs(sweep):
        for model in (r.merged, loads(dumps(r.merged))):
            rep = compression_report(model, model.cfg.max_seq_len)
            worst = max(worst, abs(rep.mac_ratio - (1.0 - rep.cr)))
    ok = worst <= 0.02
    record_criterion(8, ok, f"15 merged checkpoints (in memory and reloaded): max |MAC ratio - (1 - CR)| = {worst:.2e}")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_09_rank_heterogeneity(sweep):
    spreads = []
    for s in SEEDS:
        ranks = sweep[s][0.5].report.ranks()
        n_blocks = sweep[s][0.5].merged.cfg.n_blocks
        per_block = [sum(v for p, v in ranks.items() if p.startswith(f"block/{b}/")) for b in range(n_blocks)]
        spreads.append((per_block, float(np.std(per_block))))
    hetero = sum(sd > 0 for _, sd in spreads)
    ok = hetero >= 4
    record_criterion(9, ok, f"{hetero}/5 seeds with non-constant per-block rank; per-block ranks {[pb for pb, _ in spreads]}")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_freeze_semantics(sweep):
    moved, checked = 0, 0
    byte_identical = True
    for _, _, r in all_runs(sweep):
        tel = r.telemetry
        frozen = {p: np.float64(a).tobytes() for p, a in tel.steps[tel.freeze_step]["alphas"].items()}
        for rec in tel.steps[tel.freeze_step + 1 :]:
            checked += 1
            moved += any(np.float64(rec["alphas"][p]).tobytes() != b for p, b in frozen.items())
        final = {p: float(l.alpha.data) for p, l in r.frozen.registry.decomposed()}
        moved += any(np.float64(final[p]).tobytes() != b for p, b in frozen.items())
        for model in (r.frozen, r.merged):
            blob = dumps(model)
            byte_identical &= dumps(loads(blob)) == blob
    ok = moved == 0 and checked > 0 and byte_identical
    record_criterion(10, ok, f"{checked} post-freeze records, {moved} with moved alphas; checkpoint round trips byte-identical {byte_identical}")
    assert ok
