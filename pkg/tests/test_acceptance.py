"""Acceptance gate: one pass/fail line per criterion.

Each test exercises one numbered criterion end to end at its stated
tolerance and emits a single human-readable verdict line (written past
pytest's capture so it is visible in any run mode). Criteria 5 and 7 share
one benchmark double-run through a module-scoped fixture.
"""

import sys
import time

import numpy as np
import pytest

from conftest import gradcheck, softmax_np
from cpc_har.benchmark import METRICS_FILES, BenchmarkConfig, run_benchmark
from cpc_har.cli import EXIT_OK, ablation_plan, main, resolve_config
from cpc_har.cpc import ContrastiveBatch, loss_per_timestep, loss_single_anchor
from cpc_har.data import limited_label_indices, make_folds
from cpc_har.models import (
    CAUSAL_KERNEL_LADDER,
    ModelConfig,
    ModelParams,
    aggregator_forward,
    backbone_forward,
    encoder_forward,
    init_params,
)
from cpc_har.tensor import (
    Padding,
    Rng,
    Tensor,
    add,
    batch_norm,
    concat,
    conv1d,
    div,
    dropout,
    getitem,
    group_norm,
    indexed_scores,
    matmul,
    mul,
    pad1d,
    pointwise,
    reshape,
    softmax_cross_entropy,
    stack,
    tmean,
    transpose,
    tsqrt,
    tsum,
)
from cpc_har.training import lr_at_epoch


@pytest.fixture
def report(capfd):
    """Verdict printer that stays visible under pytest's fd-level capture."""

    def _report(num: int, name: str, ok: bool, detail: str) -> None:
        line = f"[criterion {num}] {'PASS' if ok else 'FAIL'} {name}: {detail}\n"
        with capfd.disabled():
            sys.stdout.write(line)
            sys.stdout.flush()
        assert ok, line.strip()

    return _report


# -- criterion 1: gradient suite -------------------------------------------------


def _op_checks():
    r = np.random.default_rng(0)
    a23 = r.normal(size=(2, 3))
    b3 = r.normal(size=3)
    pos = np.abs(r.normal(size=(2, 3))) + 0.5
    x234 = r.normal(size=(2, 3, 4))
    m34 = r.normal(size=(3, 4))
    x_pad = r.normal(size=(2, 3, 8))
    x_conv = r.normal(size=(2, 3, 10))
    w_conv = r.normal(size=(4, 3, 3))
    b_conv = r.normal(size=4)
    x_gn = r.normal(size=(2, 6, 5))
    g6, be6 = np.ones(6), np.zeros(6)
    x_bn = r.normal(size=(5, 4))
    g4, be4 = np.ones(4), np.zeros(4)
    logits = r.normal(size=(5, 4))
    targets = np.array([0, 3, 1, 2, 2])
    pred = r.normal(size=(4, 5))
    table = r.normal(size=(6, 5))
    idx = np.array([[0, 2, 5], [1, 1, 3], [4, 0, 2], [5, 5, 1]])

    w_gn = r.normal(size=(2, 6, 5))
    w_bn = r.normal(size=(5, 4))

    def bn(x, g, b):
        out = batch_norm(x, g, b, np.zeros(4), np.ones(4), training=True)
        return tsum(mul(out, Tensor(w_bn)))

    return [
        ("add", lambda a, b: tsum(add(a, b)), [a23, b3]),
        ("mul", lambda a, b: tsum(mul(a, b)), [a23, b3]),
        ("div", lambda a, b: tsum(div(a, b)), [a23, pos]),
        ("matmul", lambda a, b: tsum(matmul(a, b)), [a23, m34]),
        ("sqrt", lambda a: tsum(tsqrt(a)), [pos]),
        ("reshape", lambda a: tsum(mul(reshape(a, (3, 4)), reshape(a, (3, 4)))),
         [x234[0]]),
        ("transpose", lambda a: tsum(mul(transpose(a, (2, 0, 1)),
                                         transpose(a, (2, 0, 1)))), [x234]),
        ("getitem", lambda a: tsum(mul(getitem(a, (slice(1, None), slice(None, None, 2))),
                                       2.0)), [a23]),
        ("concat", lambda a, b: tsum(mul(concat([a, b], axis=1),
                                         concat([b, a], axis=1))), [a23, a23 + 1]),
        ("stack", lambda a, b: tsum(mul(stack([a, b], axis=0), 3.0)), [a23, b3 + a23]),
        ("sum", lambda a: tsum(mul(tsum(a, axis=1, keepdims=True), tsum(a, axis=1, keepdims=True))),
         [a23]),
        ("mean", lambda a: mul(tmean(a), tmean(a)), [a23]),
        ("relu", lambda a: tsum(pointwise(a, "relu")), [a23 + 0.1]),
        ("sigmoid", lambda a: tsum(pointwise(a, "sigmoid")), [a23]),
        ("tanh", lambda a: tsum(pointwise(a, "tanh")), [a23]),
        ("dropout", lambda a: tsum(dropout(a, 0.3, True, Rng(7))), [a23]),
        ("pad1d-zeros", lambda a: tsum(mul(pad1d(a, Padding.zeros(2, 1)), 2.0)),
         [x_pad]),
        ("pad1d-reflect", lambda a: tsum(mul(pad1d(a, Padding.reflect(2, 2)), 2.0)),
         [x_pad]),
        ("pad1d-causal", lambda a: tsum(mul(pad1d(a, Padding.causal(3)), 2.0)),
         [x_pad]),
        ("conv1d", lambda x, w, b: tsum(conv1d(x, w, b, stride=2)),
         [x_conv, w_conv, b_conv]),
        ("group_norm", lambda x, g, b: tsum(mul(group_norm(x, 3, g, b), Tensor(w_gn))),
         [x_gn, g6, be6]),
        ("batch_norm", bn, [x_bn, g4, be4]),
        ("softmax-ce", lambda z: softmax_cross_entropy(z, targets), [logits]),
        ("indexed-scores", lambda p, t: tsum(indexed_scores(p, t, idx)),
         [pred, table]),
    ]


def test_criterion_1_gradient_suite(report):
    start = time.perf_counter()
    worst_op = 0.0
    for name, fn, arrays in _op_checks():
        worst_op = max(worst_op, gradcheck(fn, arrays, rtol=1e-4))

    config = ModelConfig(causal_blocks=2, horizon=2, num_negatives=4).validate()
    template = init_params(config, Rng(40), dtype=np.float64)
    names = sorted(template.tensors)
    x0 = np.random.default_rng(41).normal(size=(2, 3, 20))

    def full(x, *weights):
        params = ModelParams(config=config, tensors=dict(template.tensors))
        for name, w in zip(names, weights):
            params.tensors[name] = w
        stream = Rng(99)
        z, c = backbone_forward(params, x, training=True, rng=stream.child("fwd"))
        batch = ContrastiveBatch(z=z, c=c, horizon=config.horizon,
                                 num_negatives=config.num_negatives)
        return loss_per_timestep(batch, params, stream.child("loss"))

    worst_full = gradcheck(full, [x0] + [template.tensors[n].data for n in names],
                           rtol=1e-3, max_coords=3)
    elapsed = time.perf_counter() - start
    report(1, "gradient suite", elapsed < 60.0,
           f"op rel err <= {worst_op:.2e} (tol 1e-4), full graph "
           f"<= {worst_full:.2e} (tol 1e-3), {elapsed:.1f}s (< 60s)")


# -- criterion 2: architecture conformance -----------------------------------------


def _causal_at_every_position(blocks: int) -> bool:
    config = ModelConfig(causal_blocks=blocks)
    params = init_params(config, Rng(blocks), dtype=np.float64)
    z0 = np.random.default_rng(blocks).normal(size=(2, 12, 256))
    base = aggregator_forward(params, Tensor(z0), training=False).data
    for t in range(12):
        poisoned = z0.copy()
        poisoned[:, t + 1:, :] = 1e6  # future only
        out = aggregator_forward(params, Tensor(poisoned), training=False).data
        if not np.array_equal(out[:, :t + 1, :], base[:, :t + 1, :]):
            return False
    return True


def test_criterion_2_architecture(report):
    x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 100)))
    enh = init_params(ModelConfig(), Rng(1))
    z_enh = encoder_forward(enh, x, training=False)
    orig = init_params(ModelConfig(encoder_variant="original",
                                   aggregator_variant="gru",
                                   task_variant="single_anchor", horizon=16),
                       Rng(2))
    z_orig = encoder_forward(orig, x, training=False)
    shapes_ok = (z_enh.shape == (2, 50, 256) and z_orig.shape == (2, 100, 128))

    ladder_ok, causal_ok = True, True
    for blocks in (2, 4, 6):
        params = init_params(ModelConfig(causal_blocks=blocks), Rng(blocks))
        kernels = tuple(
            params.tensors[f"aggregator.block{i}.conv.weight"].shape[2]
            for i in range(1, blocks + 1))
        ladder_ok &= kernels == CAUSAL_KERNEL_LADDER[:blocks]
        causal_ok &= _causal_at_every_position(blocks)

    report(2, "architecture conformance", shapes_ok and ladder_ok and causal_ok,
           f"enhanced {z_enh.shape}, original {z_orig.shape}, kernel ladder "
           f"prefix ok={ladder_ok}, bitwise causality ok={causal_ok}")


# -- criterion 3: contrastive-loss analytics ---------------------------------------


def _toy(B, T, K, n, z_dim=5, context=4, seed=0, zero=False):
    r = np.random.default_rng(seed)
    cfg = ModelConfig(horizon=K, num_negatives=n, context_dim=context,
                      gru_units=context)
    tensors = {f"predictor.w{m}": Tensor(np.zeros((context, z_dim)) if zero
                                         else r.normal(size=(context, z_dim)),
                                         requires_grad=True)
               for m in range(1, K + 1)}
    params = ModelParams(config=cfg, tensors=tensors)
    batch = ContrastiveBatch(z=Tensor(r.normal(size=(B, T, z_dim))),
                             c=Tensor(r.normal(size=(B, T, context))),
                             horizon=K, num_negatives=n)
    return params, batch


def _brute_per_timestep(batch, params, trace) -> float:
    z, c = batch.z.data, batch.c.data
    B, T, _ = z.shape
    K, T_a = batch.horizon, T - batch.horizon
    z_flat = z.reshape(B * T, -1)
    total = 0.0
    for m in range(1, K + 1):
        W = params.tensors[f"predictor.w{m}"].data
        terms, row = [], 0
        for b in range(B):
            for t in range(T_a):
                scores = [c[b, t] @ W @ z[b, t + m]]
                scores += [c[b, t] @ W @ z_flat[j]
                           for j in trace["negatives"][m][row]]
                terms.append(-np.log(softmax_np(np.array(scores))[0]))
                row += 1
        total += float(np.mean(terms))
    return total


def _brute_single_anchor(batch, params, trace) -> float:
    z, c = batch.z.data, batch.c.data
    B = z.shape[0]
    t = trace["anchor"]
    total = 0.0
    for m in range(1, batch.horizon + 1):
        W = params.tensors[f"predictor.w{m}"].data
        terms = []
        for b in range(B):
            logits = np.array([c[b, t] @ W @ z[j, t + m] for j in range(B)])
            terms.append(-np.log(softmax_np(logits)[b]))
        total += float(np.mean(terms))
    return total


def test_criterion_3_infonce_analytics(report):
    params, batch = _toy(B=4, T=9, K=3, n=7, zero=True)
    err_pt = abs(loss_per_timestep(batch, params, Rng(0)).item()
                 - 3 * np.log(8))
    params_sa, batch_sa = _toy(B=5, T=8, K=2, n=1, seed=1, zero=True)
    err_sa = abs(loss_single_anchor(batch_sa, params_sa, Rng(0)).item()
                 - 2 * np.log(5))

    params_b, batch_b = _toy(B=3, T=6, K=2, n=5, seed=2)
    trace = {}
    loss = loss_per_timestep(batch_b, params_b, Rng(9), trace=trace)
    err_bf_pt = abs(loss.item() - _brute_per_timestep(batch_b, params_b, trace))
    trace_sa = {}
    loss_sa = loss_single_anchor(batch_b, params_b, Rng(10), trace=trace_sa)
    err_bf_sa = abs(loss_sa.item() - _brute_single_anchor(batch_b, params_b,
                                                          trace_sa))
    ok = max(err_pt, err_sa, err_bf_pt, err_bf_sa) < 1e-9
    report(3, "contrastive-loss analytics", ok,
           f"closed forms err {err_pt:.2e}/{err_sa:.2e}, brute force err "
           f"{err_bf_pt:.2e}/{err_bf_sa:.2e} (tol 1e-9)")


# -- criterion 4: protocol conformance ----------------------------------------------


def test_criterion_4_protocol(report):
    r = np.random.default_rng(0)
    folds_ok = True
    for case in range(100):
        size = int(r.integers(5, 51))
        subjects = [f"u{i:03d}" for i in range(size)]
        plan = make_folds(subjects, 5, Rng(case))
        tested = [s for _, _, test in plan for s in test]
        folds_ok &= sorted(tested) == subjects

    labels = np.repeat(np.arange(4), (3, 7, 60, 150))
    r.shuffle(labels)
    limit_ok = True
    for per_class in (2, 5, 10, 50, 100):
        idx = limited_label_indices(labels, per_class, Rng(per_class))
        got = np.bincount(labels[idx], minlength=4)
        want = np.minimum((3, 7, 60, 150), per_class)
        limit_ok &= np.array_equal(got, want)

    lr_ok = (abs(lr_at_epoch(1e-3, 10, "classify") - 8e-4) < 1e-12
             and abs(lr_at_epoch(1e-3, 20, "classify") - 6.4e-4) < 1e-12)
    report(4, "protocol conformance", folds_ok and limit_ok and lr_ok,
           f"100 fold plans partition ok={folds_ok}, limited-label counts "
           f"ok={limit_ok}, lr decay 0.8x/0.64x ok={lr_ok}")


# -- criteria 5 and 7: end-to-end benchmark, twice ------------------------------------


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    config = BenchmarkConfig()
    start = time.perf_counter()
    first = run_benchmark(config, out_dir=root / "run1")
    seconds = time.perf_counter() - start
    second = run_benchmark(config, out_dir=root / "run2")
    return {"first": first, "second": second, "seconds": seconds,
            "dirs": (root / "run1", root / "run2")}


@pytest.mark.slow
def test_criterion_5_end_to_end_benchmark(benchmark_runs, report):
    summary = benchmark_runs["first"]
    drop = summary["pretrain"]["val_loss_drop"]
    gap = summary["f1_gap"]
    seconds = benchmark_runs["seconds"]
    ok = drop >= 0.30 and gap >= 0.10 and seconds < 1200.0
    report(5, "end-to-end synthetic benchmark", ok,
           f"val loss drop {drop:.1%} (need >=30%), macro-F1 "
           f"{summary['pretrained_f1']['mean']:.3f} vs random "
           f"{summary['random_f1']['mean']:.3f}, gap {gap * 100:+.1f} points "
           f"(need >=10), {seconds:.0f}s (< 1200s)")


def test_criterion_6_ablation_machinery(tmp_path, report):
    rows = ablation_plan(resolve_config(None, [], None))
    hashes = {row["config_hash"] for row in rows}
    by_name = {row["name"]: row for row in rows}
    grid_ok = by_name["cpc-strided-encoder"]["horizon_grid"] == [16, 32]
    out = tmp_path / "plan"
    cli_ok = main(["ablate", "--plan-only", "--out", str(out)]) == EXIT_OK
    cli_ok &= (out / "ablation_plan.json").exists()
    ok = len(rows) == 5 and len(hashes) == 5 and grid_ok and cli_ok
    report(6, "ablation machinery", ok,
           f"{len(rows)} rows, {len(hashes)} distinct hashes, strided-encoder "
           f"horizon grid {by_name['cpc-strided-encoder']['horizon_grid']}")


@pytest.mark.slow
def test_criterion_7_determinism(benchmark_runs, report):
    dir1, dir2 = benchmark_runs["dirs"]
    same = {name: (dir1 / name).read_bytes() == (dir2 / name).read_bytes()
            for name in METRICS_FILES}
    report(7, "benchmark determinism", all(same.values()),
           "identical reruns: " + ", ".join(
               f"{name} {'==' if ok else '!='}" for name, ok in same.items()))
