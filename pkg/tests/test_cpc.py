"""Contrastive objectives against closed forms and brute-force recomputation."""

import numpy as np
import pytest

from conftest import gradcheck, softmax_np
from cpc_har.cpc import (
    ContrastiveBatch,
    contrastive_loss,
    loss_per_timestep,
    loss_single_anchor,
    score,
)
from cpc_har.models import ModelConfig, ModelParams, backbone_forward, init_params
from cpc_har.tensor import (
    OptimizerState,
    Rng,
    ShapeError,
    Tensor,
    adam_step,
    zero_grads,
)


def toy_params(z_dim=6, context=6, K=2, seed=0, scale=1.0, task="per_timestep"):
    """Hand-sized scoring matrices; context_dim deliberately small."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(task_variant=task, horizon=K, context_dim=context,
                      gru_units=context)
    tensors = {
        f"predictor.w{m}": Tensor(rng.normal(size=(context, z_dim)) * scale,
                                  requires_grad=True)
        for m in range(1, K + 1)
    }
    return ModelParams(config=cfg, tensors=tensors)


def toy_batch(B, T, z_dim=6, context=6, K=2, n=3, seed=1):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(B, T, z_dim)))
    c = Tensor(rng.normal(size=(B, T, context)))
    return ContrastiveBatch(z=z, c=c, horizon=K, num_negatives=n)


# -- score -------------------------------------------------------------------


def test_score_identity_matrix_gives_squared_norm():
    params = toy_params(z_dim=6, context=6, K=1)
    params.tensors["predictor.w1"] = Tensor(np.eye(6))
    z = np.random.default_rng(0).normal(size=(4, 6))
    s = score(Tensor(z), Tensor(z), 1, params)
    np.testing.assert_allclose(s.data, (z * z).sum(axis=1), rtol=1e-12)


def test_score_zero_matrix_gives_zero():
    params = toy_params(K=1)
    params.tensors["predictor.w1"].data[...] = 0.0
    s = score(Tensor(np.ones((3, 6))), Tensor(np.ones((3, 6))), 1, params)
    np.testing.assert_array_equal(s.data, np.zeros(3))


def test_score_gradient_wrt_matrix():
    rng = np.random.default_rng(2)
    c = rng.normal(size=(5, 4))
    z = rng.normal(size=(5, 3))
    w0 = rng.normal(size=(4, 3))
    cfg = ModelConfig(horizon=1, context_dim=4, gru_units=4)

    def f(w):
        params = ModelParams(config=cfg, tensors={"predictor.w1": w})
        return score(Tensor(c), Tensor(z), 1, params).sum()

    gradcheck(f, [w0], rtol=1e-5)


def test_score_step_out_of_range():
    params = toy_params(K=2)
    z = Tensor(np.ones((2, 6)))
    c = Tensor(np.ones((2, 6)))
    with pytest.raises(IndexError):
        score(c, z, 0, params)
    with pytest.raises(IndexError):
        score(c, z, 3, params)


# -- single-anchor loss --------------------------------------------------------


def test_single_anchor_uniform_scores_closed_form():
    for B, K in ((2, 1), (5, 3), (8, 2)):
        params = toy_params(K=K, task="single_anchor")
        for m in range(1, K + 1):
            params.tensors[f"predictor.w{m}"].data[...] = 0.0
        batch = toy_batch(B=B, T=K + 4, K=K)
        loss = loss_single_anchor(batch, params, Rng(0))
        assert abs(loss.item() - K * np.log(B)) < 1e-9


def test_single_anchor_saturated_positive():
    params = toy_params(z_dim=2, context=2, K=1)
    params.tensors["predictor.w1"] = Tensor(np.eye(2))
    z = np.zeros((2, 3, 2))
    z[0, :, 0] = 1000.0
    z[1, :, 1] = 1000.0
    c = np.zeros((2, 3, 2))
    c[0, :, 0] = 1.0
    c[1, :, 1] = 1.0
    batch = ContrastiveBatch(z=Tensor(z), c=Tensor(c), horizon=1, num_negatives=1)
    loss = loss_single_anchor(batch, params, Rng(0))
    assert loss.item() < 1e-9


def test_single_anchor_matches_brute_force():
    B, T, K = 3, 6, 2
    params = toy_params(z_dim=5, context=4, K=K, seed=3)
    batch = toy_batch(B=B, T=T, z_dim=5, context=4, K=K, seed=4)
    trace = {}
    loss = loss_single_anchor(batch, params, Rng(11), trace=trace)
    t = trace["anchor"]
    assert 0 <= t <= T - K - 1

    z, c = batch.z.data, batch.c.data
    expect = 0.0
    for m in range(1, K + 1):
        W = params.tensors[f"predictor.w{m}"].data
        step_terms = []
        for b in range(B):
            pred = c[b, t] @ W
            logits = np.array([pred @ z[j, t + m] for j in range(B)])
            step_terms.append(-np.log(softmax_np(logits)[b]))
        expect += np.mean(step_terms)
    assert abs(loss.item() - expect) < 1e-9


def test_single_anchor_anchor_range_is_exhaustive():
    B, T, K = 2, 5, 2
    params = toy_params(K=K)
    batch = toy_batch(B=B, T=T, K=K)
    seen = set()
    for seed in range(200):
        trace = {}
        loss_single_anchor(batch, params, Rng(seed), trace=trace)
        seen.add(trace["anchor"])
    assert seen == {0, 1, 2}  # t + K <= T - 1


def test_single_anchor_errors():
    params = toy_params(K=3)
    with pytest.raises(ShapeError, match="horizon"):
        loss_single_anchor(toy_batch(B=3, T=3, K=3), params, Rng(0))
    with pytest.raises(ShapeError, match="[Bb]atch"):
        loss_single_anchor(toy_batch(B=1, T=8, K=3), params, Rng(0))


def test_single_anchor_permutation_equivariant_with_shared_anchor():
    B, T, K = 4, 7, 2
    params = toy_params(K=K, seed=5)
    batch = toy_batch(B=B, T=T, K=K, seed=6)
    base = loss_single_anchor(batch, params, Rng(3)).item()
    perm = np.array([2, 0, 3, 1])
    shuffled = ContrastiveBatch(
        z=Tensor(batch.z.data[perm]), c=Tensor(batch.c.data[perm]),
        horizon=K, num_negatives=batch.num_negatives,
    )
    permuted = loss_single_anchor(shuffled, params, Rng(3)).item()
    assert abs(base - permuted) < 1e-12


# -- per-timestep loss -----------------------------------------------------------


def test_per_timestep_uniform_scores_closed_form():
    for B, T, K, n in ((2, 6, 1, 4), (3, 8, 3, 10), (4, 5, 2, 6)):
        params = toy_params(K=K)
        for m in range(1, K + 1):
            params.tensors[f"predictor.w{m}"].data[...] = 0.0
        batch = toy_batch(B=B, T=T, K=K, n=n)
        loss = loss_per_timestep(batch, params, Rng(1))
        assert abs(loss.item() - K * np.log(n + 1)) < 1e-9


def test_per_timestep_matches_brute_force_small():
    B, T, K, n = 2, 4, 1, 2
    params = toy_params(z_dim=3, context=4, K=K, seed=7)
    batch = toy_batch(B=B, T=T, z_dim=3, context=4, K=K, n=n, seed=8)
    trace = {}
    loss = loss_per_timestep(batch, params, Rng(21), trace=trace)
    assert abs(loss.item() - _brute_force_per_timestep(batch, params, trace)) < 1e-9


def test_per_timestep_matches_brute_force_wide():
    B, T, K, n = 3, 6, 2, 5
    params = toy_params(z_dim=5, context=6, K=K, seed=9)
    batch = toy_batch(B=B, T=T, z_dim=5, context=6, K=K, n=n, seed=10)
    trace = {}
    loss = loss_per_timestep(batch, params, Rng(22), trace=trace)
    assert abs(loss.item() - _brute_force_per_timestep(batch, params, trace)) < 1e-9


def _brute_force_per_timestep(batch, params, trace):
    """Re-derive every CE term independently from the traced negative draws."""
    z, c = batch.z.data, batch.c.data
    B, T, _ = z.shape
    K = batch.horizon
    T_a = T - K
    z_flat = z.reshape(B * T, -1)
    total = 0.0
    for m in range(1, K + 1):
        W = params.tensors[f"predictor.w{m}"].data
        neg_idx = trace["negatives"][m]
        terms = []
        row = 0
        for b in range(B):
            for t in range(T_a):
                pred = c[b, t] @ W
                cand = [pred @ z[b, t + m]]
                cand += [pred @ z_flat[j] for j in neg_idx[row]]
                terms.append(-np.log(softmax_np(np.array(cand))[0]))
                row += 1
        total += np.mean(terms)
    return total


def test_per_timestep_anchor_count():
    B, T, K = 2, 50, 12
    params = toy_params(K=K)
    batch = toy_batch(B=B, T=T, K=K, n=4)
    trace = {}
    loss_per_timestep(batch, params, Rng(2), trace=trace)
    assert trace["anchors"].max() == T - K - 1 == 37
    assert len(trace["anchors"]) == B * (T - K)


def test_per_timestep_negative_purity_many_seeds():
    B, T, K, n = 3, 5, 1, 6
    params = toy_params(K=K)
    batch = toy_batch(B=B, T=T, K=K, n=n)
    for seed in range(50):
        trace = {}
        loss_per_timestep(batch, params, Rng(seed), trace=trace)
        win = trace["windows"]
        for m, neg_idx in trace["negatives"].items():
            neg_window = neg_idx // T
            assert (neg_window != win[:, None]).all()
            # distinct within each term
            assert all(len(set(r)) == len(r) for r in neg_idx)


def test_per_timestep_insufficient_negatives():
    params = toy_params(K=1)
    batch = toy_batch(B=2, T=4, K=1, n=5)  # pool = (2-1)*4 = 4 < 5
    with pytest.raises(ShapeError, match="nsufficient"):
        loss_per_timestep(batch, params, Rng(0))
    # n == pool is allowed (every other-window latent used once)
    full = toy_batch(B=2, T=4, K=1, n=4)
    loss_per_timestep(full, params, Rng(0))


def test_per_timestep_horizon_error():
    params = toy_params(K=4)
    with pytest.raises(ShapeError, match="horizon"):
        loss_per_timestep(toy_batch(B=3, T=4, K=4), params, Rng(0))


def test_per_timestep_permutation_leaves_mean_unchanged():
    B, T, K, n = 3, 6, 1, 4
    params = toy_params(K=K, seed=12)
    batch = toy_batch(B=B, T=T, K=K, n=n, seed=13)
    perm = np.array([1, 2, 0])
    shuffled = ContrastiveBatch(z=Tensor(batch.z.data[perm]),
                                c=Tensor(batch.c.data[perm]),
                                horizon=K, num_negatives=n)
    a = np.mean([loss_per_timestep(batch, params, Rng(s)).item()
                 for s in range(60)])
    b = np.mean([loss_per_timestep(shuffled, params, Rng(s + 500)).item()
                 for s in range(60)])
    assert abs(a - b) / abs(a) < 0.05


def test_dispatch_follows_task_variant():
    params_pt = toy_params(K=1, task="per_timestep")
    params_sa = toy_params(K=1, task="single_anchor")
    for m in (params_pt, params_sa):
        m.tensors["predictor.w1"].data[...] = 0.0
    batch = toy_batch(B=4, T=5, K=1, n=2)
    assert contrastive_loss(batch, params_pt, Rng(0)).item() == pytest.approx(
        np.log(3), abs=1e-9)
    assert contrastive_loss(batch, params_sa, Rng(0)).item() == pytest.approx(
        np.log(4), abs=1e-9)


def test_losses_decrease_under_adam():
    """200 steps on a fixed toy batch must at least halve both losses."""
    B, T, K, n = 4, 10, 2, 5
    rng = np.random.default_rng(30)
    for loss_fn in (loss_per_timestep, loss_single_anchor):
        params = toy_params(z_dim=4, context=4, K=K, seed=31)
        z = Tensor(rng.normal(size=(B, T, 4)), requires_grad=True)
        c = Tensor(rng.normal(size=(B, T, 4)), requires_grad=True)
        trainable = dict(params.tensors)
        trainable["z"] = z
        trainable["c"] = c
        state = OptimizerState(lr=1e-2)
        stream = Rng(77)
        initial = None
        final = None
        for step in range(200):
            batch = ContrastiveBatch(z=z, c=c, horizon=K, num_negatives=n)
            loss = loss_fn(batch, params, stream.child("step", step))
            if initial is None:
                initial = loss.item()
            zero_grads(trainable)
            loss.backward()
            adam_step(trainable, state)
            final = loss.item()
        assert final < 0.5 * initial, f"{loss_fn.__name__}: {initial} -> {final}"


def test_full_graph_gradcheck_enhanced_cpc():
    """Finite differences through encoder -> aggregator -> per-timestep loss."""
    config = ModelConfig(causal_blocks=2, horizon=2, num_negatives=4).validate()
    template = init_params(config, Rng(40), dtype=np.float64)
    names = sorted(template.tensors)
    x0 = np.random.default_rng(41).normal(size=(2, 3, 20))
    arrays = [x0] + [template.tensors[n].data for n in names]

    def f(x, *weights):
        params = ModelParams(config=config, tensors=dict(template.tensors))
        for name, w in zip(names, weights):
            params.tensors[name] = w
        stream = Rng(99)  # recreated per call: identical dropout masks/draws
        z, c = backbone_forward(params, x, training=True, rng=stream.child("fwd"))
        batch = ContrastiveBatch(z=z, c=c, horizon=config.horizon,
                                 num_negatives=config.num_negatives)
        return loss_per_timestep(batch, params, stream.child("loss"))

    gradcheck(f, arrays, rtol=1e-3, max_coords=3)
