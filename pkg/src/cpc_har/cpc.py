"""Contrastive future-prediction objectives.

Both losses score context vectors against future latents with one learned
bilinear matrix per step offset and push the true future above distractors
via categorical cross-entropy:

* ``loss_single_anchor``: one shared anchor position t per batch; for each
  step m the candidates for window b are the latents at t+m of every window
  in the batch (B-way, the other B-1 act as negatives).
* ``loss_per_timestep``: every position of every window anchors a
  prediction; each (window, anchor, step) term draws n distinct negatives
  uniformly from all latents of the other windows at any timestep
  ((n+1)-way).

Both return the sum over steps of the mean over terms, so the scale is
K * ln(#candidates) at chance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cpc_har.models import ModelParams
from cpc_har.tensor import (
    Rng,
    ShapeError,
    Tensor,
    add,
    concat,
    getitem,
    indexed_scores,
    matmul,
    reshape,
    softmax_cross_entropy,
    transpose,
    tsum,
)


@dataclass
class ContrastiveBatch:
    """Latents z [B,T',z_dim], contexts c [B,T',256], and task sizes."""

    z: Tensor
    c: Tensor
    horizon: int
    num_negatives: int

    def check(self) -> tuple[int, int]:
        if self.z.ndim != 3 or self.c.ndim != 3:
            raise ShapeError(
                f"batch needs 3-D z and c, got {self.z.shape} / {self.c.shape}"
            )
        if self.z.shape[:2] != self.c.shape[:2]:
            raise ShapeError(
                f"z and c disagree on batch/time: {self.z.shape} vs {self.c.shape}"
            )
        B, T = self.z.shape[:2]
        if B < 2:
            raise ShapeError(f"batch too small for contrastive loss: B={B} < 2")
        if T <= self.horizon:
            raise ShapeError(
                f"horizon {self.horizon} leaves no anchor in a length-{T} sequence"
            )
        return B, T


def score(c_t: Tensor, z: Tensor, k: int, params: ModelParams) -> Tensor:
    """Bilinear compatibility of contexts with step-k latents.

    c_t: [M, 256], z: [M, z_dim] -> [M] with out[m] = c_t[m] . W_k @ z[m].
    k is 1-based and must not exceed the number of allocated matrices.
    """
    name = f"predictor.w{k}"
    if k < 1 or name not in params.tensors:
        raise IndexError(f"prediction step {k} has no scoring matrix")
    if c_t.ndim != 2 or z.ndim != 2:
        raise ShapeError(f"score expects 2-D inputs, got {c_t.shape} / {z.shape}")
    pred = matmul(c_t, params.tensors[name])  # [M, z_dim]
    if pred.shape != z.shape:
        raise ShapeError(f"latents {z.shape} do not match predictions {pred.shape}")
    return tsum(pred * z, axis=1)


def _distinct_negative_rows(rng: Rng, pool: int, rows: int, n: int) -> np.ndarray:
    """Draw ``rows`` sets of ``n`` distinct integers uniform over [0, pool).

    With n far below the pool, rejection (redraw rows containing duplicates)
    is cheap; when n is a large fraction of the pool, per-row random keys
    make termination certain at pool*log(pool) cost.
    """
    if n > pool:
        raise ShapeError(f"cannot draw {n} distinct negatives from a pool of {pool}")
    if 2 * n >= pool:
        keys = rng.uniform((rows, pool))
        return np.argsort(keys, axis=1)[:, :n]
    out = rng.integers(0, pool, size=(rows, n))
    if n > 1:
        while True:
            s = np.sort(out, axis=1)
            bad = (s[:, 1:] == s[:, :-1]).any(axis=1)
            if not bad.any():
                break
            out[bad] = rng.integers(0, pool, size=(int(bad.sum()), n))
    return out


def loss_single_anchor(batch: ContrastiveBatch, params: ModelParams, rng: Rng,
                       trace: dict | None = None) -> Tensor:
    """InfoNCE with one shared random anchor and same-step batch negatives.

    Draws t uniformly from {0, ..., T'-K-1}. For step m, the [B, B] score
    matrix between all predictions from c_t and all latents z_{:, t+m} is a
    B-way classification with the diagonal as targets. Returns
    sum_m mean_b CE.
    """
    B, T = batch.check()
    K = batch.horizon
    t = int(rng.integers(0, T - K))
    if trace is not None:
        trace["anchor"] = t
    c_t = getitem(batch.c, (slice(None), t, slice(None)))  # [B, 256]
    targets = np.arange(B)
    total = None
    for m in range(1, K + 1):
        pred = matmul(c_t, params.tensors[f"predictor.w{m}"])  # [B, z_dim]
        z_m = getitem(batch.z, (slice(None), t + m, slice(None)))  # [B, z_dim]
        logits = matmul(pred, transpose(z_m, (1, 0)))  # [B, B]
        term = softmax_cross_entropy(logits, targets)
        total = term if total is None else add(total, term)
    return total


def loss_per_timestep(batch: ContrastiveBatch, params: ModelParams, rng: Rng,
                      trace: dict | None = None) -> Tensor:
    """InfoNCE over every (window, anchor, step) with sampled negatives.

    Negatives for a term in window b are n distinct draws from the pooled
    latents of the other B-1 windows at all T' timesteps; the pool never
    contains the positive's own window. Returns sum_m mean_{b,t} CE over the
    (n+1)-way logits [positive | negatives].
    """
    B, T = batch.check()
    K = batch.horizon
    n = batch.num_negatives
    pool = (B - 1) * T
    if n > pool:
        raise ShapeError(
            f"insufficient negatives: need {n} from {pool} other-window latents"
        )
    T_a = T - K
    rows = B * T_a
    z_flat = reshape(batch.z, (B * T, batch.z.shape[2]))
    c_anchor = reshape(
        getitem(batch.c, (slice(None), slice(0, T_a), slice(None))),
        (rows, batch.c.shape[2]),
    )
    win = np.repeat(np.arange(B), T_a)  # window id per row
    t_of = np.tile(np.arange(T_a), B)  # anchor position per row
    targets = np.zeros(rows, dtype=np.int64)
    if trace is not None:
        trace["negatives"] = {}
        trace["windows"] = win
        trace["anchors"] = t_of
    total = None
    for m in range(1, K + 1):
        draws = _distinct_negative_rows(rng, pool, rows, n)
        rank = draws // T
        other = rank + (rank >= win[:, None])  # skip own window
        neg_idx = other * T + draws % T
        pos_idx = win * T + (t_of + m)
        if trace is not None:
            trace["negatives"][m] = neg_idx
        pred = matmul(c_anchor, params.tensors[f"predictor.w{m}"])  # [rows, z_dim]
        pos = indexed_scores(pred, z_flat, pos_idx[:, None])  # [rows, 1]
        neg = indexed_scores(pred, z_flat, neg_idx)  # [rows, n]
        term = softmax_cross_entropy(concat([pos, neg], axis=1), targets)
        total = term if total is None else add(total, term)
    return total


def contrastive_loss(batch: ContrastiveBatch, params: ModelParams, rng: Rng,
                     trace: dict | None = None) -> Tensor:
    """Dispatch on the configured task variant."""
    if params.config.task_variant == "per_timestep":
        return loss_per_timestep(batch, params, rng, trace)
    return loss_single_anchor(batch, params, rng, trace)
