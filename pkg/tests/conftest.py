"""Shared numerical oracles for the test suite.

The gradient checker below is the reference against which every engine op is
validated: central finite differences in float64, compared coordinate by
coordinate with a relative-error criterion that tolerates tiny absolute
values via a floor.
"""

import numpy as np
import pytest

from cpc_har.tensor import Tensor


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(fn, arrays, rtol: float = 1e-4, h: float = 1e-5,
              max_coords: int | None = None, seed: int = 0) -> float:
    """Compare autodiff grads of ``fn`` against central finite differences.

    ``fn`` receives one Tensor per input array (float64, requires_grad=True)
    and must return a scalar Tensor. Every coordinate of every input is
    perturbed unless ``max_coords`` caps the per-input sample. Returns the
    worst relative error seen; raises AssertionError above ``rtol``.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def forward(values):
        tensors = [Tensor(v.copy(), requires_grad=True) for v in values]
        return tensors, fn(*tensors)

    tensors, loss = forward(arrays)
    assert loss.data.ndim == 0, "gradcheck needs a scalar loss"
    loss.backward()
    analytic = []
    for t in tensors:
        assert t.grad is not None, "input did not receive a gradient"
        analytic.append(np.array(t.grad, dtype=np.float64))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, base in enumerate(arrays):
        flat_n = base.size
        if max_coords is not None and flat_n > max_coords:
            coords = rng.choice(flat_n, size=max_coords, replace=False)
        else:
            coords = np.arange(flat_n)
        for c in coords:
            idx = np.unravel_index(c, base.shape) if base.shape else ()
            bumped = [a.copy() for a in arrays]
            bumped[i][idx] += h
            _, plus = forward(bumped)
            bumped[i][idx] -= 2 * h
            _, minus = forward(bumped)
            numeric = (plus.item() - minus.item()) / (2 * h)
            err = rel_err(float(analytic[i][idx]), numeric)
            worst = max(worst, err)
            assert err <= rtol, (
                f"grad mismatch on input {i} at {idx}: "
                f"analytic {analytic[i][idx]:.8g} vs numeric {numeric:.8g} "
                f"(rel err {err:.3g} > {rtol})"
            )
    return worst


def conv1d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                 stride: int = 1) -> np.ndarray:
    """Triple-loop cross-correlation on an already padded input."""
    B, C_in, T = x.shape
    C_out, _, K = w.shape
    T_out = (T - K) // stride + 1
    out = np.zeros((B, C_out, T_out), dtype=np.float64)
    for n in range(B):
        for o in range(C_out):
            for t in range(T_out):
                acc = 0.0
                for c in range(C_in):
                    for k in range(K):
                        acc += x[n, c, t * stride + k] * w[o, c, k]
                out[n, o, t] = acc + b[o]
    return out


def softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


@pytest.fixture
def rng64():
    return np.random.default_rng(1234)
