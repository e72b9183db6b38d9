"""Central finite-difference verification of tape gradients.

The numeric side evaluates the checked function forward-only at perturbed
inputs, so it shares no code with the adjoint closures it audits. Error is
reported per coordinate as |analytic - numeric| / max(1, |numeric|):
relative for large gradients, absolute near zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward, no_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _forward_value(fn, leaves) -> float:
    with no_grad():
        return fn(*leaves).item()


def max_gradient_error(fn, leaves, step: float = DEFAULT_STEP, max_coords: int | None = None, seed: int = 0) -> float:
    """Worst per-coordinate deviation between tape and central differences.

    ``fn(*leaves)`` must return a scalar Tensor. When ``max_coords`` is set,
    that many coordinates per tensor are sampled (seeded) instead of sweeping
    all of them; the sweep is still an exact central difference per checked
    coordinate.
    """
    for t in leaves:
        t.zero_grad()
    out = fn(*leaves)
    backward(out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        n = t.data.size
        if max_coords is None or n <= max_coords:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        for flat in coords:
            idx = np.unravel_index(flat, t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + step
            plus = _forward_value(fn, leaves)
            t.data[idx] = orig - step
            minus = _forward_value(fn, leaves)
            t.data[idx] = orig
            numeric = (plus - minus) / (2.0 * step)
            err = abs(float(analytic[idx]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted_sum(expr: Tensor, weight: Tensor) -> Tensor:
    # reduce through fixed weights so every output coordinate matters
    return T.tensor_sum(T.mul(expr, weight))


def _primitive_cases(rng):
    # weight constants are drawn once, outside the closures, so repeated
    # forward evaluations during finite differencing see the same function
    def w(*shape):
        return Tensor(rng.standard_normal(shape))

    w33, w24, w26, w4, w3v = w(3, 3), w(2, 4), w(2, 6), w(4), w(3)
    w235, w43, w324, w22, w314 = w(2, 3, 5), w(4, 3), w(3, 2, 4), w(2, 2), w(3, 1, 4)

    yield "matmul", lambda a, b: _weighted_sum(a @ b, w33), [_rand(rng, 3, 3), _rand(rng, 3, 3)]
    yield "matmul_batched", lambda a, b: _weighted_sum(a @ b, w235), [_rand(rng, 2, 3, 4), _rand(rng, 4, 5)]
    yield "add", lambda a, b: _weighted_sum(T.add(a, b), w24), [_rand(rng, 2, 4), _rand(rng, 2, 4)]
    yield "add_row_bias", lambda a, b: _weighted_sum(T.add(a, b), w24), [_rand(rng, 2, 4), _rand(rng, 4)]
    yield "sub", lambda a, b: _weighted_sum(T.sub(a, b), w24), [_rand(rng, 2, 4), _rand(rng, 2, 4)]
    yield "mul", lambda a, b: _weighted_sum(T.mul(a, b), w24), [_rand(rng, 2, 4), _rand(rng, 2, 4)]
    yield "neg", lambda a: _weighted_sum(T.neg(a), w24), [_rand(rng, 2, 4)]
    yield "exp", lambda a: _weighted_sum(T.exp(a), w24), [_rand(rng, 2, 4)]
    yield "log", lambda a: _weighted_sum(T.log(a), w24), [Tensor(rng.uniform(0.5, 2.0, (2, 4)), requires_grad=True)]
    yield "sigmoid", lambda a: _weighted_sum(T.sigmoid(a), w24), [_rand(rng, 2, 4)]
    yield "softplus", lambda a: _weighted_sum(T.softplus(a), w24), [_rand(rng, 2, 4)]
    yield "gelu", lambda a: _weighted_sum(T.gelu(a), w24), [_rand(rng, 2, 4)]
    yield "softmax", lambda a: _weighted_sum(T.softmax(a, axis=-1), w24), [_rand(rng, 2, 4)]
    yield "layer_norm", lambda a, g, b: _weighted_sum(T.layer_norm(a, g, b), w24), [
        _rand(rng, 2, 4),
        _rand(rng, 4),
        _rand(rng, 4),
    ]
    yield "sum_axis", lambda a: _weighted_sum(T.tensor_sum(a, axis=0), w4), [_rand(rng, 3, 4)]
    yield "mean_axis", lambda a: _weighted_sum(T.tensor_mean(a, axis=1), w3v), [_rand(rng, 3, 4)]
    yield "reshape", lambda a: _weighted_sum(T.reshape(a, (4, 3)), w43), [_rand(rng, 3, 4)]
    yield "transpose", lambda a: _weighted_sum(T.transpose(a, (1, 0, 2)), w324), [_rand(rng, 2, 3, 4)]
    yield "concat", lambda a, b: _weighted_sum(T.concat([a, b], axis=1), w26), [_rand(rng, 2, 2), _rand(rng, 2, 4)]
    yield "slice", lambda a: _weighted_sum(T.slice_axis(a, 1, 1, 3), w22), [_rand(rng, 2, 4)]
    yield "tile_batch", lambda a: _weighted_sum(T.tile_batch(a, 3), w314), [_rand(rng, 1, 4)]


def _module_cases(rng):
    from . import attention, lmf, losses, model

    d, h = 8, 2
    ap = attention.AttentionParams(d, h, rng)
    xq = _rand(rng, 3, d)
    wsum = Tensor(rng.standard_normal((3, d)))
    yield "multi_head_attention", lambda x, *ps: T.tensor_sum(
        T.mul(attention.multi_head_attention(x, x, ap), wsum)
    ), [xq] + ap.parameters()

    sp = attention.SAUnitParams(d, h, 2 * d, rng)
    x2 = _rand(rng, 2, d)
    w2d = Tensor(rng.standard_normal((2, d)))
    yield "sa_unit", lambda x, *ps: T.tensor_sum(T.mul(attention.sa_unit(x, sp), w2d)), [x2] + sp.parameters()

    cp = attention.CAUnitParams(d, h, rng)
    xa = _rand(rng, 2, d)
    xb = _rand(rng, 3, d)
    w3d = Tensor(rng.standard_normal((3, d)))

    def ca_case(a, b, *ps):
        out_a, out_b = attention.ca_unit(a, b, cp)
        return T.add(T.tensor_sum(T.mul(out_a, w2d)), T.tensor_sum(T.mul(out_b, w3d)))

    yield "ca_unit", ca_case, [xa, xb] + cp.parameters()

    lp = lmf.LMFParams(rank=2, d_in=d, d_out=5, rng=rng)
    za = _rand(rng, d)
    zb = _rand(rng, d)
    w5 = Tensor(rng.standard_normal(5))
    yield "lmf_fuse", lambda a, b, *ps: T.tensor_sum(T.mul(lmf.lmf_fuse(a, b, lp), w5)), [za, zb] + lp.parameters()

    logits = _rand(rng, 3, 5)
    labels = rng.integers(0, 2, (3, 5)).astype(float)
    yield "bce_multilabel", lambda lg: losses.bce_multilabel(lg, labels), [logits]

    f1 = _rand(rng, 6)
    f2 = _rand(rng, 6)
    yield "frcl", lambda a, b: losses.frcl(a, b), [f1, f2]

    yield "trimf_combined_loss", model.toy_loss_case(rng), None  # resolved below


def standard_cases(seed: int = 0):
    """The full gradcheck registry: every primitive plus composed blocks."""
    rng = np.random.default_rng(seed)
    cases = []
    for name, fn, leaves in _primitive_cases(rng):
        cases.append((name, fn, leaves))
    for name, fn, leaves in _module_cases(rng):
        if leaves is None:
            fn, leaves = fn  # composite returning its own (fn, leaves)
        cases.append((name, fn, leaves))
    return cases


def run_all(step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE, max_coords: int = 6, seed: int = 0):
    """Run the registry; returns a list of CheckResult, worst first kept in order."""
    results = []
    for name, fn, leaves in standard_cases(seed):
        err = max_gradient_error(fn, leaves, step=step, max_coords=max_coords, seed=seed)
        results.append(CheckResult(name, err, tolerance))
    return results
