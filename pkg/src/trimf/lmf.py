"""Low-rank fusion of two class-token vectors into one fusion vector.

The fusion is the elementwise product of the two rank-summed projections:

    h[j] = (sum_i  wa[i] @ z_a)[j] * (sum_i  wb[i] @ z_b)[j]

with no bias augmentation by default, so the map is exactly bilinear in
(z_a, z_b). ``bias_augment`` appends a constant 1 to each input vector for
the affine variant. ``lmf_oracle`` is a deliberately naive index-loop
evaluation kept as the reference for the vectorized path.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ConfigError
from .parameters import ParamGroup
from .tensor import Tensor


# Std of the summed projection at init. Unit-order projections make the
# summed contrastive penalty dwarf the classification term by ~500x at
# toy dimensions (sum over the fusion axis, three pairs, weights ~3) and
# ranking never takes off; 0.2 starts the two at comparable magnitude.
INIT_PROJECTION_STD = 0.2


class LMFParams(ParamGroup):
    """rank x d_out x d_z factor stacks for each of the two inputs."""

    def __init__(self, rank: int, d_in: int, d_out: int, rng, bias_augment: bool = False):
        if rank < 1:
            raise ConfigError(f"lmf rank={rank} must be >= 1")
        d_z = d_in + 1 if bias_augment else d_in
        scale = INIT_PROJECTION_STD / np.sqrt(rank * d_z)
        self.factors_a = Tensor(rng.normal(0.0, scale, (rank, d_out, d_z)), requires_grad=True)
        self.factors_b = Tensor(rng.normal(0.0, scale, (rank, d_out, d_z)), requires_grad=True)
        self.rank = rank
        self.d_in = d_in
        self.d_out = d_out
        self.bias_augment = bias_augment


def _augment(z: Tensor) -> Tensor:
    ones = Tensor(np.ones(z.shape[:-1] + (1,)))
    return T.concat([z, ones], axis=-1)


def lmf_fuse(z_a: Tensor, z_b: Tensor, params: LMFParams) -> Tensor:
    """Fuse two vectors ``[d_in]`` (or batches ``[B, d_in]``) into ``[d_out]``.

    The per-rank projections are summed before the product; by linearity this
    equals projecting with the rank-summed factor matrix.
    """
    if z_a.shape != z_b.shape or z_a.shape[-1] != params.d_in:
        raise T.ShapeError(
            f"lmf_fuse inputs {z_a.shape}/{z_b.shape} do not match factor input dim {params.d_in}"
        )
    squeeze = z_a.ndim == 1
    if squeeze:
        z_a = T.reshape(z_a, (1, params.d_in))
        z_b = T.reshape(z_b, (1, params.d_in))
    if params.bias_augment:
        z_a, z_b = _augment(z_a), _augment(z_b)
    wa = T.tensor_sum(params.factors_a, axis=0)  # [d_out, d_z]
    wb = T.tensor_sum(params.factors_b, axis=0)
    proj_a = z_a @ T.swap_last(wa)
    proj_b = z_b @ T.swap_last(wb)
    h = T.mul(proj_a, proj_b)
    if squeeze:
        h = T.reshape(h, (params.d_out,))
    return h


def lmf_oracle(z_a, z_b, params: LMFParams) -> np.ndarray:
    """Straight-line evaluation with explicit index loops (reference path)."""
    za = np.asarray(z_a.data if isinstance(z_a, Tensor) else z_a, dtype=float)
    zb = np.asarray(z_b.data if isinstance(z_b, Tensor) else z_b, dtype=float)
    if za.shape != (params.d_in,) or zb.shape != (params.d_in,):
        raise T.ShapeError(f"lmf_oracle expects vectors of length {params.d_in}")
    if params.bias_augment:
        za = np.append(za, 1.0)
        zb = np.append(zb, 1.0)
    fa = params.factors_a.data
    fb = params.factors_b.data
    d_z = za.shape[0]
    h = np.zeros(params.d_out)
    for j in range(params.d_out):
        total_a = 0.0
        total_b = 0.0
        for i in range(params.rank):
            for k in range(d_z):
                total_a += fa[i, j, k] * za[k]
                total_b += fb[i, j, k] * zb[k]
        h[j] = total_a * total_b
    return h
