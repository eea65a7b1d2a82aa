"""Patch-context fusion: pool each modality, project both into a shared
width, and combine them with an elementwise product.

The product makes the fused vector sensitive to *agreement* between the
image and the text: with identity projections and zero biases each output
coordinate is exactly the product of the pooled coordinates, so its sign is
the product of their signs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Param, Tensor, hadamard, linear, mean_pool

__all__ = ["PcmParams", "pool_inputs", "pcm_fuse"]


def fan_in_uniform(rng: np.random.Generator, rows: int, cols: int | None = None) -> np.ndarray:
    """Weight init: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    For a matrix the fan-in is its column count; a vector is treated as the
    bias of the matrix drawn just before it, so callers pass that fan-in.
    """
    if cols is None:
        rows, cols, shape = rows, rows, (rows,)
    else:
        shape = (rows, cols)
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, shape)


@dataclass
class PcmParams:
    """Two linear branches feeding the elementwise product."""

    patch_weight: Param  # (d, d_v)
    patch_bias: Param    # (d,)
    token_weight: Param  # (d, d_t)
    token_bias: Param    # (d,)

    @classmethod
    def init(cls, fused_dim: int, patch_dim: int, token_dim: int,
             rng: np.random.Generator) -> "PcmParams":
        w1 = Param(fan_in_uniform(rng, fused_dim, patch_dim))
        b1 = Param(rng.uniform(-1.0 / np.sqrt(patch_dim), 1.0 / np.sqrt(patch_dim), fused_dim))
        w2 = Param(fan_in_uniform(rng, fused_dim, token_dim))
        b2 = Param(rng.uniform(-1.0 / np.sqrt(token_dim), 1.0 / np.sqrt(token_dim), fused_dim))
        return cls(w1, b1, w2, b2)

    @property
    def fused_dim(self) -> int:
        return self.patch_weight.shape[0]

    def params(self) -> list[Param]:
        return [self.patch_weight, self.patch_bias, self.token_weight, self.token_bias]


def pool_inputs(patch_embeddings, token_embeddings) -> tuple[Tensor, Tensor]:
    """Mean-pool the patch matrix and the token matrix into two vectors."""
    return mean_pool(patch_embeddings), mean_pool(token_embeddings)


def pcm_fuse(patch_vec, token_vec, params: PcmParams) -> Tensor:
    """(W1 @ patch_vec + b1) * (W2 @ token_vec + b2), elementwise."""
    return hadamard(
        linear(patch_vec, params.patch_weight, params.patch_bias),
        linear(token_vec, params.token_weight, params.token_bias),
    )
