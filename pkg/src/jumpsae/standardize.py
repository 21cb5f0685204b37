"""Fold input normalization and the pre-encoder bias into SAE weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import AUTOENCODER, INFERENCE, TRAINING, SaeParams

DEFAULT_SAMPLE_COUNT = 100_000


@dataclass(frozen=True)
class NormConstant:
    c: float
    sample_count: int

    def __post_init__(self):
        if not (np.isfinite(self.c) and self.c > 0):
            raise ValueError(f"normalization constant must be finite and positive, got {self.c}")


def estimate_norm_constant(stream: Iterable, sample_count: int = DEFAULT_SAMPLE_COUNT) -> NormConstant:
    """c = sqrt(mean squared norm) over the first ``sample_count`` rows of ``stream``.

    ``stream`` may yield single vectors or row blocks.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be at least 1")
    total = 0.0
    seen = 0
    width = None
    for item in stream:
        block = np.atleast_2d(np.asarray(item, dtype=np.float64))
        if width is None:
            width = block.shape[1]
        elif block.shape[1] != width:
            raise ValueError(f"stream changed dimension from {width} to {block.shape[1]}")
        block = block[: sample_count - seen]
        total += float(np.einsum("ij,ij->", block, block))
        seen += block.shape[0]
        if seen >= sample_count:
            break
    if seen == 0:
        raise ValueError("empty activation stream")
    if total == 0.0:
        raise ValueError("activation stream has zero norm; cannot normalize")
    return NormConstant(float(np.sqrt(total / seen)), seen)


def fold_parameters(params: SaeParams, c: float) -> SaeParams:
    """Return inference parameters that consume raw activations.

    The folded SAE's reconstruction of ``x_raw`` equals ``c`` times the training
    SAE's reconstruction of ``x_raw / c``. Latent activations come out scaled by
    ``c`` as well, so the set of active latents is unchanged.
    """
    if params.parameterization != TRAINING:
        raise ValueError("parameters are already folded")
    if not (np.isfinite(c) and c > 0):
        raise ValueError(f"normalization constant must be positive, got {c}")
    b_enc = c * params.b_enc
    if params.kind == AUTOENCODER:
        b_enc = b_enc - c * (params.w_enc @ params.b_dec)
    return params.replace(
        w_enc=params.w_enc.copy(),
        w_dec=params.w_dec.copy(),
        b_enc=b_enc.astype(params.b_enc.dtype),
        b_dec=(c * params.b_dec).astype(params.b_dec.dtype),
        theta=(c * params.theta).astype(params.theta.dtype),
        parameterization=INFERENCE,
    )


def raw_transform(params: SaeParams, norm: float | None = None):
    """Callable mapping raw activations to raw-space reconstructions.

    Inference parameters ignore ``norm``. Training parameters need it: inputs
    are divided by it before the SAE and outputs multiplied after.
    """
    from .core import reconstruct

    if params.parameterization == INFERENCE:
        return lambda x: reconstruct(params, x)
    if norm is None:
        raise ValueError("training-parameterized SAE needs its normalization constant")
    c = float(norm)
    return lambda x: c * reconstruct(params, _at_precision(params, x) / c)


def raw_encoder(params: SaeParams, norm: float | None = None):
    """Callable mapping raw activations to latent codes (of either parameterization)."""
    from .core import encode

    if params.parameterization == INFERENCE:
        return lambda x: encode(params, x)
    if norm is None:
        raise ValueError("training-parameterized SAE needs its normalization constant")
    c = float(norm)
    return lambda x: encode(params, _at_precision(params, x) / c)


def _at_precision(params: SaeParams, x) -> np.ndarray:
    # scale inputs at the SAE's own precision, not that of the incoming rows
    x = np.asarray(x)
    return x.astype(np.result_type(x.dtype, params.w_enc.dtype), copy=False)
