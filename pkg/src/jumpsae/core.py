"""JumpReLU SAE / transcoder forward pass, loss and analytic backward pass."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

AUTOENCODER = "autoencoder"
TRANSCODER = "transcoder"
TRAINING = "training"
INFERENCE = "inference"

_KINDS = (AUTOENCODER, TRANSCODER)
_PARAMETERIZATIONS = (TRAINING, INFERENCE)

DEFAULT_BANDWIDTH = 0.001

PARAM_FIELDS = ("w_enc", "b_enc", "w_dec", "b_dec", "theta")


class ParamFormatError(ValueError):
    pass


@dataclass
class SaeParams:
    """Weights of a JumpReLU SAE.

    ``w_enc`` is M x n and ``w_dec`` is n x M, so the dictionary directions are
    the columns of ``w_dec``. ``theta`` is in the same units as the encoder
    pre-activations and must be strictly positive.
    """

    w_enc: np.ndarray
    b_enc: np.ndarray
    w_dec: np.ndarray
    b_dec: np.ndarray
    theta: np.ndarray
    kind: str = AUTOENCODER
    parameterization: str = TRAINING

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown SAE kind {self.kind!r}")
        if self.parameterization not in _PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        m, n = self.w_enc.shape
        if m < 1 or n < 1:
            raise ValueError("SAE needs at least one latent and one input dimension")
        expected = {"b_enc": (m,), "w_dec": (n, m), "b_dec": (n,), "theta": (m,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_inputs(self) -> int:
        return self.w_enc.shape[1]

    @property
    def n_latents(self) -> int:
        return self.w_enc.shape[0]

    @property
    def uses_pre_encoder_bias(self) -> bool:
        return self.kind == AUTOENCODER and self.parameterization == TRAINING

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def replace(self, **changes) -> SaeParams:
        return dataclasses.replace(self, **changes)

    def astype(self, dtype) -> SaeParams:
        return self.replace(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def copy(self) -> SaeParams:
        return self.replace(**{k: v.copy() for k, v in self.arrays().items()})


@dataclass
class ForwardTrace:
    """Intermediate values of one forward pass.

    For a batch input every field holds one entry per row; ``loss`` is the batch
    mean of ``total_loss``.
    """

    z: np.ndarray
    f: np.ndarray
    x_hat: np.ndarray
    recon_loss: np.ndarray | float
    l0: np.ndarray | float
    total_loss: np.ndarray | float

    @property
    def loss(self) -> float:
        return float(np.mean(self.total_loss))


@dataclass
class Gradients:
    w_enc: np.ndarray
    b_enc: np.ndarray
    w_dec: np.ndarray
    b_dec: np.ndarray
    theta: np.ndarray
    epsilon: float

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def replace(self, **changes) -> Gradients:
        return dataclasses.replace(self, **changes)


def _as_batch(x, width, what):
    x = np.asarray(x)
    if x.ndim not in (1, 2) or x.shape[-1] != width:
        raise ValueError(f"{what} has shape {x.shape}, expected trailing dimension {width}")
    return np.ascontiguousarray(np.atleast_2d(x)), x.ndim == 1


def jumprelu(z, theta):
    """z * H(z - theta), with H(0) = 0 so ties at the threshold are inactive."""
    theta = np.asarray(theta)
    if theta.ndim != 1:
        raise ValueError("theta must be a vector")
    if not np.all(theta > 0):
        raise ValueError("JumpReLU thresholds must be strictly positive")
    z2, single = _as_batch(z, theta.shape[0], "pre-activations")
    dtype = np.result_type(z2.dtype, theta.dtype, np.float32)
    out = kernels.jumprelu_forward(
        np.ascontiguousarray(z2, dtype=dtype), np.ascontiguousarray(theta, dtype=dtype)
    )
    return out[0] if single else out


def pre_activations(params: SaeParams, x):
    x2, single = _as_batch(x, params.n_inputs, "input")
    if params.uses_pre_encoder_bias:
        x2 = x2 - params.b_dec
    z = x2 @ params.w_enc.T + params.b_enc
    return z[0] if single else z


def encode(params: SaeParams, x):
    return jumprelu(pre_activations(params, x), params.theta)


def decode(params: SaeParams, f):
    f2, single = _as_batch(f, params.n_latents, "latent code")
    x_hat = f2 @ params.w_dec.T + params.b_dec
    return x_hat[0] if single else x_hat


def reconstruct(params: SaeParams, x):
    return decode(params, encode(params, x))


def sae_loss(params: SaeParams, x, target, lam: float) -> ForwardTrace:
    """Squared reconstruction error plus ``lam`` times the number of active latents."""
    if lam < 0:
        raise ValueError("sparsity coefficient must be non-negative")
    x2, single = _as_batch(x, params.n_inputs, "input")
    t2, _ = _as_batch(target, params.n_inputs, "target")
    if not (np.all(np.isfinite(x2)) and np.all(np.isfinite(t2))):
        raise ValueError("non-finite input to sae_loss")
    z = pre_activations(params, x2)
    f = jumprelu(z, params.theta)
    x_hat = decode(params, f)
    resid = (x_hat - t2).astype(np.float64)
    recon = np.einsum("bi,bi->b", resid, resid)
    l0 = np.count_nonzero(f > 0, axis=1).astype(np.float64)
    total = recon + lam * l0
    if single:
        return ForwardTrace(z[0], f[0], x_hat[0], float(recon[0]), float(l0[0]), float(total[0]))
    return ForwardTrace(z, f, x_hat, recon, l0, total)


def sae_backward(params: SaeParams, x, target, lam: float, epsilon: float = DEFAULT_BANDWIDTH) -> Gradients:
    """Gradients of the batch-mean loss.

    Weight and bias gradients are the exact almost-everywhere derivatives. The
    threshold receives the straight-through pseudo-gradient built from a
    rectangle kernel of width ``epsilon`` centred on the threshold.
    """
    return loss_and_gradients(params, x, target, lam, epsilon)[1]


def loss_and_gradients(params: SaeParams, x, target, lam: float, epsilon: float = DEFAULT_BANDWIDTH):
    """Like :func:`sae_backward` but also returns batch-mean (recon_loss, l0)."""
    if epsilon <= 0:
        raise ValueError("bandwidth epsilon must be positive")
    if lam < 0:
        raise ValueError("sparsity coefficient must be non-negative")
    x2, _ = _as_batch(x, params.n_inputs, "input")
    t2, _ = _as_batch(target, params.n_inputs, "target")
    if x2.shape[0] != t2.shape[0]:
        raise ValueError("input and target batches differ in length")
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.arrays().items()}
    x2 = x2.astype(np.float64)
    rows = x2.shape[0]

    x_in = x2 - p["b_dec"] if params.uses_pre_encoder_bias else x2
    z = np.ascontiguousarray(x_in @ p["w_enc"].T + p["b_enc"])
    f = kernels.jumprelu_forward(z, p["theta"])
    resid = f @ p["w_dec"].T + p["b_dec"] - t2

    grad_xhat = (2.0 / rows) * resid
    grad_f = np.ascontiguousarray(grad_xhat @ p["w_dec"])
    grad_z, grad_theta = kernels.jumprelu_backward(z, p["theta"], grad_f, float(epsilon), lam / rows)

    grad_b_dec = grad_xhat.sum(axis=0)
    if params.uses_pre_encoder_bias:
        grad_b_dec = grad_b_dec - grad_z.sum(axis=0) @ p["w_enc"]
    grads = Gradients(
        w_enc=grad_z.T @ x_in,
        b_enc=grad_z.sum(axis=0),
        w_dec=grad_xhat.T @ f,
        b_dec=grad_b_dec,
        theta=grad_theta,
        epsilon=float(epsilon),
    )
    recon = float(np.einsum("bi,bi->", resid, resid)) / rows
    l0 = np.count_nonzero(f) / rows
    return (recon, l0), grads


# --- serialization -------------------------------------------------------

MAGIC = b"JSAE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIBBII")


def params_to_bytes(params: SaeParams) -> bytes:
    n, m = params.w_dec.shape
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, _KINDS.index(params.kind), _PARAMETERIZATIONS.index(params.parameterization), n, m
    )
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays().values())
    return header + body


def params_from_bytes(data: bytes, source: str = "<bytes>") -> SaeParams:
    if len(data) < _HEADER.size:
        raise ParamFormatError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, kind, param, n, m = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ParamFormatError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ParamFormatError(f"{source}: unsupported format version {version}")
    if kind >= len(_KINDS) or param >= len(_PARAMETERIZATIONS):
        raise ParamFormatError(f"{source}: bad kind/parameterization byte")
    shapes = [(m, n), (m,), (n, m), (n,), (m,)]
    count = sum(int(np.prod(s)) for s in shapes)
    if len(data) != _HEADER.size + 4 * count:
        raise ParamFormatError(f"{source}: payload is {len(data) - _HEADER.size} bytes, expected {4 * count}")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    arrays, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[pos : pos + size].reshape(s).copy())
        pos += size
    return SaeParams(*arrays, kind=_KINDS[kind], parameterization=_PARAMETERIZATIONS[param])


def save_params(params: SaeParams, path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(path, params_to_bytes(params))


def load_params(path) -> SaeParams:
    path = Path(path)
    return params_from_bytes(path.read_bytes(), str(path))
