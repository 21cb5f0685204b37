"""Pure numpy versions of the compiled kernels in ``_ext.pyx``."""

import numpy as np


def jumprelu_forward(z, theta):
    if theta.shape[0] != z.shape[1]:
        raise ValueError(f"theta has {theta.shape[0]} entries, pre-activations have {z.shape[1]}")
    return np.where(z > theta, z, np.zeros((), dtype=z.dtype))


def jumprelu_backward(z, theta, grad_f, epsilon, lam_per_row):
    """Return (grad_z, grad_theta) for a batch; grad_theta is summed over rows."""
    if theta.shape[0] != z.shape[1] or grad_f.shape != z.shape:
        raise ValueError("shape mismatch between pre-activations, thresholds and upstream gradient")
    d = z - theta
    grad_z = np.where(d > 0, grad_f, 0.0)
    window = np.abs(d) <= 0.5 * epsilon
    grad_theta = np.where(window, -(grad_f * theta + lam_per_row) * (1.0 / epsilon), 0.0).sum(axis=0)
    return grad_z, grad_theta


def bf16_round_bits(bits):
    bits = bits.astype(np.uint32, copy=False)
    is_nan = ((bits & 0x7F800000) == 0x7F800000) & ((bits & 0x007FFFFF) != 0)
    rounded = (bits + np.uint32(0x7FFF) + ((bits >> 16) & np.uint32(1))) & np.uint32(0xFFFF0000)
    return np.where(is_nan, (bits & np.uint32(0xFFFF0000)) | np.uint32(0x00400000), rounded).astype(np.uint32)
