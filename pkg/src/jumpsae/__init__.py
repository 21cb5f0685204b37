"""JumpReLU sparse autoencoders over transformer activations.

Importing the package stays light (numpy only); the torch-backed toy host is
loaded from :mod:`jumpsae.toy` on demand.
"""

from .core import (
    AUTOENCODER,
    INFERENCE,
    TRAINING,
    TRANSCODER,
    ForwardTrace,
    Gradients,
    SaeParams,
    decode,
    encode,
    jumprelu,
    load_params,
    reconstruct,
    sae_backward,
    sae_loss,
    save_params,
)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "AUTOENCODER", "INFERENCE", "TRAINING", "TRANSCODER", "ForwardTrace", "Gradients", "SaeParams",
    "decode", "encode", "jumprelu", "load_params", "reconstruct", "sae_backward", "sae_loss", "save_params",
    "BACKEND", "__version__",
]
