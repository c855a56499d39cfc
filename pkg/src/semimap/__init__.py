"""Semi-supervised depth-based pose estimation with a latent feature mapping.

Real and synthetic depth images share one encoder; a residual mapper moves
real latents into the synthetic latent space, where a pose head, a
second-view decoder and a latent discriminator operate.  Everything runs on
a small numpy autodiff engine with numba-compiled hot kernels.
"""
from .autodiff import Tape, Tensor, backward, set_precision
from .config import RunConfig
from .nets import ArchConfig, Model

__all__ = ["ArchConfig", "Model", "RunConfig", "Tape", "Tensor", "backward", "set_precision"]
__version__ = "0.1.0"
