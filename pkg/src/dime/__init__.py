"""Maximum-entropy reinforcement learning with diffusion policies.

The policy is a learned denoising diffusion chain over actions; its
single-sample path log-ratio lower-bounds the policy entropy, which plugs
into soft actor-critic style training.  Everything runs on a small float64
autodiff engine so desk-scale results are exactly reproducible.
"""

from dime.autodiff import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
