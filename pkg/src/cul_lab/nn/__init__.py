"""Small conditional denoiser MLP with exact gradients and Adam.

The two hot kernels (batched forward and fused MSE forward/backward) come
from the compiled ``_kernels`` extension when it is importable and fall back
to the numpy implementation otherwise. Set ``CUL_LAB_PURE_PYTHON=1`` to force
the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
kernels = _kernels_py
if not os.environ.get("CUL_LAB_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        kernels = _compiled
        BACKEND = "cython"

from .net import (  # noqa: E402
    Architecture,
    DenoiserNet,
    init_params,
    forward,
    loss_and_grad,
    time_embed,
    param_distance,
)
from .adam import AdamState, adam_step  # noqa: E402

__all__ = [
    "BACKEND",
    "kernels",
    "Architecture",
    "DenoiserNet",
    "init_params",
    "forward",
    "loss_and_grad",
    "time_embed",
    "param_distance",
    "AdamState",
    "adam_step",
]
