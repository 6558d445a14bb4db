"""Cubic Bézier evaluation in Bernstein form (numpy or torch)."""
from __future__ import annotations

import numpy as np
import torch


def bernstein_matrix(t):
    """(len(t), 4) cubic Bernstein basis; ``t`` may be an array or tensor."""
    lib = torch if isinstance(t, torch.Tensor) else np
    s = 1 - t
    return lib.stack([s**3, 3 * t * s**2, 3 * t**2 * s, t**3], -1)


def uniform_params(n: int, like=None):
    if n < 2:
        raise ValueError(f"need at least 2 sample points, got {n}")
    if isinstance(like, torch.Tensor):
        return torch.linspace(0.0, 1.0, n, dtype=like.dtype, device=like.device)
    return np.linspace(0.0, 1.0, n)


def sample_bezier(ctrl, n: int):
    """Evaluate cubic curves at ``n`` uniform parameters in [0, 1].

    ``ctrl`` has shape (..., 4, 2); the result has shape (..., n, 2).
    """
    basis = bernstein_matrix(uniform_params(n, ctrl))
    return basis @ ctrl


def bezier_at(ctrl, t):
    return bernstein_matrix(t) @ ctrl


def bezier_tangent(ctrl, t):
    lib = torch if isinstance(t, torch.Tensor) else np
    s = 1 - t
    d = lib.stack([-3 * s**2, 3 * s**2 - 6 * t * s, 6 * t * s - 3 * t**2, 3 * t**2], -1)
    return d @ ctrl


def polygon_from_boundaries(top, bottom):
    """Closed polygon: top points left-to-right, then bottom points reversed."""
    lib = torch if isinstance(top, torch.Tensor) else np
    if lib is torch:
        return torch.cat([top, bottom.flip(-2)], -2)
    return np.concatenate([top, bottom[..., ::-1, :]], -2)
