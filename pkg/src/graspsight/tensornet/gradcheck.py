"""Central finite-difference check of analytic parameter gradients."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .network import Network, backward
from .tensor import Tensor


def grad_check(network: Network, loss_fn: Callable[[Network], Tensor], epsilon: float = 1e-5,
               corrupt: Optional[Callable[[str, np.ndarray], np.ndarray]] = None) -> float:
    """Largest relative error between backprop and central differences.

    ``loss_fn`` runs a forward pass and returns a scalar loss. The error per
    element is ``|a - n| / max(|a|, |n|, 1e-8)``. ``corrupt`` may rewrite the
    analytic gradients before comparison (used as a negative control).
    """
    if network.dtype != np.float64:
        raise TypeError("grad_check needs a float64 network; call network.astype(np.float64)")
    backward(network, loss_fn(network))
    analytic = {name: p.grad.copy() for name, p in network.params.items()}
    if corrupt is not None:
        analytic = {name: corrupt(name, g) for name, g in analytic.items()}
    worst = 0.0
    for name, p in network.params.items():
        flat = p.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn(network).item()
            flat[i] = orig - epsilon
            down = loss_fn(network).item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * epsilon)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    network.zero_grad()
    return worst
