"""Central finite-difference gradient checking for torch modules.

Runs in float64. For each sampled parameter coordinate the loss is evaluated
at +h and -h and the two-sided slope is compared against autograd.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch


def relative_error(analytic: float, numeric: float, eps: float = 1e-12) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), eps)


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    parameters: list[torch.nn.Parameter],
    rng: np.random.Generator,
    num_coords: int = 5,
    step: float = 1e-3,
    tol: float = 1e-4,
) -> float:
    """Compare autograd gradients against central differences.

    Samples ``num_coords`` coordinates per parameter tensor, perturbs each in
    place, and returns the worst relative error seen. Raises AssertionError
    when any coordinate exceeds ``tol``.
    """
    for p in parameters:
        if p.dtype != torch.float64:
            raise ValueError("finite_difference_check requires float64 parameters")

    loss = loss_fn()
    grads = torch.autograd.grad(loss, parameters, allow_unused=True)

    worst = 0.0
    for param, grad in zip(parameters, grads):
        if grad is None:
            continue
        flat = param.data.view(-1)
        gflat = grad.reshape(-1)
        n = flat.numel()
        count = min(num_coords, n)
        coords = rng.choice(n, size=count, replace=False)
        for idx in coords:
            idx = int(idx)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + step
                plus = loss_fn().item()
                flat[idx] = orig - step
                minus = loss_fn().item()
                flat[idx] = orig
            numeric = (plus - minus) / (2.0 * step)
            analytic = gflat[idx].item()
            if abs(analytic) < 1e-10 and abs(numeric) < 1e-10:
                continue
            err = relative_error(analytic, numeric)
            worst = max(worst, err)
            assert err < tol, (
                f"gradient mismatch at coord {idx}: analytic={analytic:.6e} "
                f"numeric={numeric:.6e} rel_err={err:.3e}"
            )
    return worst
