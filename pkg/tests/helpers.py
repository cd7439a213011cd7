"""Shared test utilities: directional finite-difference gradient checks."""

import numpy as np
import torch


def directional_grad_errors(params, loss_fn, n_dirs=3, h=1e-5, seed=0):
    """Relative errors between analytic and central-difference directional
    derivatives of ``loss_fn`` with respect to ``params`` (float64).

    The oracle perturbs the parameters along random unit directions and
    never consults autograd for the reference values.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    grad = torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).flatten()
        for p in params
    ]).detach()

    rng = np.random.default_rng(seed)
    errors = []
    with torch.no_grad():
        flat = torch.cat([p.flatten() for p in params]).clone()
        for _ in range(n_dirs):
            v = torch.from_numpy(rng.standard_normal(flat.numel()))
            v = v / v.norm()
            analytic = float(grad @ v)
            _assign(params, flat + h * v)
            up = float(loss_fn())
            _assign(params, flat - h * v)
            down = float(loss_fn())
            _assign(params, flat)
            fd = (up - down) / (2 * h)
            denom = max(abs(analytic), abs(fd), 1e-8)
            errors.append(abs(analytic - fd) / denom)
    return errors


def _assign(params, flat):
    offset = 0
    for p in params:
        n = p.numel()
        p.copy_(flat[offset:offset + n].view_as(p))
        offset += n
