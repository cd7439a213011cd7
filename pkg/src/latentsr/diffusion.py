"""Conditioned forward processes, training loss, and samplers.

Three conditioning modes share one machinery:

* ``bidirectional`` — the forward noising draws its Gaussian mean and
  per-element scale from the LR latent:
  ``z_t = alpha_i * z_h + sigma_i * z_mu + sigma_i * z_sigma * eps``.
  Inference starts from ``N(z_mu, diag(z_sigma^2))`` instead of noise.
* ``mean-only`` — identical with ``z_sigma`` forced to all-ones (only the
  Gaussian mean is shifted by the LR latent).
* ``unidirectional`` — the classic baseline: noising ignores the LR
  latent (``z_t = alpha_i * z_h + sigma_i * eps``) and the denoiser
  receives it by channel concatenation instead.

The reverse update is marginal-matching: ``z_j = alpha_j * z_hat +
sigma_j * eps_hat`` where ``eps_hat`` is either redrawn from the
conditioning distribution each step (stochastic) or the noise implied by
the current state (deterministic). A literal-update variant from the
printed source formula is kept behind a flag for comparison; it
degenerates (both of its coefficients multiply the prediction) and is
not used anywhere else.
"""

from dataclasses import dataclass, field
from enum import Enum

import torch

from .errors import InvalidArgument, NumericError
from .models.networks import LRCondition
from .schedule import NoiseSchedule


class ConditioningMode(str, Enum):
    UNIDIRECTIONAL = "unidirectional"
    BIDIRECTIONAL = "bidirectional"
    MEAN_ONLY = "mean-only"


_CONDITIONED = (ConditioningMode.BIDIRECTIONAL, ConditioningMode.MEAN_ONLY)


@dataclass
class LossWeights:
    """Loss weight as a function of log-SNR; constant 1 by default."""

    omega: callable = field(default=lambda lam: torch.ones_like(lam))

    def __call__(self, lam: torch.Tensor) -> torch.Tensor:
        w = self.omega(lam)
        if (w < 0).any():
            raise InvalidArgument("loss weights must be nonnegative")
        return w


def min_snr_weights(gamma: float = 5.0) -> LossWeights:
    """min(SNR, gamma) / SNR style weighting, selectable via config."""

    def omega(lam):
        snr = torch.exp(lam)
        return torch.clamp(snr, max=gamma) / snr

    return LossWeights(omega=omega)


def _coeffs(s: NoiseSchedule, i, ref: torch.Tensor):
    """(alpha_i, sigma_i) broadcast to the batch layout of ``ref``."""
    idx = torch.as_tensor(i, dtype=torch.long)
    if (idx < 0).any() or (idx > s.T).any():
        raise InvalidArgument(f"step index out of range [0, {s.T}]")
    shape = (-1,) + (1,) * (ref.ndim - 1)
    alpha = torch.as_tensor(s.alpha, dtype=ref.dtype)[idx].reshape(shape)
    sigma = torch.as_tensor(s.sigma, dtype=ref.dtype)[idx].reshape(shape)
    return alpha, sigma


def _lam(s: NoiseSchedule, i, ref: torch.Tensor):
    idx = torch.as_tensor(i, dtype=torch.long).reshape(-1)
    return torch.as_tensor(s.lam, dtype=ref.dtype)[idx]


def _require_cond(cond, mode):
    if mode in _CONDITIONED and cond is None:
        raise InvalidArgument(f"mode {mode.value} requires an LRCondition")
    if mode is ConditioningMode.UNIDIRECTIONAL:
        return None
    return cond


def forward_sample(z_h: torch.Tensor, cond: LRCondition | None, i, s: NoiseSchedule,
                   eps: torch.Tensor, mode: ConditioningMode) -> torch.Tensor:
    """Draw z_i from the forward (noising) process given the noise draw."""
    mode = ConditioningMode(mode)
    _require_cond(cond, mode)
    if eps.shape != z_h.shape:
        raise InvalidArgument("eps must match z_h shape")
    alpha, sigma = _coeffs(s, i, z_h)
    if mode is ConditioningMode.UNIDIRECTIONAL:
        return alpha * z_h + sigma * eps
    z_sigma = cond.z_sigma if mode is ConditioningMode.BIDIRECTIONAL \
        else torch.ones_like(cond.z_sigma)
    return alpha * z_h + sigma * cond.z_mu + sigma * (z_sigma * eps)


def unet_input(z_t: torch.Tensor, cond: LRCondition | None,
               mode: ConditioningMode) -> torch.Tensor:
    """Denoiser input: z_t alone, or concat with the LR mean latent."""
    mode = ConditioningMode(mode)
    if mode is ConditioningMode.UNIDIRECTIONAL:
        if cond is None:
            raise InvalidArgument("unidirectional denoising needs the LR latent to concatenate")
        return torch.cat([z_t, cond.z_mu], dim=1)
    return z_t


def diffusion_loss(unet, z_h: torch.Tensor, cond: LRCondition | None, i,
                   s: NoiseSchedule, eps: torch.Tensor, mode: ConditioningMode,
                   weights: LossWeights | None = None,
                   cond_grad_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted MSE between the UNet's clean-latent prediction and z_h.

    ``cond_grad_mask`` (bool per batch element) controls which elements
    let gradient flow into the LR encoder; elements with a False mask use
    a detached condition (the top-step-only rule lives in training).
    """
    mode = ConditioningMode(mode)
    cond = cond if mode is ConditioningMode.UNIDIRECTIONAL else _require_cond(cond, mode)
    used = cond
    if cond is not None and cond_grad_mask is not None:
        m = cond_grad_mask.to(z_h.dtype).reshape((-1,) + (1,) * (z_h.ndim - 1))
        used = LRCondition(
            z_mu=m * cond.z_mu + (1 - m) * cond.z_mu.detach(),
            z_sigma=m * cond.z_sigma + (1 - m) * cond.z_sigma.detach(),
        )
    z_t = forward_sample(z_h, used, i, s, eps, mode)
    if not torch.isfinite(z_t).all():
        raise NumericError("z_t", "forward sample")
    lam = _lam(s, i, z_h)
    pred = unet(unet_input(z_t, used, mode), lam)
    if not torch.isfinite(pred).all():
        raise NumericError("unet_prediction")
    w = (weights or LossWeights())(lam)
    per_sample = (pred - z_h).square().flatten(1).mean(dim=1)
    loss = (w * per_sample).mean()
    if not torch.isfinite(loss):
        raise NumericError("loss")
    return loss


def _eps_hat_draw(cond: LRCondition | None, mode: ConditioningMode,
                  shape, dtype, rng: torch.Generator | None):
    n = torch.randn(shape, dtype=dtype, generator=rng)
    if mode is ConditioningMode.BIDIRECTIONAL:
        return cond.z_mu + cond.z_sigma * n
    if mode is ConditioningMode.MEAN_ONLY:
        return cond.z_mu + n
    return n


def sampler_step(z_t: torch.Tensor, z_hat: torch.Tensor, i: int, j: int,
                 s: NoiseSchedule, cond: LRCondition | None, mode: ConditioningMode,
                 rng: torch.Generator | None = None, deterministic: bool = True,
                 paper_literal: bool = False) -> torch.Tensor:
    """One reverse step from index i to index j < i.

    Deterministic reuses the implied noise (z_t - alpha_i z_hat)/sigma_i;
    stochastic redraws eps_hat from the conditioning distribution.
    The terminal step to index 0 collapses to the prediction exactly.
    """
    mode = ConditioningMode(mode)
    _require_cond(cond, mode)
    if not (0 <= j < i <= s.T):
        raise InvalidArgument(f"need 0 <= target {j} < current {i} <= {s.T}")
    alpha_i, sigma_i = _coeffs(s, [i], z_t)
    alpha_j, sigma_j = _coeffs(s, [j], z_t)
    if paper_literal:
        # printed-source update: both coefficients multiply the prediction
        abar_j = alpha_j**2
        coef = torch.sqrt(torch.clamp(1 - abar_j - sigma_i**2, min=0.0))
        eps_hat = _eps_hat_draw(cond, mode, z_t.shape, z_t.dtype, rng)
        return torch.sqrt(abar_j) * z_hat + coef * z_hat + sigma_i * eps_hat
    if j == 0:
        return z_hat
    if deterministic:
        eps_hat = (z_t - alpha_i * z_hat) / sigma_i
    else:
        eps_hat = _eps_hat_draw(cond, mode, z_t.shape, z_t.dtype, rng)
    return alpha_j * z_hat + sigma_j * eps_hat


def step_grid(T: int, num_steps: int) -> list:
    """Uniform descending sub-grid of {0..T} with num_steps transitions."""
    if num_steps < 1:
        raise InvalidArgument("num_steps must be >= 1")
    if num_steps > T:
        raise InvalidArgument(f"num_steps {num_steps} exceeds schedule T {T}")
    grid = [int(T * k / num_steps + 0.5) for k in range(num_steps, -1, -1)]
    if len(set(grid)) != len(grid):
        raise InvalidArgument("degenerate step grid")
    return grid


def initial_latent(cond: LRCondition | None, mode: ConditioningMode,
                   shape, dtype, rng: torch.Generator | None) -> torch.Tensor:
    """Inference starting point at index T (the LR-conditioned Gaussian)."""
    mode = ConditioningMode(mode)
    _require_cond(cond, mode)
    return _eps_hat_draw(cond, mode, shape, dtype, rng)


def sample(unet, cond: LRCondition, s: NoiseSchedule, num_steps: int,
           mode: ConditioningMode, rng: torch.Generator | None = None,
           deterministic: bool = True, z_init: torch.Tensor | None = None,
           collect_trajectory: bool = False):
    """Run the reverse process down a uniform grid and return z_0.

    num_steps=1 is the one-step regime: the result is exactly the
    denoiser's prediction at the top index.
    """
    mode = ConditioningMode(mode)
    if cond is None:
        raise InvalidArgument("sample() needs the LR condition in every mode")
    grid = step_grid(s.T, num_steps)
    shape, dtype = cond.z_mu.shape, cond.z_mu.dtype
    z = z_init if z_init is not None else initial_latent(cond, mode, shape, dtype, rng)
    trajectory = [(s.T, z)] if collect_trajectory else None
    for i, j in zip(grid[:-1], grid[1:]):
        z_hat = unet(unet_input(z, cond, mode), _lam(s, [i] * z.shape[0], z))
        z = sampler_step(z, z_hat, i, j, s, cond, mode,
                         rng=rng, deterministic=deterministic)
        if collect_trajectory:
            trajectory.append((j, z))
    if collect_trajectory:
        return z, trajectory
    return z
