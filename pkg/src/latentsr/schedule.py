"""Diffusion time discretization and timestep sampling.

A schedule is a variance-preserving table (alpha, sigma) over indices
0..T with log-SNR ``lam = log(alpha^2 / sigma^2)``. Index 0 is the clean
endpoint (alpha ~ 1) and index T the fully-noised endpoint (alpha ~ 0).
Endpoints are clamped so the log-SNR stays finite at both ends.

The training-time sampler oversamples the final index T early in training
and decays linearly to the uniform distribution over {1..T}.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

# alpha is kept inside [ALPHA_FLOOR, sqrt(1 - SIGMA_FLOOR^2)]; additionally
# alpha[T] is forced at or below ALPHA_TOP_CEIL so the noised endpoint is
# genuinely noise-dominated for every kind and T.
ALPHA_FLOOR = 1e-4
SIGMA_FLOOR = 1e-4
ALPHA_TOP_CEIL = 1e-2

SCHEDULE_KINDS = ("cosine", "linear-beta")


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized (alpha, sigma, lam) tables over indices 0..T.

    Invariants (checked at construction):
      * alpha[i]^2 + sigma[i]^2 = 1 within 1e-9 (variance preserving)
      * lam strictly decreasing
      * alpha[0] >= 1 - 1e-6, sigma[0] <= 1e-3, alpha[T] <= 1e-2,
        sigma[T] >= 1 - 1e-4
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        if self.T < 1:
            raise InvalidArgument("schedule needs T >= 1")
        for name in ("alpha", "sigma", "lam"):
            arr = getattr(self, name)
            if arr.shape != (self.T + 1,):
                raise InvalidArgument(f"{name} must have shape ({self.T + 1},)")
        vp = self.alpha**2 + self.sigma**2
        if np.max(np.abs(vp - 1.0)) > 1e-9:
            raise InvalidArgument("schedule is not variance preserving")
        if not np.all(np.diff(self.lam) < 0):
            raise InvalidArgument("log-SNR must be strictly decreasing")
        if self.alpha[0] < 1 - 1e-6 or self.sigma[0] > 1e-3:
            raise InvalidArgument("clean endpoint out of bounds")
        if self.alpha[-1] > ALPHA_TOP_CEIL or self.sigma[-1] < 1 - 1e-4:
            raise InvalidArgument("noised endpoint out of bounds")


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    """Build a variance-preserving schedule of the given kind.

    ``cosine`` uses alpha(u) = cos(u*pi/2) on u in [0,1]; ``linear-beta``
    uses the classic linearly increasing per-step variance (rescaled with
    1000/T and capped so small-T tables stay monotone). Both kinds are
    endpoint-clamped, deterministic, and independent of global RNG state.
    """
    if T < 1:
        raise InvalidArgument(f"T must be >= 1, got {T}")
    if kind == "cosine":
        u = np.arange(T + 1, dtype=np.float64) / T
        alpha = np.cos(u * np.pi / 2)
    elif kind == "linear-beta":
        beta = np.linspace(1e-4, 2e-2, T, dtype=np.float64) * (1000.0 / T)
        beta = np.clip(beta, 1e-8, 0.28)
        alpha_sq = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        alpha = np.sqrt(alpha_sq)
    else:
        raise InvalidArgument(f"unknown schedule kind {kind!r}")

    alpha = np.clip(alpha, ALPHA_FLOOR, np.sqrt(1.0 - SIGMA_FLOOR**2))
    alpha[-1] = min(alpha[-1], ALPHA_TOP_CEIL)
    sigma = np.sqrt(1.0 - alpha**2)
    lam = 2.0 * (np.log(alpha) - np.log(sigma))
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma, lam=lam)


def log_snr(s: NoiseSchedule, i: int) -> float:
    """Log signal-to-noise ratio at step index i (nats)."""
    if not 0 <= i <= s.T:
        raise InvalidArgument(f"step index {i} out of range [0, {s.T}]")
    return float(np.log(s.alpha[i] ** 2 / s.sigma[i] ** 2))


@dataclass(frozen=True)
class TimestepSampler:
    """Training-time index sampler with decaying oversampling of index T.

    At iteration k the probability of drawing the top index T is
    ``max(1/T, p0 * (1 - k/warmup))``; the remaining mass is shared
    equally by {1..T-1}. For k >= warmup the distribution is exactly
    uniform over {1..T}. Stateless: callers own the iteration counter.
    """

    T: int
    p0: float = 0.5
    warmup: int = 10_000

    def __post_init__(self):
        if self.T < 1:
            raise InvalidArgument("sampler needs T >= 1")
        if not 0.0 <= self.p0 <= 1.0:
            raise InvalidArgument("p0 must lie in [0, 1]")
        if self.warmup < 0:
            raise InvalidArgument("warmup must be >= 0")

    def top_probability(self, iteration: int) -> float:
        """P(index = T) at the given iteration."""
        if iteration < 0:
            raise InvalidArgument("iteration must be >= 0")
        uniform = 1.0 / self.T
        if self.warmup == 0 or iteration >= self.warmup:
            return uniform
        return max(uniform, self.p0 * (1.0 - iteration / self.warmup))

    def probabilities(self, iteration: int) -> np.ndarray:
        """Full distribution over indices {1..T} (array of length T)."""
        p_top = self.top_probability(iteration)
        if self.T == 1:
            return np.array([1.0])
        probs = np.full(self.T, (1.0 - p_top) / (self.T - 1))
        probs[-1] = p_top
        return probs


def sample_timestep(sampler: TimestepSampler, iteration: int,
                    rng: np.random.Generator, size: int | None = None):
    """Draw step indices in {1..T} for a training iteration.

    Deterministic given (iteration, generator state). Returns an int when
    ``size`` is None, else an int64 array of that length.
    """
    p_top = sampler.top_probability(iteration)
    n = 1 if size is None else size
    u = rng.random(n)
    out = np.empty(n, dtype=np.int64)
    top = u < p_top
    out[top] = sampler.T
    n_rest = int((~top).sum())
    if n_rest:
        # T == 1 implies p_top == 1, so this branch only runs for T >= 2
        out[~top] = rng.integers(1, sampler.T, size=n_rest)
    return int(out[0]) if size is None else out


def schedule_table(s: NoiseSchedule) -> str:
    """Plain-text table (index, alpha, sigma, lambda) for inspection."""
    lines = ["index\talpha\tsigma\tlambda"]
    for i in range(s.T + 1):
        lines.append(f"{i}\t{s.alpha[i]:.10g}\t{s.sigma[i]:.10g}\t{s.lam[i]:.10g}")
    return "\n".join(lines) + "\n"
