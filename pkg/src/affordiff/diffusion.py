"""Noise schedules, forward noising and the few-step deterministic sampler.

The sampler integrates the probability-flow ODE with the first-order
exponential integrator in data-prediction form. Between grid timesteps
``k_i > k_j`` it sets

    x <- sqrt(abar_j) * x0_hat + sigma_j * eps_hat,

where ``x0_hat`` is the denoiser output at ``(k_i, x)`` and ``eps_hat`` is
recovered from it algebraically. After the last model evaluation the state
is moved to the clean end of the trajectory (``abar = 1``), i.e. ``x0_hat``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

SCHEDULE_KINDS = ("cosine", "linear-beta")
SPACINGS = ("uniform-k", "uniform-log-snr")


class SamplingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray = field(repr=False)
    kind: str = "custom"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 1:
            raise ValueError("alpha_bar must be a nonempty 1-d array")
        if np.any(ab < 0) or np.any(ab > 1):
            raise ValueError("alpha_bar entries must lie in [0, 1]")
        if np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be non-increasing")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def num_steps(self) -> int:
        return len(self.alpha_bar)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    @property
    def log_snr(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.alpha_bar) - np.log1p(-self.alpha_bar)

    def drift(self) -> np.ndarray:
        """Per-step ``f(k)`` of the variance-preserving ODE, ``d log sqrt(abar) / dk``."""
        return np.gradient(0.5 * np.log(np.maximum(self.alpha_bar, 1e-300)))

    def diffusion_sq(self) -> np.ndarray:
        """Per-step ``g(k)^2 = d sigma^2/dk - 2 f(k) sigma^2``."""
        s2 = 1.0 - self.alpha_bar
        return np.gradient(s2) - 2.0 * self.drift() * s2

    def check(self, k) -> np.ndarray:
        k = np.asarray(k)
        if not np.issubdtype(k.dtype, np.integer):
            raise ValueError("timesteps must be integers")
        if np.any(k < 0) or np.any(k >= self.num_steps):
            raise ValueError(f"timestep out of range [0, {self.num_steps})")
        return k

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_steps": self.num_steps}


def cosine_schedule(num_steps: int = 1000, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    t = np.arange(num_steps + 1, dtype=np.float64) / num_steps
    f = np.cos((t + offset) / (1 + offset) * math.pi / 2) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, max_beta)
    return NoiseSchedule(np.cumprod(1.0 - betas), "cosine")


def linear_beta_schedule(num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                         max_beta: float = 0.999) -> NoiseSchedule:
    """Linearly spaced betas; the endpoints are quoted for 1000 steps and rescaled
    by ``1000 / num_steps`` so that total noise does not depend on the step count."""
    scale = 1000.0 / num_steps
    betas = np.clip(np.linspace(scale * beta_start, scale * beta_end, num_steps, dtype=np.float64), 0.0, max_beta)
    return NoiseSchedule(np.cumprod(1.0 - betas), "linear-beta")


def make_schedule(kind: str = "cosine", num_steps: int = 1000) -> NoiseSchedule:
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if kind == "cosine":
        return cosine_schedule(num_steps)
    if kind == "linear-beta":
        return linear_beta_schedule(num_steps)
    raise ValueError(f"unknown schedule kind {kind!r}")


def schedule_from_dict(d: dict) -> NoiseSchedule:
    return make_schedule(d.get("kind", "cosine"), int(d.get("num_steps", 1000)))


def _bcast(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def q_sample(schedule: NoiseSchedule, x0, k, noise) -> np.ndarray:
    """``sqrt(abar_k) * x0 + sqrt(1 - abar_k) * noise``; ``k`` may be per batch row."""
    k = schedule.check(k)
    x0 = np.asarray(x0)
    ab = _bcast(schedule.alpha_bar[k], x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(noise)


def x0_to_eps(schedule: NoiseSchedule, x0_hat, x_k, k) -> np.ndarray:
    k = schedule.check(k)
    ab = schedule.alpha_bar[k]
    if np.any(ab >= 1.0):
        raise ValueError("x0_to_eps is undefined where alpha_bar == 1")
    x_k = np.asarray(x_k)
    ab = _bcast(ab, x_k)
    return (x_k - np.sqrt(ab) * np.asarray(x0_hat)) / np.sqrt(1.0 - ab)


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 5
    spacing: str = "uniform-k"
    init_sigma: float = 1.0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("sampler needs at least one step")
        if self.spacing not in SPACINGS:
            raise ValueError(f"unknown spacing {self.spacing!r}")
        if not self.init_sigma > 0:
            raise ValueError("init_sigma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_grid(schedule: NoiseSchedule, cfg: SamplerConfig) -> np.ndarray:
    """Strictly decreasing model-evaluation timesteps, starting at ``K_F - 1``."""
    below_one = np.nonzero(schedule.alpha_bar < 1.0)[0]
    if len(below_one) == 0:
        raise ValueError("schedule never adds noise")
    k_min, k_max = int(below_one[0]), schedule.num_steps - 1
    n = cfg.num_steps
    if n > k_max - k_min + 1:
        raise ValueError(f"{n} sampler steps exceed the {k_max - k_min + 1} usable timesteps")
    if n == 1:
        return np.array([k_max])
    if cfg.spacing == "uniform-k":
        grid = np.round(np.linspace(k_max, k_min, n)).astype(np.int64)
    else:
        lam = schedule.log_snr
        targets = np.linspace(lam[k_max], lam[k_min], n)
        grid = np.array([int(np.argmin(np.abs(lam - t))) for t in targets], dtype=np.int64)
        grid[0], grid[-1] = k_max, k_min
        # nearest-match can collide where log-SNR is flat: push duplicates down,
        # then lift any that fell below the room left for the remaining steps
        for i in range(1, n):
            grid[i] = min(grid[i], grid[i - 1] - 1)
        for i in range(n - 1, -1, -1):
            grid[i] = max(grid[i], k_min + (n - 1 - i))
    return grid


Denoise = Callable[[np.ndarray, np.ndarray], np.ndarray]


def ode_integrate(denoise: Denoise, schedule: NoiseSchedule, x_init: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Run the sampler from an explicit initial state.

    ``denoise(k, x)`` returns the clean-signal estimate for state ``x`` at
    integer timestep ``k`` (a 1-d array with one entry per batch row).
    """
    grid = timestep_grid(schedule, cfg)
    ab = schedule.alpha_bar
    x = np.asarray(x_init, dtype=np.float64)
    batch = x.shape[0]
    for i, k in enumerate(grid):
        ks = np.full(batch, k, dtype=np.int64)
        x0_hat = np.asarray(denoise(ks, x), dtype=np.float64)
        if i + 1 == len(grid):
            x = x0_hat
        else:
            eps_hat = x0_to_eps(schedule, x0_hat, x, ks)
            k_next = grid[i + 1]
            x = math.sqrt(ab[k_next]) * x0_hat + math.sqrt(1.0 - ab[k_next]) * eps_hat
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite sampler state at step {i} (k={k})")
    return x


def initial_noise(shape, seeds, init_sigma: float = 1.0) -> np.ndarray:
    """One independent standard-normal stream per batch row, keyed by its seed."""
    seeds = np.atleast_1d(seeds)
    rows = [np.random.default_rng(int(s)).standard_normal(shape) for s in seeds]
    return init_sigma * np.stack(rows)


def ode_sample(model, conditions, schedule: NoiseSchedule, cfg: SamplerConfig, seeds) -> np.ndarray:
    """Sample waypoint chunks for a batch of encoded conditions.

    ``conditions`` is the model's encoded batch (see ``Denoiser.encode_conditions``)
    and ``seeds`` holds one seed per batch row. Returns ``[B, T, 2]`` clamped
    to the unit square.
    """
    T = model.config.chunk_size
    x = initial_noise((T, 2), seeds, cfg.init_sigma)

    def denoise(ks, xs):
        return model(ks, xs.astype(model.dtype), conditions).data

    out = ode_integrate(denoise, schedule, x, cfg)
    return np.clip(out, 0.0, 1.0)
