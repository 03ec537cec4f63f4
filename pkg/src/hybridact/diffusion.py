"""Noise schedule, forward noising, and the DDIM reverse sampler.

Training draws a timestep and Gaussian noise per sample, mixes the clean
action by the ``alpha_bar`` schedule and asks the backbone to predict the
noise (plain MSE, no classifier-free guidance). Inference runs a short
deterministic DDIM subsequence (eta = 0) through the backbone's
rewritable diffusion-block region: the condition prefix is forwarded into
the KV cache once and only the timestep and noisy-action tokens are
re-forwarded per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

# the 1000-step convention these beta bounds come from; shorter schedules
# scale beta linearly to keep the total noise comparable
_REFERENCE_STEPS = 1000
_BETA_START = 1e-4
_BETA_END = 0.02


@dataclass
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    kind: str = "linear"
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.shape != (self.T,):
            raise ValueError(f"need {self.T} betas, got {self.betas.shape}")
        if (self.betas <= 0).any() or (self.betas >= 1).any():
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if self.alpha_bars[0] <= 0.99:
            raise ValueError(f"alpha_bar[0] = {self.alpha_bars[0]:.4f}, expected > 0.99")
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    @classmethod
    def linear(cls, T: int = 100) -> "DiffusionSchedule":
        scale = _REFERENCE_STEPS / T
        betas = np.linspace(_BETA_START * scale, _BETA_END * scale, T)
        return cls(T=T, betas=np.clip(betas, 1e-8, 0.999), kind="linear")

    @classmethod
    def cosine(cls, T: int = 100, s: float = 0.008) -> "DiffusionSchedule":
        t = np.arange(T + 1) / T
        f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
        return cls(T=T, betas=betas, kind="cosine")

    @classmethod
    def make(cls, kind: str, T: int = 100) -> "DiffusionSchedule":
        if kind == "linear":
            return cls.linear(T)
        if kind == "cosine":
            return cls.cosine(T)
        raise ValueError(f"unknown schedule kind '{kind}'")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T}

    def alpha_bar(self, i: int) -> float:
        """alpha_bar at step i; i == -1 denotes the clean sample (1.0)."""
        if i == -1:
            return 1.0
        return float(self.alpha_bars[i])


def q_sample(a0: np.ndarray, i, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Forward noising: sqrt(abar_i) * a0 + sqrt(1 - abar_i) * eps.

    Vectorized over leading axes; ``i`` may be a scalar or a per-row array.
    """
    i = np.asarray(i)
    if i.size and (i.min() < 0 or i.max() >= schedule.T):
        raise ValueError(f"timestep {i} outside [0, {schedule.T})")
    abar = schedule.alpha_bars[i]
    if np.ndim(a0) > 1 and abar.ndim == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * np.asarray(a0, dtype=np.float64) \
        + np.sqrt(1.0 - abar) * np.asarray(eps, dtype=np.float64)


def dif_loss(eps_pred: Tensor, eps: np.ndarray) -> Tensor:
    """Noise-prediction loss: mean squared error against the drawn noise."""
    return T.mse_loss(eps_pred, Tensor(np.asarray(eps), dtype=eps_pred.data.dtype))


def ddim_step(a_i: np.ndarray, eps_pred: np.ndarray, i: int, i_prev: int,
              schedule: DiffusionSchedule) -> np.ndarray:
    """One deterministic (eta = 0) DDIM update from step i to i_prev.

    i_prev = -1 denotes the final step to the clean sample (alpha_bar 1).
    """
    if i_prev >= i:
        raise ValueError(f"i_prev {i_prev} must be < i {i}")
    abar = schedule.alpha_bar(i)
    abar_prev = schedule.alpha_bar(i_prev)
    x0 = (np.asarray(a_i, dtype=np.float64)
          - np.sqrt(1.0 - abar) * np.asarray(eps_pred, dtype=np.float64)) / np.sqrt(abar)
    return np.sqrt(abar_prev) * x0 + np.sqrt(1.0 - abar_prev) * eps_pred


def sampling_timesteps(n_steps: int, T: int) -> list[int]:
    """Descending, evenly spaced step indices that always include T - 1."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps > T:
        raise ValueError(f"n_steps {n_steps} exceeds schedule length {T}")
    return [int(j * T) // n_steps - 1 for j in range(n_steps, 0, -1)]


def ddim_sample(session, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """Run the denoising loop through the backbone's diffusion block.

    The session must have its condition prefix already forwarded. Each
    step embeds (timestep, noisy action), forwards those rows through the
    diffusion-block positions — rewriting their cached K/V — reads the
    noise prediction, and applies one DDIM update. The final sample is
    clamped to [-1, 1]. Deterministic given the generator state; no
    classifier-free guidance.
    """
    schedule = session.schedule
    steps = sampling_timesteps(n_steps, schedule.T)
    a = rng.standard_normal(session.action_dim)
    for idx, i in enumerate(steps):
        i_prev = steps[idx + 1] if idx + 1 < len(steps) else -1
        eps_pred = session.predict_noise(i, a)
        a = ddim_step(a, eps_pred, i, i_prev, schedule)
    return np.clip(a, -1.0, 1.0)
