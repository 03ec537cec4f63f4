"""Confidence-gated fusion of the two action predictions.

The discrete decode's mean token confidence decides whether to average it
with the diffusion action or to execute the diffusion action alone. The
gate is a strict greater-than comparison, so a threshold of 1.0 is
exactly equivalent to diffusion-only inference. Euler angles are averaged
component-wise (the synthetic tasks keep angles well inside a half-turn,
so wrap-around never occurs); the binary gripper dimension is snapped
back to {0, 1} after fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRIPPER_DIM_OFFSET = 6   # gripper is the 7th component of each arm's action


@dataclass
class EnsembleConfig:
    confidence_threshold: float = 0.96
    gripper_threshold: float = 0.5

    def __post_init__(self):
        # 0 opens the gate on every step, 1 closes it permanently; both
        # extremes are legitimate sweep points
        if not (0.0 <= self.confidence_threshold <= 1.0):
            raise ValueError("confidence_threshold must lie in [0, 1]")


def snap_gripper(pose: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    out = np.asarray(pose, dtype=np.float64).copy()
    for g in range(GRIPPER_DIM_OFFSET, out.shape[-1], 7):
        out[..., g] = np.where(out[..., g] > threshold, 1.0, 0.0)
    return out


def fuse(a_dif: np.ndarray, a_ar: np.ndarray, c_ar: float,
         cfg: EnsembleConfig | None = None) -> np.ndarray:
    """Average the two de-normalized poses when confidence clears the gate,
    otherwise pass the diffusion pose through; snap the gripper either way."""
    cfg = cfg or EnsembleConfig()
    a_dif = np.asarray(a_dif, dtype=np.float64)
    a_ar = np.asarray(a_ar, dtype=np.float64)
    if a_dif.shape != a_ar.shape:
        raise ValueError(f"pose dimension mismatch: {a_dif.shape} vs {a_ar.shape}")
    if c_ar > cfg.confidence_threshold:
        fused = 0.5 * (a_dif + a_ar)
    else:
        fused = a_dif
    return snap_gripper(fused, cfg.gripper_threshold)


def threshold_sweep(checkpoint_path, tasks, thetas, episodes: int = 50, seed: int = 0,
                    n_steps: int = 4, variant: str = "nominal") -> list[dict]:
    """Evaluate ensemble rollouts at each confidence threshold.

    Returns one row per theta: {theta, success, episodes, seed}.
    """
    thetas = list(thetas)
    if not thetas:
        raise ValueError("threshold sweep needs at least one theta")
    from .evaluate import rollout_eval

    rows = []
    for theta in thetas:
        report = rollout_eval(checkpoint_path, tasks, mode="ensemble", episodes=episodes,
                              seed=seed, variant=variant, n_steps=n_steps, theta=theta)
        rows.append({"theta": float(theta), "success": report.mean_success,
                     "episodes": episodes, "seed": seed})
    return rows
