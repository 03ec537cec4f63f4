"""Continuous <-> discrete action codec and greedy decoding.

Actions are 7 floats per arm (dx, dy, dz, roll, pitch, yaw, gripper).
They are mapped to [-1, 1] with per-dimension bounds fitted on the
training set, then quantized into 256 uniform bins that occupy a reserved
range of the token vocabulary. Decoding is always greedy; the mean
softmax probability of the chosen tokens (over the bin range only) is the
confidence used by the action ensemble gate. All functions here are pure
and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_BINS = 256


@dataclass
class NormStats:
    """Per-dimension action bounds; fitted once, stored in the checkpoint."""
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=np.float64)
        self.high = np.asarray(self.high, dtype=np.float64)
        if not np.all(np.isfinite(self.low)) or not np.all(np.isfinite(self.high)):
            raise ValueError("NormStats bounds must be finite")
        bad = np.where(self.high <= self.low)[0]
        if bad.size:
            raise ValueError(f"degenerate action dimension(s) {bad.tolist()}: high <= low")

    @classmethod
    def from_actions(cls, actions: np.ndarray, margin: float = 0.01) -> "NormStats":
        """Min/max bounds widened by a symmetric margin fraction of the span."""
        actions = np.asarray(actions, dtype=np.float64)
        low = actions.min(axis=0)
        high = actions.max(axis=0)
        pad = margin * (high - low)
        return cls(low=low - pad, high=high + pad)

    @property
    def dim(self) -> int:
        return self.low.shape[0]


def normalize(a: np.ndarray, stats: NormStats) -> np.ndarray:
    """Affine map of each dimension into [-1, 1], clipped."""
    v = 2.0 * (np.asarray(a, dtype=np.float64) - stats.low) / (stats.high - stats.low) - 1.0
    return np.clip(v, -1.0, 1.0)


def denormalize(v: np.ndarray, stats: NormStats) -> np.ndarray:
    """Affine inverse of normalize (no un-clipping)."""
    v = np.asarray(v, dtype=np.float64)
    return (v + 1.0) / 2.0 * (stats.high - stats.low) + stats.low


def bin_value(v: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Quantize normalized values in [-1, 1] to bin ids in [0, n_bins)."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("bin: non-finite value")
    ids = np.floor((v + 1.0) / 2.0 * n_bins).astype(np.int64)
    return np.clip(ids, 0, n_bins - 1)


def debin_value(ids: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Bin center in normalized coordinates."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= n_bins):
        raise ValueError(f"debin: id outside [0, {n_bins})")
    return (ids + 0.5) / n_bins * 2.0 - 1.0


def ar_targets(gt_action: np.ndarray, stats: NormStats) -> np.ndarray:
    """Bin ids for a raw action, dimension order fixed (arm 0 first)."""
    return bin_value(normalize(gt_action, stats))


@dataclass
class ARDecodeResult:
    pose: np.ndarray                 # de-normalized action
    confidence: float                # mean chosen-token probability
    token_probs: np.ndarray          # per-token chosen probability
    bin_ids: np.ndarray              # raw bin indices in [0, N_BINS)


def greedy_decode_bins(next_logits, n_tokens: int, bin_base: int,
                       n_bins: int = N_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Greedy next-token loop restricted to the action-bin vocabulary range.

    next_logits(step, prev_token_id) returns full-vocabulary logits; ids
    outside [bin_base, bin_base + n_bins) are masked out before both the
    argmax and the confidence softmax. Returns (bin ids, chosen probs).
    """
    ids = np.empty(n_tokens, dtype=np.int64)
    probs = np.empty(n_tokens, dtype=np.float64)
    prev = None
    for step in range(n_tokens):
        logits = np.asarray(next_logits(step, prev), dtype=np.float64)
        bins = logits[bin_base:bin_base + n_bins]
        best = int(np.argmax(bins))
        shifted = bins - bins.max()
        p = np.exp(shifted)
        p /= p.sum()
        ids[step] = best
        probs[step] = p[best]
        prev = bin_base + best
    return ids, probs


def decode_result(bin_ids: np.ndarray, probs: np.ndarray, stats: NormStats) -> ARDecodeResult:
    pose = denormalize(debin_value(bin_ids), stats)
    return ARDecodeResult(pose=pose, confidence=float(probs.mean()),
                          token_probs=probs, bin_ids=bin_ids)
