"""Full policy model: segment embedders + causal backbone + heads,
with checkpoint round-tripping and the per-action inference session."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint as ckpt
from . import tokens
from .ar_head import ARDecodeResult, NormStats, decode_result, greedy_decode_bins
from .backbone import BackboneConfig, KVCache, TransformerBackbone
from .diffusion import DiffusionSchedule
from .seeding import stream
from .tensor import Tensor
from .tokens import (BIN_BASE, BOS_ID, DIFF_END_ID, N_BINS, VOCAB_SIZE,
                     EmbedderSet, InferencePrefix, build_inference_prefix)


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 8
    d_ff: int = 512
    max_seq_len: int = 160
    dropout: float = 0.0
    patch_size: int = 8
    image_size: int = 32
    n_views: int = 1
    arms: int = 1
    n_lang: int = 8
    k_noise: int = 1
    diffusion_steps: int = 100
    schedule_kind: str = "linear"
    layout: str = "type1"
    mode: str = "hybrid"
    state_token: bool = True

    @property
    def action_dim(self) -> int:
        return 7 * self.arms

    @property
    def n_vision(self) -> int:
        per_view = (self.image_size // self.patch_size) ** 2
        return self.n_views * per_view

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(d_model=self.d_model, n_layers=self.n_layers,
                              n_heads=self.n_heads, d_ff=self.d_ff,
                              max_seq_len=self.max_seq_len, vocab_size=VOCAB_SIZE,
                              dropout=self.dropout)

    def to_dict(self) -> dict:
        return asdict(self)


class PolicyModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = stream(seed, "init")
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        self.embedders = EmbedderSet(cfg.d_model, cfg.action_dim, patch_dim,
                                     rng=rng, k_noise=cfg.k_noise, dtype=dtype)
        self.backbone = TransformerBackbone(cfg.backbone_config(), cfg.action_dim,
                                            rng=rng, dtype=dtype)
        self.schedule = DiffusionSchedule.make(cfg.schedule_kind, cfg.diffusion_steps)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"emb.{k}": v for k, v in self.embedders.params.items()}
        out.update({f"bb.{k}": v for k, v in self.backbone.params.items()})
        return out

    @property
    def config_hash(self) -> str:
        return ckpt.config_hash(self.cfg.to_dict())

    def save(self, path, stats: NormStats, meta: dict | None = None) -> None:
        ckpt.save(path, self.parameters(), self.cfg.to_dict(),
                  stats.low, stats.high, self.schedule.to_dict(), meta)

    @classmethod
    def load(cls, path) -> tuple["PolicyModel", NormStats, dict]:
        data = ckpt.load(path)
        cfg = ModelConfig(**data.model_config)
        dtype = np.float64 if next(iter(data.params.values())).dtype == np.float64 else np.float32
        model = cls(cfg, seed=0, dtype=dtype)
        model.schedule = DiffusionSchedule.make(data.schedule["kind"], data.schedule["T"])
        own = model.parameters()
        if set(own) != set(data.params):
            missing = set(own) ^ set(data.params)
            raise ckpt.CheckpointError(f"parameter name mismatch: {sorted(missing)[:4]}...")
        for name, arr in data.params.items():
            if own[name].data.shape != arr.shape:
                raise ckpt.CheckpointError(
                    f"shape mismatch for {name}: {own[name].data.shape} vs {arr.shape}")
            own[name].data = arr.astype(dtype)
        stats = NormStats(low=data.norm_low, high=data.norm_high)
        return model, stats, data.meta

    def open_session(self, obs, lang_ids, state, use_cache: bool = True,
                     stats: NormStats | None = None) -> "InferenceSession":
        prefix = build_inference_prefix(
            self.embedders, obs, lang_ids, state, self.cfg.layout,
            patch=self.cfg.patch_size, mode=self.cfg.mode,
            state_token=self.cfg.state_token)
        return InferenceSession(self, prefix, stats, use_cache=use_cache)


class InferenceSession:
    """Per-action inference state: one prefix, one rewritable-block cache.

    With ``use_cache=False`` every block rewrite and every decode step
    recomputes the whole materialized layout from scratch; outputs are
    identical either way, only the cost differs.
    """

    def __init__(self, model: PolicyModel, prefix: InferencePrefix,
                 stats: NormStats | None, use_cache: bool = True):
        self.model = model
        self.prefix = prefix
        self.segmap = prefix.segmap
        self.stats = stats
        self.use_cache = use_cache
        self.schedule = model.schedule
        self.action_dim = model.cfg.action_dim
        self._block_rows: np.ndarray | None = None   # last diffusion-block embeddings
        self._suffix_ids: list[int] = []             # decoded ids after the block

        if use_cache:
            bb_cfg = model.backbone.cfg
            block = self.segmap.diff_block if self.segmap.has("time") else None
            self.cache = KVCache(bb_cfg, prefix_len=prefix.prefix_len,
                                 block=block, dtype=model.dtype)
            model.backbone.forward_cached(prefix.embedded, self.cache, start=0)
        else:
            self.cache = None

    # diffusion block ----------------------------------------------------

    def predict_noise(self, i: int, a_i: np.ndarray) -> np.ndarray:
        """Forward (timestep, noisy action) rows and read the noise head."""
        emb = self.model.embedders
        rows = np.concatenate([emb.embed_timestep_np(i), emb.embed_noisy_action_np(a_i)], axis=0)
        self._block_rows = rows
        block_start, block_len = self.segmap.diff_block
        k = self.model.cfg.k_noise
        if self.use_cache:
            hidden = self.model.backbone.forward_cached(rows, self.cache, start=block_start)
        else:
            full = np.concatenate([self.prefix.embedded, rows], axis=0)
            hidden = self.model.backbone.forward_cached(full, cache=None)[block_start:]
        return self.model.backbone.noise_head_np(hidden[block_len - k:block_len], arms_tokens=k)

    # discrete decode -----------------------------------------------------

    def decode_greedy(self) -> ARDecodeResult:
        """Greedy decode of the discrete action tokens after the block.

        For hybrid layouts the end-of-block marker is forwarded first; the
        logits that predict token j come from the row holding token j-1's
        teacher-forced input (a BOS row for j = 0).
        """
        if self.stats is None:
            raise ValueError("decode_greedy requires normalization stats")
        segmap = self.segmap
        ar = segmap.span("ar")
        if ar.stop > self.model.backbone.cfg.max_seq_len:
            raise ValueError("decode would overflow max_seq_len")
        emb = self.model.embedders
        has_end = segmap.has("diff_end") and segmap.span("diff_end").start < ar.start

        if self.use_cache and has_end:
            end_row = emb.embed_tokens_np(np.array([DIFF_END_ID]))
            self.model.backbone.forward_cached(end_row, self.cache,
                                               start=segmap.span("diff_end").start)

        def next_logits(step: int, prev_id: int | None) -> np.ndarray:
            tok = BOS_ID if prev_id is None else prev_id
            row = emb.embed_tokens_np(np.array([tok]))
            pos = ar.start + step
            if self.use_cache:
                hidden = self.model.backbone.forward_cached(row, self.cache, start=pos)
                return self.model.backbone.lm_logits_np(hidden[0])
            parts = [self.prefix.embedded]
            if self._block_rows is not None:
                parts.append(self._block_rows)
            if has_end:
                parts.append(emb.embed_tokens_np(np.array([DIFF_END_ID])))
            for tid in self._suffix_ids:
                parts.append(emb.embed_tokens_np(np.array([tid])))
            parts.append(row)
            full = np.concatenate(parts, axis=0)
            hidden = self.model.backbone.forward_cached(full, cache=None)
            out = self.model.backbone.lm_logits_np(hidden[pos])
            self._suffix_ids.append(tok)
            return out

        self._suffix_ids = []
        ids, probs = greedy_decode_bins(next_logits, ar.length, BIN_BASE, N_BINS)
        return decode_result(ids, probs, self.stats)
