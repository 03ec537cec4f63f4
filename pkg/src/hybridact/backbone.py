"""Decoder-only causal transformer with a region-rewritable KV cache.

Two forward paths share the same parameters and math:

* ``forward`` — autodiff path over [B, L, d] batches, used for training.
* ``forward_cached`` — plain-numpy path over a [L, d] suffix at absolute
  positions [start, start+L), used for inference. With a cache, keys and
  values of the suffix are written at their absolute positions and
  attention runs against everything cached up to each query position, so
  hidden states equal a full uncached forward of the same absolute layout.

The cache has an immutable condition prefix and a rewritable block (the
diffusion token region): prefix positions are write-once per inference
episode, while the block may be overwritten any number of times. Rewriting
truncates everything after the block, which is exactly the semantics the
denoising loop needs.

Causality is indexed by absolute layout position: positional embeddings
are learned per absolute index and added here, so a rewritten block stays
position-stable across denoising steps. Attention masking uses a -1e9
additive term, which underflows to exact zeros after softmax in both
float32 and float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import tensor as T
from .tensor import Tensor

_NEG = -1e9
_INV_SQRT2 = 1.0 / np.sqrt(2.0)


@dataclass
class BackboneConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 8
    d_ff: int = 512
    max_seq_len: int = 160
    vocab_size: int = 325
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class CacheError(RuntimeError):
    pass


class KVCache:
    """Per-layer key/value storage with write-once prefix semantics.

    ``prefix_len`` counts condition positions that may be written only once
    per episode; ``block`` is the (start, length) span of the rewritable
    region and must lie entirely at positions >= prefix_len.
    """

    def __init__(self, cfg: BackboneConfig, prefix_len: int,
                 block: tuple[int, int] | None = None, dtype=np.float32):
        if prefix_len > cfg.max_seq_len:
            raise CacheError(f"prefix_len {prefix_len} exceeds max_seq_len {cfg.max_seq_len}")
        if block is not None and block[0] < prefix_len:
            raise CacheError(f"rewritable block {block} overlaps prefix of length {prefix_len}")
        shape = (cfg.n_layers, cfg.max_seq_len, cfg.n_heads, cfg.d_head)
        self.k = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.prefix_len = prefix_len
        self.block = block
        self.valid_len = 0

    def check_write(self, start: int, length: int) -> None:
        if start > self.valid_len:
            raise CacheError(
                f"write at {start} leaves a gap (cache valid through {self.valid_len})")
        if start < self.prefix_len and start < self.valid_len:
            raise CacheError(
                f"write at {start} would overwrite the condition prefix (len {self.prefix_len})")
        if start + length > self.k.shape[1]:
            raise CacheError(f"write [{start}, {start + length}) exceeds max_seq_len {self.k.shape[1]}")

    def write(self, layer: int, start: int, k: np.ndarray, v: np.ndarray) -> None:
        self.k[layer, start:start + k.shape[0]] = k
        self.v[layer, start:start + v.shape[0]] = v


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return x * (0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2))))


def _layer_norm_np(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TransformerBackbone:
    """Pre-norm causal transformer plus output heads.

    Heads: ``lm_logits`` projects hidden states to vocabulary logits for
    the discrete action tokens; ``noise_head`` is a two-layer MLP mapping
    the hidden states at the diffusion action-token positions to a noise
    prediction in action space. The noise head's final layer starts at
    zero so an untrained model predicts zero noise.
    """

    def __init__(self, cfg: BackboneConfig, action_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.action_dim = action_dim
        self.dtype = dtype
        d, ff = cfg.d_model, cfg.d_ff
        p = {}

        def init(shape, scale=0.02):
            return T.parameter(shape, rng=rng, scale=scale, dtype=dtype)

        p["pos.table"] = init((cfg.max_seq_len, d))
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            p[pre + "ln1.g"] = T.parameter(np.ones(d), dtype=dtype)
            p[pre + "ln1.b"] = T.parameter(np.zeros(d), dtype=dtype)
            p[pre + "attn.wq"] = init((d, d))
            p[pre + "attn.bq"] = T.parameter(np.zeros(d), dtype=dtype)
            p[pre + "attn.wk"] = init((d, d))
            p[pre + "attn.bk"] = T.parameter(np.zeros(d), dtype=dtype)
            p[pre + "attn.wv"] = init((d, d))
            p[pre + "attn.bv"] = T.parameter(np.zeros(d), dtype=dtype)
            p[pre + "attn.wo"] = init((d, d))
            p[pre + "attn.bo"] = T.parameter(np.zeros(d), dtype=dtype)
            p[pre + "ln2.g"] = T.parameter(np.ones(d), dtype=dtype)
            p[pre + "ln2.b"] = T.parameter(np.zeros(d), dtype=dtype)
            p[pre + "mlp.w1"] = init((d, ff))
            p[pre + "mlp.b1"] = T.parameter(np.zeros(ff), dtype=dtype)
            p[pre + "mlp.w2"] = init((ff, d))
            p[pre + "mlp.b2"] = T.parameter(np.zeros(d), dtype=dtype)
        p["ln_f.g"] = T.parameter(np.ones(d), dtype=dtype)
        p["ln_f.b"] = T.parameter(np.zeros(d), dtype=dtype)
        p["lm.w"] = init((d, cfg.vocab_size))
        p["lm.b"] = T.parameter(np.zeros(cfg.vocab_size), dtype=dtype)
        p["noise.w1"] = init((d, d))
        p["noise.b1"] = T.parameter(np.zeros(d), dtype=dtype)
        p["noise.w2"] = T.parameter(np.zeros((d, action_dim)), dtype=dtype)
        p["noise.b2"] = T.parameter(np.zeros(action_dim), dtype=dtype)
        self.params = p

    # ---------------------------------------------------------------- train

    def forward(self, embedded: Tensor, dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Full causal forward over [B, L, d] (or [L, d]); returns hidden states.

        Weight projections run on the flattened [B*L, d] view so each is a
        single GEMM; only attention itself reshapes to per-head form.
        """
        batched = embedded.data.ndim == 3
        x3 = embedded if batched else T.reshape(embedded, (1,) + embedded.shape)
        b, length, d = x3.shape
        if length > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {length} exceeds max_seq_len {self.cfg.max_seq_len}")
        cfg = self.cfg
        p = self.params
        n = b * length

        x3 = T.add(x3, p["pos.table"][:length, :])
        x = T.reshape(x3, (n, d))
        causal = np.triu(np.full((length, length), _NEG, dtype=self.dtype), k=1)

        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            h = T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = T.add(T.matmul(h, p[pre + "attn.wq"]), p[pre + "attn.bq"])
            k = T.add(T.matmul(h, p[pre + "attn.wk"]), p[pre + "attn.bk"])
            v = T.add(T.matmul(h, p[pre + "attn.wv"]), p[pre + "attn.bv"])
            # [B*L, d] -> [B, H, L, dh]
            q = T.transpose(T.reshape(q, (b, length, cfg.n_heads, cfg.d_head)), (0, 2, 1, 3))
            k = T.transpose(T.reshape(k, (b, length, cfg.n_heads, cfg.d_head)), (0, 2, 1, 3))
            v = T.transpose(T.reshape(v, (b, length, cfg.n_heads, cfg.d_head)), (0, 2, 1, 3))
            scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                           1.0 / np.sqrt(cfg.d_head))
            scores = T.add(scores, Tensor(causal))
            attn = T.matmul(T.softmax(scores), v)
            attn = T.reshape(T.transpose(attn, (0, 2, 1, 3)), (n, d))
            attn = T.add(T.matmul(attn, p[pre + "attn.wo"]), p[pre + "attn.bo"])
            attn = self._dropout(attn, dropout_rng)
            x = T.add(x, attn)

            h = T.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            h = T.gelu(T.add(T.matmul(h, p[pre + "mlp.w1"]), p[pre + "mlp.b1"]))
            h = T.add(T.matmul(h, p[pre + "mlp.w2"]), p[pre + "mlp.b2"])
            h = self._dropout(h, dropout_rng)
            x = T.add(x, h)

        x = T.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return T.reshape(x, (b, length, d)) if batched else T.reshape(x, (length, d))

    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        rate = self.cfg.dropout
        if rate <= 0.0 or rng is None:
            return x
        mask = (rng.random(x.shape) >= rate).astype(self.dtype) / (1.0 - rate)
        return T.mul(x, Tensor(mask))

    def lm_logits(self, hidden: Tensor) -> Tensor:
        return T.add(T.matmul(hidden, self.params["lm.w"]), self.params["lm.b"])

    def noise_head(self, hidden: Tensor, arms_tokens: int = 1) -> Tensor:
        """Map hidden states at the k diffusion action-token positions to noise.

        hidden: [..., k, d] with exactly k = arms_tokens rows along the
        token axis; rows are averaged when k > 1.
        """
        if hidden.shape[-2] != arms_tokens:
            raise ValueError(
                f"noise_head expects {arms_tokens} diffusion token position(s), got {hidden.shape[-2]}")
        h = hidden if arms_tokens == 1 else T.mul(hidden, 1.0)
        h = T.mul(_sum_tokens(h), 1.0 / arms_tokens)
        h = T.gelu(T.add(T.matmul(h, self.params["noise.w1"]), self.params["noise.b1"]))
        return T.add(T.matmul(h, self.params["noise.w2"]), self.params["noise.b2"])

    # ------------------------------------------------------------ inference

    def forward_cached(self, embedded: np.ndarray, cache: KVCache | None,
                       start: int = 0) -> np.ndarray:
        """Numpy forward of a suffix at absolute positions [start, start+L).

        With ``cache=None`` this is a plain full forward and start must
        be 0. With a cache, suffix K/V are written at their absolute
        positions (subject to the prefix write-once rule) and each suffix
        position attends to all cached positions <= its own.
        """
        cfg = self.cfg
        p = self.params
        x = np.asarray(embedded, dtype=self.dtype)
        length = x.shape[0]
        if cache is None:
            if start != 0:
                raise CacheError("uncached forward must start at position 0")
        else:
            cache.check_write(start, length)
        if start + length > cfg.max_seq_len:
            raise ValueError(f"positions [{start}, {start + length}) exceed max_seq_len")

        x = x + p["pos.table"].data[start:start + length]
        # within-suffix causal mask for the trailing columns of the score matrix
        rows = np.arange(start, start + length)[:, None]
        cols = np.arange(start, start + length)[None, :]
        suffix_mask = np.where(cols > rows, self.dtype(_NEG), self.dtype(0.0))

        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            h = _layer_norm_np(x, p[pre + "ln1.g"].data, p[pre + "ln1.b"].data)
            q = h @ p[pre + "attn.wq"].data + p[pre + "attn.bq"].data
            k = h @ p[pre + "attn.wk"].data + p[pre + "attn.bk"].data
            v = h @ p[pre + "attn.wv"].data + p[pre + "attn.bv"].data
            q = q.reshape(length, cfg.n_heads, cfg.d_head)
            k = k.reshape(length, cfg.n_heads, cfg.d_head)
            v = v.reshape(length, cfg.n_heads, cfg.d_head)

            if cache is None:
                k_all, v_all = k, v
                past = 0
            else:
                cache.write(i, start, k, v)
                k_all = cache.k[i, :start + length]
                v_all = cache.v[i, :start + length]
                past = start

            # [H, L, dh] x [H, dh, P+L] -> [H, L, P+L]
            qh = q.transpose(1, 0, 2)
            kh = k_all.transpose(1, 2, 0)
            scores = (qh @ kh) / np.sqrt(cfg.d_head).astype(self.dtype)
            scores[:, :, past:] += suffix_mask
            attn = _softmax_np(scores) @ v_all.transpose(1, 0, 2)
            attn = attn.transpose(1, 0, 2).reshape(length, cfg.d_model)
            x = x + (attn @ p[pre + "attn.wo"].data + p[pre + "attn.bo"].data)

            h = _layer_norm_np(x, p[pre + "ln2.g"].data, p[pre + "ln2.b"].data)
            h = _gelu_np(h @ p[pre + "mlp.w1"].data + p[pre + "mlp.b1"].data)
            x = x + (h @ p[pre + "mlp.w2"].data + p[pre + "mlp.b2"].data)

        if cache is not None:
            cache.valid_len = start + length
        return _layer_norm_np(x, p["ln_f.g"].data, p["ln_f.b"].data)

    def lm_logits_np(self, hidden: np.ndarray) -> np.ndarray:
        return hidden @ self.params["lm.w"].data + self.params["lm.b"].data

    def noise_head_np(self, hidden: np.ndarray, arms_tokens: int = 1) -> np.ndarray:
        if hidden.ndim != 2 or hidden.shape[0] != arms_tokens:
            raise ValueError(
                f"noise_head expects {arms_tokens} diffusion token position(s), got {hidden.shape}")
        h = hidden.mean(axis=0)
        h = _gelu_np(h @ self.params["noise.w1"].data + self.params["noise.b1"].data)
        return h @ self.params["noise.w2"].data + self.params["noise.b2"].data


def _sum_tokens(h: Tensor) -> Tensor:
    """Sum over the second-to-last axis, keeping the rest."""
    if h.shape[-2] == 1:
        shape = h.shape[:-2] + h.shape[-1:]
        return T.reshape(h, shape)
    parts = [h[..., i, :] for i in range(h.shape[-2])]
    out = parts[0]
    for part in parts[1:]:
        out = T.add(out, part)
    return out
