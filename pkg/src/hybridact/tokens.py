"""Token sequence layouts and segment embedders.

The backbone consumes one flat embedded sequence per sample. Four layout
types arrange the same ingredients differently:

    type1: vision | language | state | <begin> time noise <end> | ar
    type2: type1 without the begin/end marker rows
    type3: state discretized into bin tokens appended after language,
           replacing the continuous state row
    type4: ar tokens moved BEFORE the marker-delimited diffusion block

type1..type3 put the diffusion block before the discrete action tokens,
so the noise prediction can never see teacher-forced ground truth; type4
exists to demonstrate that leakage and is rejected by the standard
inference path.

Vocabulary map (toy scale): language words [0, 64), action bins
[64, 320), then the special ids below.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import tensor as T
from .backbone import _gelu_np
from .tensor import Tensor

LANG_VOCAB = 64
N_BINS = 256
BIN_BASE = LANG_VOCAB                 # 64
DIFF_BEGIN_ID = BIN_BASE + N_BINS     # 320
DIFF_END_ID = DIFF_BEGIN_ID + 1       # 321
BOS_ID = DIFF_BEGIN_ID + 2            # 322
EOS_ID = DIFF_BEGIN_ID + 3            # 323
PAD_ID = DIFF_BEGIN_ID + 4            # 324
VOCAB_SIZE = PAD_ID + 1               # 325

LAYOUTS = ("type1", "type2", "type3", "type4")
MODES = ("hybrid", "dif_only", "ar_only")

# fixed bounds used to scale robot state into [-1, 1] per arm:
# x, y, z in [0, 1]; roll, pitch, yaw in [-pi/2, pi/2]; gripper in [0, 1]
_STATE_LOW_1ARM = np.array([0, 0, 0, -np.pi / 2, -np.pi / 2, -np.pi / 2, 0], dtype=np.float64)
_STATE_HIGH_1ARM = np.array([1, 1, 1, np.pi / 2, np.pi / 2, np.pi / 2, 1], dtype=np.float64)


class LayoutError(ValueError):
    pass


def normalize_state(state: np.ndarray) -> np.ndarray:
    arms = state.shape[-1] // 7
    low = np.tile(_STATE_LOW_1ARM, arms)
    high = np.tile(_STATE_HIGH_1ARM, arms)
    return np.clip(2.0 * (state - low) / (high - low) - 1.0, -1.0, 1.0)


@dataclass(frozen=True)
class Segment:
    kind: str
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass
class SegmentMap:
    segments: list[Segment]

    @property
    def length(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def span(self, kind: str) -> Segment:
        for seg in self.segments:
            if seg.kind == kind:
                return seg
        raise KeyError(f"no '{kind}' segment in layout")

    def has(self, kind: str) -> bool:
        return any(s.kind == kind for s in self.segments)

    def kind_at(self, pos: int) -> str:
        for seg in self.segments:
            if seg.start <= pos < seg.stop:
                return seg.kind
        raise IndexError(f"position {pos} outside layout of length {self.length}")

    @property
    def prefix_len(self) -> int:
        """Number of positions before the rewritable diffusion region."""
        return self.span("time").start

    @property
    def diff_block(self) -> tuple[int, int]:
        """(start, length) of the rewritable region: time + noise tokens."""
        t = self.span("time")
        n = self.span("noise")
        return t.start, t.length + n.length


def layout_segments(layout: str, n_vision: int, n_lang: int, arms: int,
                    k_noise: int = 1, mode: str = "hybrid",
                    state_token: bool = True) -> SegmentMap:
    """Build the ordered segment map for one layout/mode combination."""
    if layout not in LAYOUTS:
        raise LayoutError(f"unknown layout '{layout}'")
    if mode not in MODES:
        raise LayoutError(f"unknown mode '{mode}'")
    n_ar = 7 * arms
    markers = layout != "type2"

    parts: list[tuple[str, int]] = [("vision", n_vision), ("language", n_lang)]
    if layout == "type3":
        if state_token:
            parts.append(("state_bins", 7 * arms))
    elif state_token:
        parts.append(("state", 1))

    diff = ([("diff_begin", 1)] if markers else []) + [("time", 1), ("noise", k_noise)] \
        + ([("diff_end", 1)] if markers else [])
    ar = [("ar", n_ar)]

    if mode == "ar_only":
        parts += ar
    elif mode == "dif_only":
        parts += diff
    elif layout == "type4":
        parts += ar + diff
    else:
        parts += diff + ar

    segments = []
    pos = 0
    for kind, length in parts:
        segments.append(Segment(kind, pos, length))
        pos += length
    return SegmentMap(segments)


# ------------------------------------------------------------------ vocab

def load_vocab(path=None) -> dict[str, int]:
    """Word -> id map from a one-word-per-line file; ids must fit in [0, 64)."""
    if path is None:
        text = resources.files("hybridact.data").joinpath("vocab.txt").read_text()
    else:
        text = open(path).read()
    words = [w.strip() for w in text.splitlines() if w.strip()]
    if len(words) > LANG_VOCAB:
        raise ValueError(f"vocabulary has {len(words)} words, limit is {LANG_VOCAB}")
    return {w: i for i, w in enumerate(words)}


def load_templates(path=None) -> dict[str, str]:
    """Task -> instruction template, one 'task: template' per line."""
    if path is None:
        text = resources.files("hybridact.data").joinpath("templates.txt").read_text()
    else:
        text = open(path).read()
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        task, template = line.split(":", 1)
        out[task.strip()] = template.strip()
    return out


def encode_instruction(text: str, vocab: dict[str, int], n_lang: int = 8) -> np.ndarray:
    """Whitespace-tokenize and pad with <pad> to a fixed length."""
    words = text.split()
    if len(words) > n_lang:
        raise ValueError(f"instruction '{text}' longer than {n_lang} tokens")
    pad = vocab["<pad>"]
    ids = [vocab[w] for w in words] + [pad] * (n_lang - len(words))
    return np.array(ids, dtype=np.int64)


# -------------------------------------------------------------- embedders

class EmbedderSet:
    """Projects every segment kind into backbone input vectors.

    One shared token table covers language words, action-bin ids and the
    marker/special ids; small MLPs project the continuous inputs (robot
    state, denoising timestep, noisy action).
    """

    def __init__(self, d_model: int, action_dim: int, patch_dim: int,
                 rng: np.random.Generator, k_noise: int = 1, dtype=np.float32):
        self.d_model = d_model
        self.action_dim = action_dim
        self.k_noise = k_noise
        self.dtype = dtype
        d = d_model

        def init(shape, scale=0.02):
            return T.parameter(shape, rng=rng, scale=scale, dtype=dtype)

        p = {
            "tok.table": init((VOCAB_SIZE, d)),
            "patch.w": init((patch_dim, d)),
            "patch.b": T.parameter(np.zeros(d), dtype=dtype),
            "state.w1": init((action_dim, d)),
            "state.b1": T.parameter(np.zeros(d), dtype=dtype),
            "state.w2": init((d, d)),
            "state.b2": T.parameter(np.zeros(d), dtype=dtype),
            "time.w1": init((d, d)),
            "time.b1": T.parameter(np.zeros(d), dtype=dtype),
            "time.w2": init((d, d)),
            "time.b2": T.parameter(np.zeros(d), dtype=dtype),
            "noisy.w1": init((action_dim, d)),
            "noisy.b1": T.parameter(np.zeros(d), dtype=dtype),
            "noisy.w2": init((d, k_noise * d)),
            "noisy.b2": T.parameter(np.zeros(k_noise * d), dtype=dtype),
        }
        self.params = p

    # training path (autodiff) ------------------------------------------

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.params["tok.table"], ids)

    def embed_patches(self, patches: np.ndarray) -> Tensor:
        """patches: [..., n_patches, patch_dim] -> [..., n_patches, d]."""
        x = Tensor(np.asarray(patches, dtype=self.dtype))
        return T.add(T.matmul(x, self.params["patch.w"]), self.params["patch.b"])

    def embed_state(self, state_norm: np.ndarray) -> Tensor:
        """state_norm: [..., action_dim] -> [..., 1, d]."""
        x = Tensor(np.asarray(state_norm, dtype=self.dtype))
        h = T.gelu(T.add(T.matmul(x, self.params["state.w1"]), self.params["state.b1"]))
        h = T.add(T.matmul(h, self.params["state.w2"]), self.params["state.b2"])
        return T.reshape(h, h.shape[:-1] + (1, self.d_model))

    def embed_timestep(self, i: np.ndarray) -> Tensor:
        """i: [...] integer timesteps -> [..., 1, d]."""
        feats = timestep_features(np.asarray(i), self.d_model).astype(self.dtype)
        h = T.gelu(T.add(T.matmul(Tensor(feats), self.params["time.w1"]), self.params["time.b1"]))
        h = T.add(T.matmul(h, self.params["time.w2"]), self.params["time.b2"])
        return T.reshape(h, h.shape[:-1] + (1, self.d_model))

    def embed_noisy_action(self, a_i: np.ndarray) -> Tensor:
        """a_i: [..., action_dim] -> [..., k, d]."""
        x = Tensor(np.asarray(a_i, dtype=self.dtype))
        h = T.gelu(T.add(T.matmul(x, self.params["noisy.w1"]), self.params["noisy.b1"]))
        h = T.add(T.matmul(h, self.params["noisy.w2"]), self.params["noisy.b2"])
        return T.reshape(h, h.shape[:-1] + (self.k_noise, self.d_model))

    # inference path (plain numpy) --------------------------------------

    def embed_tokens_np(self, ids: np.ndarray) -> np.ndarray:
        return self.params["tok.table"].data[np.asarray(ids)]

    def embed_patches_np(self, patches: np.ndarray) -> np.ndarray:
        x = np.asarray(patches, dtype=self.dtype)
        return x @ self.params["patch.w"].data + self.params["patch.b"].data

    def embed_state_np(self, state_norm: np.ndarray) -> np.ndarray:
        x = np.asarray(state_norm, dtype=self.dtype)
        h = _gelu_np(x @ self.params["state.w1"].data + self.params["state.b1"].data)
        h = h @ self.params["state.w2"].data + self.params["state.b2"].data
        return h.reshape(1, self.d_model)

    def embed_timestep_np(self, i: int) -> np.ndarray:
        feats = timestep_features(np.asarray(i), self.d_model).astype(self.dtype)
        h = _gelu_np(feats @ self.params["time.w1"].data + self.params["time.b1"].data)
        h = h @ self.params["time.w2"].data + self.params["time.b2"].data
        return h.reshape(1, self.d_model)

    def embed_noisy_action_np(self, a_i: np.ndarray) -> np.ndarray:
        x = np.asarray(a_i, dtype=self.dtype)
        h = _gelu_np(x @ self.params["noisy.w1"].data + self.params["noisy.b1"].data)
        h = h @ self.params["noisy.w2"].data + self.params["noisy.b2"].data
        return h.reshape(self.k_noise, self.d_model)


def timestep_features(i: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal features of the denoising step index, [..., d]."""
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(i, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """[..., H, W, 3] -> [..., (H/p)*(W/p), p*p*3] non-overlapping patches."""
    *lead, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)          # [..., gh, gw, p, p, c]
    return x.reshape(*lead, gh * gw, patch * patch * c)


def embed_image(emb: EmbedderSet, images: np.ndarray, patch: int = 8) -> Tensor:
    """Embed one or more views; multi-view tokens concatenate along the
    token axis through the shared patch projection."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    patches = extract_patches(images, patch)          # [V, n, pdim]
    v, n, pdim = patches.shape
    return emb.embed_patches(patches.reshape(v * n, pdim))


# ------------------------------------------------------------ sequences

@dataclass
class TokenBatch:
    """One training batch: embedded rows plus the loss targets."""
    layout: str
    mode: str
    segmap: SegmentMap
    embedded: Tensor                      # [B, L, d]
    ar_targets: np.ndarray | None         # [B, n_ar] bin-range token ids
    eps_target: np.ndarray | None         # [B, action_dim]
    timesteps: np.ndarray | None          # [B]


@dataclass
class TokenSequence:
    """Single-sample view used by tests and single-sample tooling."""
    layout: str
    mode: str
    segmap: SegmentMap
    embedded: Tensor                      # [L, d]
    ar_targets: np.ndarray | None
    eps_target: np.ndarray | None
    timestep: int | None


def bin_ids_from_normalized(values: np.ndarray) -> np.ndarray:
    """Vocabulary ids for normalized values, via the shared action binning."""
    from .ar_head import bin_value
    return BIN_BASE + bin_value(values)


def build_training_batch(emb: EmbedderSet, images: np.ndarray, lang_ids: np.ndarray,
                         states: np.ndarray, gt_norm: np.ndarray, layout: str,
                         timesteps: np.ndarray, eps: np.ndarray, schedule,
                         patch: int = 8, mode: str = "hybrid",
                         state_token: bool = True) -> TokenBatch:
    """Assemble embedded training sequences for a whole batch.

    images: [B, V, H, W, 3]; lang_ids: [B, n_lang]; states: [B, action_dim]
    raw (un-normalized) robot states; gt_norm: [B, action_dim] actions
    already normalized to [-1, 1]; timesteps/eps: fresh diffusion draws.
    """
    from .diffusion import q_sample

    gt_norm = np.asarray(gt_norm, dtype=np.float64)
    if np.abs(gt_norm).max() > 1.0 + 1e-6:
        raise ValueError("gt_action must be normalized to [-1, 1]")
    b, n_views = images.shape[:2]
    n_lang = lang_ids.shape[1]
    n_vision = n_views * (images.shape[2] // patch) * (images.shape[3] // patch)
    arms = gt_norm.shape[1] // 7
    segmap = layout_segments(layout, n_vision, n_lang, arms,
                             k_noise=emb.k_noise, mode=mode, state_token=state_token)

    patches = extract_patches(images, patch).reshape(b, n_vision, -1)
    rows = {"vision": emb.embed_patches(patches),
            "language": emb.embed_tokens(lang_ids)}

    if segmap.has("state"):
        rows["state"] = emb.embed_state(normalize_state(states))
    if segmap.has("state_bins"):
        rows["state_bins"] = emb.embed_tokens(bin_ids_from_normalized(normalize_state(states)))

    ar_targets = None
    if segmap.has("ar"):
        ar_targets = bin_ids_from_normalized(gt_norm)          # [B, n_ar]
        shifted = np.concatenate(
            [np.full((b, 1), BOS_ID, dtype=np.int64), ar_targets[:, :-1]], axis=1)
        rows["ar"] = emb.embed_tokens(shifted)

    eps_target = None
    if segmap.has("noise"):
        timesteps = np.asarray(timesteps)
        if timesteps.min() < 0 or timesteps.max() >= schedule.T:
            raise ValueError(f"timestep outside [0, {schedule.T})")
        eps_target = np.asarray(eps, dtype=np.float64)
        a_i = q_sample(gt_norm, timesteps, eps_target, schedule)
        rows["time"] = emb.embed_timestep(timesteps)
        rows["noise"] = emb.embed_noisy_action(a_i)
        if segmap.has("diff_begin"):
            marker_b = np.full((b, 1), DIFF_BEGIN_ID, dtype=np.int64)
            marker_e = np.full((b, 1), DIFF_END_ID, dtype=np.int64)
            rows["diff_begin"] = emb.embed_tokens(marker_b)
            rows["diff_end"] = emb.embed_tokens(marker_e)

    embedded = T.concat([rows[seg.kind] for seg in segmap.segments], axis=1)
    return TokenBatch(layout=layout, mode=mode, segmap=segmap, embedded=embedded,
                      ar_targets=ar_targets, eps_target=eps_target,
                      timesteps=None if eps_target is None else np.asarray(timesteps))


def build_training_sequence(emb: EmbedderSet, obs: np.ndarray, lang_ids: np.ndarray,
                            state: np.ndarray, gt_norm: np.ndarray, layout: str,
                            i: int, eps: np.ndarray, schedule, patch: int = 8,
                            mode: str = "hybrid", state_token: bool = True) -> TokenSequence:
    """Single-sample convenience wrapper around build_training_batch."""
    obs = np.asarray(obs)
    if obs.ndim == 3:
        obs = obs[None]
    batch = build_training_batch(
        emb, obs[None], np.asarray(lang_ids)[None], np.asarray(state)[None],
        np.asarray(gt_norm)[None], layout, np.asarray([i]), np.asarray(eps)[None],
        schedule, patch=patch, mode=mode, state_token=state_token)
    flat = T.reshape(batch.embedded, batch.embedded.shape[1:])
    return TokenSequence(
        layout=layout, mode=mode, segmap=batch.segmap, embedded=flat,
        ar_targets=None if batch.ar_targets is None else batch.ar_targets[0],
        eps_target=None if batch.eps_target is None else batch.eps_target[0],
        timestep=None if batch.timesteps is None else int(batch.timesteps[0]))


@dataclass
class InferencePrefix:
    """Condition rows plus the reserved absolute indices of everything else."""
    layout: str
    mode: str
    segmap: SegmentMap
    embedded: np.ndarray                  # [prefix_len, d]
    prefix_len: int = field(init=False)

    def __post_init__(self):
        self.prefix_len = self.embedded.shape[0]


def build_inference_prefix(emb: EmbedderSet, obs: np.ndarray, lang_ids: np.ndarray,
                           state: np.ndarray, layout: str, patch: int = 8,
                           mode: str = "hybrid", state_token: bool = True) -> InferencePrefix:
    """Embed everything before the diffusion block (markers included).

    type4 places the teacher-forced discrete tokens ahead of the block, so
    it has no valid condition-only prefix and is rejected here; it is
    supported only by the training-time leakage harness.
    """
    if layout == "type4" and mode != "ar_only":
        raise LayoutError("type4 layout requires AR-first decoding; "
                          "it is not supported by the standard inference path")
    obs = np.asarray(obs)
    if obs.ndim == 3:
        obs = obs[None]
    n_views = obs.shape[0]
    n_vision = n_views * (obs.shape[1] // patch) * (obs.shape[2] // patch)
    n_lang = np.asarray(lang_ids).shape[0]
    arms = np.asarray(state).shape[0] // 7
    segmap = layout_segments(layout, n_vision, n_lang, arms,
                             k_noise=emb.k_noise, mode=mode, state_token=state_token)

    patches = extract_patches(obs, patch).reshape(n_vision, -1)
    parts = [emb.embed_patches_np(patches), emb.embed_tokens_np(lang_ids)]
    if segmap.has("state"):
        parts.append(emb.embed_state_np(normalize_state(np.asarray(state, dtype=np.float64))))
    if segmap.has("state_bins"):
        ids = bin_ids_from_normalized(normalize_state(np.asarray(state, dtype=np.float64)))
        parts.append(emb.embed_tokens_np(ids))
    if segmap.has("diff_begin"):
        parts.append(emb.embed_tokens_np(np.array([DIFF_BEGIN_ID])))

    embedded = np.concatenate(parts, axis=0).astype(emb.dtype)
    if mode == "ar_only":
        expected = segmap.span("ar").start
    else:
        expected = segmap.prefix_len
    assert embedded.shape[0] == expected, "prefix rows out of sync with segment map"
    return InferencePrefix(layout=layout, mode=mode, segmap=segmap, embedded=embedded)
