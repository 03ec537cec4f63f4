"""Joint training of the diffusion and discrete action objectives.

Each step draws a fresh (timestep, noise) pair per sample, builds the
embedded token batch, and optimizes lambda_dif * L_noise + lambda_ce *
L_tokens through the shared backbone with one backward pass. Single-mode
baselines drop the other paradigm's segments entirely: ``dif_only``
removes the discrete action tokens (the end marker stays as terminator),
``ar_only`` removes the whole marker-delimited diffusion block.

The two training stages share the harness: ``pretrain_multitask`` trains
from scratch on every task in the dataset; ``finetune`` resumes from a
checkpoint (config hashes must match) and continues on one task, keeping
the checkpoint's normalization stats so the learned binning stays valid.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .ar_head import NormStats, normalize
from .model import ModelConfig, PolicyModel
from .optim import AdamW
from .seeding import stream
from .simworld.dataset import Dataset, load_dataset
from .tokens import build_training_batch

STAGES = ("pretrain_multitask", "finetune")


@dataclass
class TrainConfig:
    layout: str = "type1"
    mode: str = "hybrid"                # hybrid | dif_only | ar_only
    rse_enabled: bool = True            # robot-state embedding on/off
    epochs: int = 120
    batch_size: int = 32
    learning_rate: float = 3e-4
    seed: int = 0
    lambda_dif: float = 1.0
    lambda_ce: float = 1.0
    stage: str = "pretrain_multitask"
    weight_decay: float = 0.01
    dropout: float = 0.1                # training-time only; inference never drops
    save_interval: int = 0              # epochs between checkpoints, 0 = end only
    resume_from: str = ""               # checkpoint path, required for finetune
    finetune_task: str = ""             # task filter, required for finetune
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 8
    d_ff: int = 512
    diffusion_steps: int = 100
    schedule_kind: str = "linear"

    def __post_init__(self):
        if self.mode not in ("hybrid", "dif_only", "ar_only"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage '{self.stage}'")
        if self.mode == "dif_only":
            self.lambda_ce = 0.0
        elif self.mode == "ar_only":
            self.lambda_dif = 0.0

    def model_config(self, dataset: Dataset) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            d_ff=self.d_ff, dropout=self.dropout, n_views=dataset.n_views,
            arms=dataset.arms, n_lang=int(dataset.meta["n_lang"]),
            diffusion_steps=self.diffusion_steps, schedule_kind=self.schedule_kind,
            layout=self.layout, mode=self.mode, state_token=self.rse_enabled)


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def parse_config_file(path: str | Path) -> TrainConfig:
    """Flat key = value text; keys match TrainConfig field names exactly."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got '{raw}'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown config key '{key}'")
        kind = types[key]
        if kind == "bool":
            if val.lower() not in _BOOL_WORDS:
                raise ValueError(f"{path}:{lineno}: bad boolean '{val}'")
            values[key] = _BOOL_WORDS[val.lower()]
        elif kind == "int":
            values[key] = int(val)
        elif kind == "float":
            values[key] = float(val)
        else:
            values[key] = val
    return TrainConfig(**values)


def write_config_file(cfg: TrainConfig, path: str | Path) -> None:
    lines = [f"{k} = {v}" for k, v in asdict(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TrainBatchArrays:
    """Pre-flattened training samples, one row per demonstration step."""
    images: np.ndarray       # [N, V, H, W, 3] float32
    lang: np.ndarray         # [N, n_lang] int64
    states: np.ndarray       # [N, action_dim] float64
    actions_norm: np.ndarray  # [N, action_dim] float64

    @property
    def n(self) -> int:
        return self.images.shape[0]


def flatten_dataset(dataset: Dataset, stats: NormStats) -> TrainBatchArrays:
    images = np.concatenate([e.images for e in dataset.episodes], axis=0)
    lang = np.concatenate([np.repeat(e.instr_ids[None], e.n_steps, axis=0)
                           for e in dataset.episodes], axis=0).astype(np.int64)
    states = np.concatenate([e.states for e in dataset.episodes], axis=0).astype(np.float64)
    actions = np.concatenate([e.actions for e in dataset.episodes], axis=0).astype(np.float64)
    return TrainBatchArrays(images=images, lang=lang, states=states,
                            actions_norm=normalize(actions, stats))


class TrainAbort(RuntimeError):
    pass


def mode_parameters(model: PolicyModel, cfg: TrainConfig) -> dict[str, T.Tensor]:
    """Parameters that participate in this config's computation graph.

    Single-mode baselines (and zero loss weights) leave the other
    paradigm's heads and projectors outside the graph; registering them
    anyway would trip the optimizer's missing-gradient check.
    """
    params = model.parameters()
    dropped: list[str] = []
    if cfg.mode == "ar_only":
        # layout has no diffusion block at all
        dropped += ["emb.time.", "emb.noisy.", "bb.noise."]
    elif cfg.lambda_dif == 0.0:
        # block rows still feed attention (the discrete tokens condition on
        # them), only the noise head itself is out of the graph
        dropped += ["bb.noise."]
    if cfg.mode == "dif_only" or cfg.lambda_ce == 0.0:
        dropped += ["bb.lm."]
    if not cfg.rse_enabled or cfg.layout == "type3":
        dropped += ["emb.state."]
    return {k: v for k, v in params.items()
            if not any(k.startswith(d) for d in dropped)}


def hybrid_step(model: PolicyModel, opt: AdamW, arrays: TrainBatchArrays,
                idx: np.ndarray, cfg: TrainConfig, noise_rng: np.random.Generator) -> dict:
    """One optimization step over the samples selected by ``idx``."""
    schedule = model.schedule
    b = idx.shape[0]
    adim = model.cfg.action_dim
    timesteps = noise_rng.integers(0, schedule.T, size=b)
    eps = noise_rng.standard_normal((b, adim))

    batch = build_training_batch(
        model.embedders, arrays.images[idx], arrays.lang[idx], arrays.states[idx],
        arrays.actions_norm[idx], cfg.layout, timesteps, eps, schedule,
        patch=model.cfg.patch_size, mode=cfg.mode, state_token=cfg.rse_enabled)

    hidden = model.backbone.forward(batch.embedded, dropout_rng=noise_rng)
    zero = T.Tensor(np.zeros((), dtype=model.dtype))
    loss_dif, loss_ce = zero, zero

    if batch.segmap.has("noise") and cfg.lambda_dif != 0.0:
        seg = batch.segmap.span("noise")
        eps_pred = model.backbone.noise_head(hidden[:, seg.start:seg.stop, :],
                                             arms_tokens=model.cfg.k_noise)
        loss_dif = T.mse_loss(eps_pred, T.Tensor(batch.eps_target, dtype=model.dtype))

    if batch.segmap.has("ar") and cfg.lambda_ce != 0.0:
        seg = batch.segmap.span("ar")
        ar_hidden = T.reshape(hidden[:, seg.start:seg.stop, :], (b * seg.length, model.cfg.d_model))
        logits = model.backbone.lm_logits(ar_hidden)
        loss_ce = T.cross_entropy_loss(logits, batch.ar_targets.reshape(-1))

    loss_total = T.add(T.mul(loss_dif, cfg.lambda_dif), T.mul(loss_ce, cfg.lambda_ce))
    values = {"loss_total": float(loss_total.data), "loss_dif": float(loss_dif.data),
              "loss_ce": float(loss_ce.data)}
    if not np.isfinite(values["loss_total"]):
        raise TrainAbort(
            f"non-finite loss {values} at optimizer step {opt.t} (lr {opt.lr}, "
            f"grad norm {opt.grad_norm():.3e})")
    opt.zero_grad()
    loss_total.backward()
    opt.step()
    return values


def train(cfg: TrainConfig, dataset: Dataset | str | Path,
          out_path: str | Path | None = None, log=None) -> tuple[PolicyModel, NormStats, list[dict]]:
    """Full training run; writes a checkpoint when ``out_path`` is given."""
    if isinstance(dataset, (str, Path)):
        dataset = load_dataset(dataset)

    resumed_meta = {}
    if cfg.stage == "finetune":
        if not cfg.resume_from:
            raise ValueError("finetune stage requires resume_from")
        if not cfg.finetune_task:
            raise ValueError("finetune stage requires finetune_task")
        dataset = dataset.filter_task(cfg.finetune_task)
        model, stats, resumed_meta = PolicyModel.load(cfg.resume_from)
        expected_hash = checkpoint.config_hash(cfg.model_config(dataset).to_dict())
        if model.config_hash != expected_hash:
            raise ValueError(
                "checkpoint model config does not match the finetune config "
                f"({model.config_hash} vs {expected_hash})")
    else:
        model = PolicyModel(cfg.model_config(dataset), seed=cfg.seed)
        stats = dataset.stats

    arrays = flatten_dataset(dataset, stats)
    params = mode_parameters(model, cfg)
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    history = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "shuffle", cfg.stage, epoch).permutation(arrays.n)
        noise_rng = stream(cfg.seed, "noise", cfg.stage, epoch)
        sums = {"loss_total": 0.0, "loss_dif": 0.0, "loss_ce": 0.0}
        n_batches = 0
        for lo in range(0, arrays.n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            values = hybrid_step(model, opt, arrays, idx, cfg, noise_rng)
            for k in sums:
                sums[k] += values[k]
            n_batches += 1
        record = {k: v / n_batches for k, v in sums.items()}
        record.update(epoch=epoch, seconds=time.perf_counter() - t0)
        history.append(record)
        if log is not None:
            log(record)
        if out_path and cfg.save_interval and (epoch + 1) % cfg.save_interval == 0:
            _save(model, stats, cfg, out_path, history, resumed_meta)
    if out_path:
        _save(model, stats, cfg, out_path, history, resumed_meta)
    return model, stats, history


def _save(model: PolicyModel, stats: NormStats, cfg: TrainConfig, out_path,
          history: list[dict], resumed_meta: dict) -> None:
    meta = {"train_config": asdict(cfg),
            "final_loss": history[-1]["loss_total"] if history else None,
            "epochs_done": len(history)}
    if resumed_meta:
        meta["resumed_from"] = {"epochs_done": resumed_meta.get("epochs_done"),
                                "stage": resumed_meta.get("train_config", {}).get("stage")}
    model.save(out_path, stats, meta)
