"""Episode dataset files.

Byte layout (all integers little-endian uint32, arrays little-endian):

    magic b"HADS" | version u32 | header_len u32 | header JSON (UTF-8)
    then per episode:
        record_len u32
        ep_header_len u32 | ep header JSON
        images  float32 [n_steps, n_views, H, W, 3]
        instr   int32   [n_lang]
        states  float32 [n_steps, action_dim]
        actions float32 [n_steps, action_dim]

The file header carries the generation settings, array shapes, and the
normalization bounds fitted over every recorded action delta, so the file
is self-describing for cross-language readers. Identical generation
arguments produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..ar_head import NormStats
from ..seeding import stream
from ..tokens import encode_instruction, load_vocab
from . import world as W
from .expert import expert_action

MAGIC = b"HADS"
VERSION = 1


class DatasetError(RuntimeError):
    pass


@dataclass
class Episode:
    task: str
    seed: int
    instruction: str
    images: np.ndarray        # [n_steps, V, H, W, 3] float32
    instr_ids: np.ndarray     # [n_lang] int32
    states: np.ndarray        # [n_steps, action_dim] float32
    actions: np.ndarray       # [n_steps, action_dim] float32
    success: bool

    @property
    def n_steps(self) -> int:
        return self.images.shape[0]


@dataclass
class Dataset:
    episodes: list[Episode]
    stats: NormStats
    meta: dict

    @property
    def arms(self) -> int:
        return int(self.meta["arms"])

    @property
    def n_views(self) -> int:
        return int(self.meta["n_views"])

    def task_names(self) -> list[str]:
        return list(self.meta["tasks"])

    def filter_task(self, task: str) -> "Dataset":
        eps = [e for e in self.episodes if e.task == task]
        if not eps:
            raise DatasetError(f"no episodes for task '{task}'")
        return Dataset(episodes=eps, stats=self.stats, meta=self.meta)


def run_expert_episode(task: W.TaskSpec, seed: int, variant: str = "nominal",
                       n_lang: int = 8, vocab=None) -> Episode:
    """Closed-loop expert rollout, recorded step by step."""
    vocab = vocab or load_vocab()
    s = W.reset(task, seed, variant)
    instr_ids = encode_instruction(s.instruction, vocab, n_lang).astype(np.int32)
    images, states, actions = [], [], []
    done = W.success(s)
    while not done and s.step_count < task.max_steps:
        a = expert_action(s)
        images.append(W.render_views(s))
        states.append(W.state_pose(s))
        actions.append(a)
        s = W.step(s, a)
        done = W.success(s)
    return Episode(task=task.kind, seed=seed, instruction=s.instruction,
                   images=np.asarray(images, dtype=np.float32),
                   instr_ids=instr_ids,
                   states=np.asarray(states, dtype=np.float32),
                   actions=np.asarray(actions, dtype=np.float32),
                   success=done)


def generate_dataset(tasks: list[str], n_per_task: int = 100, seed: int = 0,
                     variant: str = "nominal", out_path: str | Path | None = None) -> Dataset:
    """Run the expert over every task and fit normalization stats.

    The expert is expected to succeed on every episode; a failure aborts
    with diagnostics since it would poison the imitation targets.
    """
    specs = [W.default_task(t) for t in tasks]
    arms = {t.arms for t in specs}
    if len(arms) > 1:
        raise DatasetError("cannot mix single-arm and dual-arm tasks in one dataset")
    vocab = load_vocab()

    episodes = []
    for spec in specs:
        for idx in range(n_per_task):
            ep_seed = int(stream(seed, "episode", spec.kind, idx).integers(0, 2 ** 31 - 1))
            ep = run_expert_episode(spec, ep_seed, variant, vocab=vocab)
            if not ep.success:
                raise DatasetError(
                    f"expert failed on task={spec.kind} episode={idx} seed={ep_seed} "
                    f"after {ep.n_steps} steps")
            episodes.append(ep)

    all_actions = np.concatenate([e.actions for e in episodes], axis=0)
    stats = NormStats.from_actions(all_actions)
    meta = {
        "version": VERSION,
        "tasks": list(tasks),
        "n_per_task": n_per_task,
        "seed": seed,
        "variant": variant,
        "arms": specs[0].arms,
        "n_views": 2 if specs[0].arms == 2 else 1,
        "image_hw": [W.IMAGE_SIZE, W.IMAGE_SIZE],
        "n_lang": int(episodes[0].instr_ids.shape[0]),
        "action_dim": 7 * specs[0].arms,
        "n_episodes": len(episodes),
    }
    ds = Dataset(episodes=episodes, stats=stats, meta=meta)
    if out_path is not None:
        save_dataset(ds, out_path)
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> None:
    header = dict(ds.meta)
    header["norm_low"] = [float(v) for v in ds.stats.low]
    header["norm_high"] = [float(v) for v in ds.stats.high]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for ep in ds.episodes:
            ep_header = json.dumps(
                {"task": ep.task, "seed": ep.seed, "n_steps": int(ep.n_steps),
                 "success": bool(ep.success), "instruction": ep.instruction},
                sort_keys=True, separators=(",", ":")).encode("utf-8")
            payload = b"".join([
                struct.pack("<I", len(ep_header)), ep_header,
                np.ascontiguousarray(ep.images, dtype="<f4").tobytes(),
                np.ascontiguousarray(ep.instr_ids, dtype="<i4").tobytes(),
                np.ascontiguousarray(ep.states, dtype="<f4").tobytes(),
                np.ascontiguousarray(ep.actions, dtype="<f4").tobytes(),
            ])
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)


def load_dataset(path: str | Path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise DatasetError(f"{path}: not a dataset file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    stats = NormStats(low=np.array(header.pop("norm_low")),
                      high=np.array(header.pop("norm_high")))

    hw = header["image_hw"]
    n_views, n_lang, adim = header["n_views"], header["n_lang"], header["action_dim"]
    episodes = []
    off = 12 + hlen
    while off < len(raw):
        (rec_len,) = struct.unpack("<I", raw[off:off + 4])
        rec = raw[off + 4:off + 4 + rec_len]
        off += 4 + rec_len
        (eh_len,) = struct.unpack("<I", rec[:4])
        eh = json.loads(rec[4:4 + eh_len].decode("utf-8"))
        n = eh["n_steps"]
        pos = 4 + eh_len
        img_n = n * n_views * hw[0] * hw[1] * 3 * 4
        images = np.frombuffer(rec[pos:pos + img_n], dtype="<f4").reshape(n, n_views, hw[0], hw[1], 3)
        pos += img_n
        instr = np.frombuffer(rec[pos:pos + n_lang * 4], dtype="<i4").copy()
        pos += n_lang * 4
        states = np.frombuffer(rec[pos:pos + n * adim * 4], dtype="<f4").reshape(n, adim)
        pos += n * adim * 4
        actions = np.frombuffer(rec[pos:pos + n * adim * 4], dtype="<f4").reshape(n, adim)
        episodes.append(Episode(task=eh["task"], seed=eh["seed"], instruction=eh["instruction"],
                                images=images.copy(), instr_ids=instr,
                                states=states.copy(), actions=actions.copy(),
                                success=eh["success"]))
    return Dataset(episodes=episodes, stats=stats, meta=header)
