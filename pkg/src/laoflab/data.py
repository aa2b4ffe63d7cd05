"""Dataset persistence, splits and batching.

A dataset directory holds ``manifest.json`` plus little-endian binaries:

=============  =====================================================
obs.bin        u8, N x 2 x H x W x 3 (o_t and o_{t+1} per record)
flow_rgb.bin   u8, N x H x W x 3
flow_uv.bin    f32, N x H x W x 2
masks.bin      u8, N x H x W
actions.bin    u16 per record (discrete) or 2 x f32 (continuous)
episodes.bin   u32 start offset of every episode
=============  =====================================================
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Iterator

import numpy as np

from laoflab.envs import EnvConfig
from laoflab.errors import CorruptionError, StorageError, UsageError

MANIFEST_VERSION = 1
FILES = ("obs.bin", "flow_rgb.bin", "flow_uv.bin", "masks.bin", "actions.bin", "episodes.bin")


@dataclasses.dataclass
class Transition:
    obs: np.ndarray
    next_obs: np.ndarray
    flow_rgb: np.ndarray
    flow_uv: np.ndarray
    mask: np.ndarray
    action: int | np.ndarray
    task_id: int
    episode: int
    frame: int


@dataclasses.dataclass
class TransitionSet:
    """Column-wise storage of N transitions."""

    env: EnvConfig
    obs: np.ndarray  # (N, 2, H, W, 3) u8
    flow_rgb: np.ndarray  # (N, H, W, 3) u8
    flow_uv: np.ndarray  # (N, H, W, 2) f32
    masks: np.ndarray  # (N, H, W) u8
    actions: np.ndarray  # (N,) int64 or (N, 2) f32
    episode_starts: np.ndarray  # (E,) int64
    episode_tasks: np.ndarray  # (E,) int64
    meta: dict = dataclasses.field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def n_episodes(self) -> int:
        return len(self.episode_starts)

    @property
    def episode_ids(self) -> np.ndarray:
        counts = np.diff(np.append(self.episode_starts, len(self)))
        return np.repeat(np.arange(self.n_episodes), counts)

    @property
    def frame_index(self) -> np.ndarray:
        return np.arange(len(self)) - self.episode_starts[self.episode_ids]

    @property
    def task_ids(self) -> np.ndarray:
        return self.episode_tasks[self.episode_ids]

    def __getitem__(self, i: int) -> Transition:
        ep = int(self.episode_ids[i])
        return Transition(
            obs=self.obs[i, 0],
            next_obs=self.obs[i, 1],
            flow_rgb=self.flow_rgb[i],
            flow_uv=self.flow_uv[i],
            mask=self.masks[i],
            action=self.actions[i] if self.actions.ndim == 2 else int(self.actions[i]),
            task_id=int(self.episode_tasks[ep]),
            episode=ep,
            frame=int(i - self.episode_starts[ep]),
        )

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]


@dataclasses.dataclass
class Dataset:
    """A TransitionSet opened from disk together with its manifest."""

    path: Path
    manifest: dict
    transitions: TransitionSet

    def split_ids(self, split: str) -> np.ndarray:
        episodes = self.manifest["splits"][split]
        starts = self.transitions.episode_starts
        ends = np.append(starts[1:], len(self.transitions))
        ids = [np.arange(starts[e], ends[e]) for e in sorted(episodes)]
        return np.concatenate(ids).astype(np.int64) if ids else np.zeros(0, dtype=np.int64)


def split_episodes(n_episodes: int, test_fraction: float, seed: int) -> dict[str, list[int]]:
    rng = np.random.default_rng([seed, 31337])
    perm = rng.permutation(n_episodes)
    n_test = int(np.floor(test_fraction * n_episodes + 0.5)) if n_episodes > 1 else 0
    n_test = min(n_test, n_episodes - 1)
    return {"train": sorted(int(e) for e in perm[n_test:]), "test": sorted(int(e) for e in perm[:n_test])}


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_action_ratio(train_ids: np.ndarray, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly pick ``round(ratio * N_train)`` labelled ids; the rest are unlabelled."""
    if not 0 < ratio <= 1:
        raise UsageError(f"action ratio must lie in (0, 1], got {ratio}")
    train_ids = np.asarray(train_ids, dtype=np.int64)
    if train_ids.size == 0:
        raise UsageError("train split is empty")
    n_lab = round_half_up(ratio * train_ids.size)
    rng = np.random.default_rng([seed, 2718])
    chosen = np.zeros(train_ids.size, dtype=bool)
    chosen[rng.choice(train_ids.size, size=n_lab, replace=False)] = True
    return np.sort(train_ids[chosen]), np.sort(train_ids[~chosen])


def batch_iterator(ids: np.ndarray, batch_size: int, shuffle_seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
    """One epoch: a seeded permutation of ``ids`` cut into batches, last partial batch kept."""
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise UsageError("cannot iterate over an empty split")
    rng = np.random.default_rng([shuffle_seed, epoch, 4242])
    perm = ids[rng.permutation(ids.size)]
    for start in range(0, perm.size, batch_size):
        yield perm[start : start + batch_size]


def build_manifest(ts: TransitionSet, splits: dict, ratios: dict | None = None) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "env": ts.env.model_dump(),
        "counts": {
            "n_transitions": len(ts),
            "n_episodes": ts.n_episodes,
            "height": ts.env.height,
            "width": ts.env.width,
        },
        "splits": splits,
        "flow_source": ts.meta.get("flow_source", "oracle"),
        "ratios": ratios or {},
        "episode_tasks": [int(t) for t in ts.episode_tasks],
        "generation": {k: v for k, v in ts.meta.items() if k != "flow_source"},
    }


def write_dataset(ts: TransitionSet, path, splits: dict | None = None, ratios: dict | None = None) -> dict:
    """Write binaries + manifest. Returns the manifest."""
    if len(ts) == 0:
        raise UsageError("refusing to write an empty dataset")
    path = Path(path)
    if splits is None:
        splits = split_episodes(ts.n_episodes, 0.1, 0)
    manifest = build_manifest(ts, splits, ratios)
    actions = ts.actions.astype("<u2") if ts.env.discrete else ts.actions.astype("<f4")
    blobs = {
        "obs.bin": np.ascontiguousarray(ts.obs, dtype=np.uint8),
        "flow_rgb.bin": np.ascontiguousarray(ts.flow_rgb, dtype=np.uint8),
        "flow_uv.bin": np.ascontiguousarray(ts.flow_uv, dtype="<f4"),
        "masks.bin": np.ascontiguousarray(ts.masks, dtype=np.uint8),
        "actions.bin": np.ascontiguousarray(actions),
        "episodes.bin": np.ascontiguousarray(ts.episode_starts, dtype="<u4"),
    }
    try:
        path.mkdir(parents=True, exist_ok=True)
        for name, arr in blobs.items():
            (path / name).write_bytes(arr.tobytes())
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as exc:
        raise StorageError(f"cannot write dataset to {path}: {exc}") from exc
    return manifest


def _expected_sizes(manifest: dict) -> dict[str, int]:
    c = manifest["counts"]
    n, h, w = c["n_transitions"], c["height"], c["width"]
    discrete = manifest["env"].get("control_mode", "discrete5") == "discrete5"
    return {
        "obs.bin": n * 2 * h * w * 3,
        "flow_rgb.bin": n * h * w * 3,
        "flow_uv.bin": n * h * w * 2 * 4,
        "masks.bin": n * h * w,
        "actions.bin": n * (2 if discrete else 8),
        "episodes.bin": c["n_episodes"] * 4,
    }


def read_dataset(path, mmap: bool = True) -> Dataset:
    """Open a dataset directory, checking every binary against the manifest counts."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise StorageError(f"{path}: manifest.json not found") from None
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path / 'manifest.json'}: {exc}") from None
    expected = _expected_sizes(manifest)
    for name, size in expected.items():
        f = path / name
        if not f.exists():
            raise CorruptionError(f"{f}: missing")
        actual = f.stat().st_size
        if actual != size:
            raise CorruptionError(f"{f}: expected {size} bytes from manifest counts, found {actual}")

    env = EnvConfig(**manifest["env"])
    c = manifest["counts"]
    n, h, w = c["n_transitions"], c["height"], c["width"]

    def load(name, dtype, shape):
        if mmap:
            return np.memmap(path / name, dtype=dtype, mode="r", shape=shape)
        return np.fromfile(path / name, dtype=dtype).reshape(shape)

    if env.discrete:
        actions = np.fromfile(path / "actions.bin", dtype="<u2").astype(np.int64)
    else:
        actions = np.fromfile(path / "actions.bin", dtype="<f4").reshape(n, 2).astype(np.float32)
    ts = TransitionSet(
        env=env,
        obs=load("obs.bin", np.uint8, (n, 2, h, w, 3)),
        flow_rgb=load("flow_rgb.bin", np.uint8, (n, h, w, 3)),
        flow_uv=load("flow_uv.bin", "<f4", (n, h, w, 2)),
        masks=load("masks.bin", np.uint8, (n, h, w)),
        actions=actions,
        episode_starts=np.fromfile(path / "episodes.bin", dtype="<u4").astype(np.int64),
        episode_tasks=np.asarray(manifest.get("episode_tasks", [0] * c["n_episodes"]), dtype=np.int64),
        meta=dict(manifest.get("generation", {}), flow_source=manifest.get("flow_source", "oracle")),
    )
    return Dataset(path=path, manifest=manifest, transitions=ts)
