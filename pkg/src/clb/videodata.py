"""Clip representation, binary clip I/O, the synthetic class generator, and
the task/problem sampling protocol.

A clip is a fixed-shape uint8 frame stack. Classes are synthesized as a
bright square moving over dark noise; the class id indexes a fixed table of
(velocity x, velocity y) pairs so classes differ by spatio-temporal structure
and nothing else. Task pools, train/test splits, and problem sequences are
all pure functions of the master seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    ProtocolError,
    RangeError,
)
from .seeding import child_seed

Array = np.ndarray

CLIP_MAGIC = b"VCLP"
CLIP_VERSION = 1
CLIP_DTYPE_U8 = 0
_HEADER = struct.Struct("<4sBBIIII")


@dataclass(eq=False)
class Clip:
    """A frame-major uint8 pixel block of shape (p, H, W, C) plus identity."""

    frames: Array
    label: int = -1
    source_id: str = ""
    padded: bool = False

    def __post_init__(self):
        f = self.frames
        if not isinstance(f, np.ndarray) or f.ndim != 4:
            raise DimensionError("clip frames must be a rank-4 array (p,H,W,C)")
        if f.dtype != np.uint8:
            raise DimensionError(f"clip pixels must be uint8, got {f.dtype}")
        if f.shape[0] < 2:
            raise DimensionError("clips need at least 2 frames")
        if min(f.shape) <= 0:
            raise DimensionError(f"clip extents must be positive, got {f.shape}")

    @property
    def p(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def channels(self) -> int:
        return self.frames.shape[3]

    def take_frames(self, indices: Sequence[int]) -> "Clip":
        """New clip holding the given frames, order preserved."""
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, frames=self.frames[idx].copy())


# ---------------------------------------------------------------------------
# binary clip files


def write_clip(path, clip: Clip) -> None:
    header = _HEADER.pack(
        CLIP_MAGIC,
        CLIP_VERSION,
        CLIP_DTYPE_U8,
        clip.p,
        clip.height,
        clip.width,
        clip.channels,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(clip.frames).tobytes())


def read_clip(path) -> Clip:
    """Read a clip file; label and source id come from the dataset layout
    (class_<id>/clip_<id>.vclp) when the path matches it."""
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(
            f"truncated header: expected {_HEADER.size} bytes, found {len(blob)}", 0
        )
    magic, version, dtype, p, h, w, c = _HEADER.unpack_from(blob, 0)
    if magic != CLIP_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CLIP_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype != CLIP_DTYPE_U8:
        raise FormatError(f"unsupported dtype code {dtype}", 5)
    if min(p, h, w, c) == 0:
        raise FormatError(f"zero extent in header: p={p} H={h} W={w} C={c}", 6)
    expected = p * h * w * c
    actual = len(blob) - _HEADER.size
    if expected != actual:
        raise FormatError(
            f"payload size mismatch: header declares {expected} bytes, "
            f"found {actual}",
            _HEADER.size,
        )
    frames = (
        np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size)
        .reshape(p, h, w, c)
        .copy()
    )
    label = -1
    source_id = path.stem
    if path.parent.name.startswith("class_"):
        tail = path.parent.name[len("class_") :]
        if tail.isdigit():
            label = int(tail)
            # qualify with the class dir: bare stems repeat across classes
            # and source ids key feature/selection caches
            source_id = f"{path.parent.name}/{path.stem}"
    return Clip(frames=frames, label=label, source_id=source_id)


# ---------------------------------------------------------------------------
# synthetic classes

# Per-class (vx, vy) pixel velocities: vx moves columns, vy moves rows.
# Entry 0 is the static class.
MOTION_TABLE: tuple[tuple[int, int], ...] = (
    (0, 0),
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
    (2, 0),
    (-2, 0),
    (0, 2),
    (0, -2),
    (2, 2),
    (-2, -2),
    (2, -2),
    (-2, 2),
    (2, 1),
    (1, 2),
    (-2, 1),
    (-1, 2),
    (2, -1),
    (1, -2),
    (-2, -1),
    (-1, -2),
    (3, 0),
    (-3, 0),
    (0, 3),
    (0, -3),
    (3, 3),
)

NOISE_SIGMA = 8.0
_BACKGROUND = 30.0
_SQUARE = 200.0


def generate_synthetic_class(
    class_id: int, count: int, shape: tuple[int, int, int, int], seed: int
) -> list[Clip]:
    """Make `count` clips of one class: a bright square translating with the
    class's table velocity (toroidal wrap) over noisy dark background."""
    if not (0 <= class_id < len(MOTION_TABLE)):
        raise RangeError(
            f"class id {class_id} outside motion table [0, {len(MOTION_TABLE)})"
        )
    p, h, w, c = shape
    if min(p, h, w, c) <= 0 or p < 2:
        raise DimensionError(f"invalid clip shape {shape}")
    vx, vy = MOTION_TABLE[class_id]
    side = max(2, min(h, w) // 3)
    clips: list[Clip] = []
    for i in range(count):
        rng = np.random.default_rng(child_seed(seed, i))
        row0 = int(rng.integers(0, h))
        col0 = int(rng.integers(0, w))
        stack = np.full((p, h, w, c), _BACKGROUND, dtype=np.float64)
        for t in range(p):
            rows = (row0 + t * vy + np.arange(side)) % h
            cols = (col0 + t * vx + np.arange(side)) % w
            stack[t][np.ix_(rows, cols)] = _SQUARE
        stack += rng.normal(0.0, NOISE_SIGMA, size=stack.shape)
        frames = np.clip(stack, 0.0, 255.0).astype(np.uint8)
        clips.append(
            Clip(frames=frames, label=class_id, source_id=f"c{class_id}_k{i}")
        )
    return clips


# ---------------------------------------------------------------------------
# protocol types and sampling


@dataclass(frozen=True)
class ProtocolConfig:
    pool_size: int = 15
    classes_per_task: int = 2
    tasks_per_problem: int = 5
    experiments: int = 50
    test_fraction: Fraction = Fraction(3, 10)
    clips_per_class: int = 130
    master_seed: int = 0

    def __post_init__(self):
        if min(self.pool_size, self.classes_per_task, self.tasks_per_problem) <= 0:
            raise ConfigError("pool size, classes per task, tasks per problem must be positive")
        if self.experiments <= 0:
            raise ConfigError("experiment count must be positive")
        if not (0 < self.test_fraction < 1):
            raise ConfigError("test fraction must lie in (0, 1)")
        if self.clips_per_class < 2:
            raise ConfigError("need at least 2 clips per class")
        if self.tasks_per_problem > self.pool_size:
            raise ProtocolError(
                f"tasks per problem {self.tasks_per_problem} exceeds pool size {self.pool_size}"
            )


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    classes: tuple[int, ...]
    train_ids: dict[int, tuple[int, ...]]
    test_ids: dict[int, tuple[int, ...]]


@dataclass(frozen=True)
class ContinualProblem:
    experiment_id: int
    problem_seed: int
    tasks: tuple[TaskSpec, ...] = field(default_factory=tuple)


def split_counts(count: int, test_fraction: Fraction) -> tuple[int, int]:
    """Train/test sizes for one class. The fraction is the test:train odds,
    so count=130 with 3/10 gives 100 train and 30 test, computed exactly."""
    n_train = int(round(Fraction(count) / (1 + test_fraction)))
    n_test = count - n_train
    if n_train < 1 or n_test < 1:
        raise ProtocolError(
            f"split of {count} clips at fraction {test_fraction} leaves an empty side"
        )
    return n_train, n_test


def build_task_pool(classes: Sequence[int], cfg: ProtocolConfig) -> list[TaskSpec]:
    """Group classes into pool_size disjoint tasks of classes_per_task each,
    with a deterministic per-class train/test split."""
    classes = list(classes)
    need = cfg.pool_size * cfg.classes_per_task
    if len(set(classes)) != len(classes):
        raise ProtocolError("class ids must be unique")
    if len(classes) < need:
        raise ProtocolError(
            f"need {need} classes for the pool, got {len(classes)}"
        )
    rng = np.random.default_rng(child_seed(cfg.master_seed, "pool"))
    order = [classes[i] for i in rng.permutation(len(classes))]
    n_train, _ = split_counts(cfg.clips_per_class, cfg.test_fraction)
    pool: list[TaskSpec] = []
    for t in range(cfg.pool_size):
        group = tuple(sorted(order[t * cfg.classes_per_task : (t + 1) * cfg.classes_per_task]))
        train_ids: dict[int, tuple[int, ...]] = {}
        test_ids: dict[int, tuple[int, ...]] = {}
        for class_id in group:
            srng = np.random.default_rng(child_seed(cfg.master_seed, "split", class_id))
            ids = srng.permutation(cfg.clips_per_class)
            train_ids[class_id] = tuple(sorted(int(x) for x in ids[:n_train]))
            test_ids[class_id] = tuple(sorted(int(x) for x in ids[n_train:]))
        pool.append(TaskSpec(task_id=t, classes=group, train_ids=train_ids, test_ids=test_ids))
    return pool


def sample_problems(pool: Sequence[TaskSpec], cfg: ProtocolConfig) -> list[ContinualProblem]:
    """Draw `experiments` ordered T-subsets of the pool without replacement."""
    if cfg.tasks_per_problem > len(pool):
        raise ProtocolError(
            f"tasks per problem {cfg.tasks_per_problem} exceeds pool of {len(pool)}"
        )
    problems: list[ContinualProblem] = []
    for e in range(cfg.experiments):
        pseed = child_seed(cfg.master_seed, "problem", e)
        rng = np.random.default_rng(pseed)
        picks = rng.permutation(len(pool))[: cfg.tasks_per_problem]
        problems.append(
            ContinualProblem(
                experiment_id=e,
                problem_seed=pseed,
                tasks=tuple(pool[int(i)] for i in picks),
            )
        )
    return problems


# ---------------------------------------------------------------------------
# training views and features


def pad_to_window(clip: Clip, window: int) -> Clip:
    """Repeat the final frame until the clip reaches `window` frames."""
    if clip.p >= window:
        return clip
    tail = np.repeat(clip.frames[-1:], window - clip.p, axis=0)
    return replace(clip, frames=np.concatenate([clip.frames, tail], axis=0), padded=True)


def temporal_crop(clip: Clip, window: int, seed: int) -> Clip:
    """A contiguous `window`-frame view starting at a uniform random offset.
    Short clips are repeat-padded and flagged instead of rejected."""
    if window < 2:
        raise ConfigError("window must be at least 2 frames")
    if clip.p < window:
        return pad_to_window(clip, window)
    start = int(np.random.default_rng(seed).integers(0, clip.p - window + 1))
    return replace(clip, frames=clip.frames[start : start + window].copy())


def clip_features(clip: Clip, pool: int) -> Array:
    """Flattened training features: pixels to [0,1], spatial block-average
    pooling by `pool`, then per-channel standardization over the whole clip."""
    p, h, w, c = clip.frames.shape
    if pool < 1 or h % pool or w % pool:
        raise ConfigError(f"pool {pool} must divide frame extents {h}x{w}")
    x = clip.frames.astype(np.float64) / 255.0
    x = x.reshape(p, h // pool, pool, w // pool, pool, c).mean(axis=(2, 4))
    mu = x.mean(axis=(0, 1, 2))
    sd = np.maximum(x.std(axis=(0, 1, 2)), 1e-8)
    return ((x - mu) / sd).ravel()


def feature_dim(window: int, height: int, width: int, channels: int, pool: int) -> int:
    if pool < 1 or height % pool or width % pool:
        raise ConfigError(f"pool {pool} must divide frame extents {height}x{width}")
    return window * (height // pool) * (width // pool) * channels


# ---------------------------------------------------------------------------
# dataset directory layout


def class_dir_name(class_id: int) -> str:
    return f"class_{class_id}"


def clip_file_name(clip_id: int) -> str:
    return f"clip_{clip_id}.vclp"


def write_dataset(
    root,
    classes: Sequence[int],
    clips_per_class: int,
    shape: tuple[int, int, int, int],
    master_seed: int,
) -> int:
    """Materialize the synthetic dataset; returns the file count."""
    root = Path(root)
    written = 0
    for class_id in classes:
        cdir = root / class_dir_name(class_id)
        cdir.mkdir(parents=True, exist_ok=True)
        clips = generate_synthetic_class(
            class_id, clips_per_class, shape, child_seed(master_seed, "data", class_id)
        )
        for i, clip in enumerate(clips):
            write_clip(cdir / clip_file_name(i), clip)
            written += 1
    return written


class ClipStore:
    """Lazy reader over the class_<id>/clip_<id>.vclp layout with a cache."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ConfigError(f"dataset directory not found: {self.root}")
        self._cache: dict[tuple[int, int], Clip] = {}
        self._counts: dict[int, int] = {}
        for cdir in sorted(self.root.glob("class_*")):
            tail = cdir.name[len("class_") :]
            if not tail.isdigit():
                continue
            self._counts[int(tail)] = len(list(cdir.glob("clip_*.vclp")))

    def class_ids(self) -> list[int]:
        return sorted(self._counts)

    def count(self, class_id: int) -> int:
        return self._counts.get(class_id, 0)

    def clip(self, class_id: int, clip_id: int) -> Clip:
        key = (class_id, clip_id)
        if key not in self._cache:
            path = self.root / class_dir_name(class_id) / clip_file_name(clip_id)
            if not path.is_file():
                raise ConfigError(f"missing clip file: {path}")
            self._cache[key] = read_clip(path)
        return self._cache[key]
