"""Capacity-bounded replay buffer.

Admission is streaming reservoir sampling over the gated offer stream: an
offer first passes the optional confidence gate (softmax probability of the
true label strictly above delta), then either fills a free slot or replaces a
uniformly random slot with probability capacity/n_admitted. Rejected offers
never advance the admitted counter, so the reservoir stays uniform over the
gated stream.

With frame downsampling enabled, the stored clip is re-windowed to the most
motion-heavy frames of the offered clip before storage; selections are
memoized per source id (they are pure in the clip pixels and flow config).

Memory accounting uses the 32-bit-float-per-pixel storage convention for the
clip payload regardless of the uint8 in-memory representation; that payload
figure is the reported metric, with logits (8 bytes each) and a fixed
per-item overhead added on top for the total.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .diffcore import softmax_np
from .errors import ConfigError, EmptyBufferError, LabelError
from .flowselect import FlowConfig, idd_select
from .videodata import Clip

Array = np.ndarray

ITEM_OVERHEAD_BYTES = 64  # label, task id, confidence, stream index bookkeeping
BUFFER_OVERHEAD_BYTES = 64  # counters, RNG state, gate config


def softmax_confidence(logits: Array, label: int) -> float:
    """Softmax probability assigned to the true label."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ConfigError("confidence needs a rank-1 logit vector")
    if not (0 <= label < logits.shape[0]):
        raise LabelError(f"label {label} outside [0, {logits.shape[0]})")
    return float(softmax_np(logits[None, :])[0, label])


@dataclass(frozen=True)
class GateConfig:
    cdr_enabled: bool = False
    delta: float = 0.7
    idd_enabled: bool = False
    frame_budget: int = 16
    flow: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if self.cdr_enabled and not (0.0 < self.delta < 1.0):
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.idd_enabled and self.frame_budget < 2:
            raise ConfigError("frame budget must be at least 2")


@dataclass(eq=False)
class BufferItem:
    clip: Clip
    label: int
    logits: Array
    task_id: int
    confidence: float
    stream_index: int


class ReplayBuffer:
    """Reservoir of at most `capacity` items over the gated offer stream."""

    def __init__(
        self,
        capacity: int,
        window: int,
        n_classes: int,
        gate: GateConfig | None = None,
        seed: int = 0,
    ):
        if capacity < 1:
            raise ConfigError("buffer capacity must be at least 1")
        if window < 2:
            raise ConfigError("stored window must be at least 2 frames")
        if n_classes < 1:
            raise ConfigError("class count must be positive")
        self.capacity = capacity
        self.window = window
        self.n_classes = n_classes
        self.gate = gate or GateConfig()
        if self.gate.idd_enabled and self.gate.frame_budget != window:
            raise ConfigError(
                f"frame budget {self.gate.frame_budget} differs from the stored "
                f"window {window}"
            )
        self.items: list[BufferItem] = []
        self.n_offered = 0
        self.n_admitted = 0
        self.n_rejected = 0
        self._rng = random.Random(seed)
        self._idd_cache: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.items)

    def is_empty(self) -> bool:
        return not self.items

    def offer(self, clip: Clip, label: int, logits: Array, task_id: int) -> bool:
        """Run one stream element through gate and reservoir. Returns whether
        the element was admitted (it may still not be stored)."""
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (self.n_classes,):
            raise ConfigError(
                f"expected {self.n_classes} logits, got shape {logits.shape}"
            )
        stream_index = self.n_offered
        self.n_offered += 1
        confidence = None
        if self.gate.cdr_enabled:
            confidence = softmax_confidence(logits, label)
            if confidence <= self.gate.delta:
                self.n_rejected += 1
                return False
        self.n_admitted += 1
        if len(self.items) < self.capacity:
            slot = -1
        else:
            j = self._rng.randrange(self.n_admitted)
            if j >= self.capacity:
                return True
            slot = j
        if confidence is None:
            confidence = softmax_confidence(logits, label)
        item = BufferItem(
            clip=self._stored_clip(clip),
            label=label,
            logits=logits.copy(),
            task_id=task_id,
            confidence=confidence,
            stream_index=stream_index,
        )
        if slot < 0:
            self.items.append(item)
        else:
            self.items[slot] = item
        return True

    def _stored_clip(self, clip: Clip) -> Clip:
        if self.gate.idd_enabled:
            indices = self._idd_cache.get(clip.source_id)
            if indices is None:
                indices = idd_select(clip, self.gate.frame_budget, self.gate.flow)
                self._idd_cache[clip.source_id] = indices
            clip = clip.take_frames(indices)
        if clip.p != self.window:
            raise ConfigError(
                f"stored clip has {clip.p} frames, buffer window is {self.window}"
            )
        return clip

    def sample_batch(self, batch_size: int, seed: int) -> list[BufferItem]:
        """Uniform draw with replacement, deterministic in the seed."""
        if not self.items:
            raise EmptyBufferError("cannot sample from an empty buffer")
        rng = random.Random(seed)
        n = len(self.items)
        return [self.items[rng.randrange(n)] for _ in range(batch_size)]

    def clip_payload_bytes(self) -> int:
        """Stored pixel payload under the 32-bit-float convention."""
        return sum(
            it.clip.p * it.clip.height * it.clip.width * it.clip.channels * 4
            for it in self.items
        )

    def memory_bytes(self) -> int:
        """Total accounted footprint: payload + logits + fixed overheads."""
        per_item = self.n_classes * 8 + ITEM_OVERHEAD_BYTES
        return (
            BUFFER_OVERHEAD_BYTES
            + self.clip_payload_bytes()
            + len(self.items) * per_item
        )

    def audit_rows(self) -> list[tuple[int, int, int, float, int]]:
        """(item_index, task_id, label, confidence, stream_index) per slot."""
        return [
            (i, it.task_id, it.label, it.confidence, it.stream_index)
            for i, it in enumerate(self.items)
        ]
