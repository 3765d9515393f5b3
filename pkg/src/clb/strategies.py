"""Pluggable continual-learning strategies.

Each strategy turns (model, current batch, replay buffer) into one training
loss and writes gradients; the experiment loop owns the optimizer step and
the buffer offers. Replay draws use per-step child seeds with fixed draw
indices (primary 0, secondary 1) so equality harnesses can pin sampling and
the two-draw strategy consumes exactly the one-draw strategy's randomness
when its second term is disabled.

Zero-weight terms are skipped at graph-build time, which makes the reduction
identities exact: alpha=0 or an empty buffer builds literally the plain
cross-entropy graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffcore import (
    MLP,
    Tensor,
    add,
    add_const,
    log_softmax,
    log_softmax_np,
    loss_ce,
    loss_mse,
    mul,
    mul_const,
    scale,
    softmax_np,
    sub_const,
    sum_all,
)
from .errors import ConfigError, EstimationError
from .rehearsal import BufferItem, ReplayBuffer
from .seeding import child_seed
from .videodata import Clip

Array = np.ndarray
Featurizer = Callable[[Clip], Array]

STRATEGY_KINDS = ("finetune", "er", "der", "derpp", "ewc", "lwf", "agem")

REPLAY_PRIMARY = 0
REPLAY_SECONDARY = 1


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "finetune"
    alpha: float = 0.5
    beta: float = 0.5
    ewc_lambda: float = 400.0
    tau: float = 2.0
    lwf_weight: float = 1.0
    replay_batch: int = 16
    fisher_cap: int = 128
    buffer_capacity: int = 200

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        if min(self.alpha, self.beta, self.ewc_lambda, self.lwf_weight) < 0:
            raise ConfigError("strategy weights must be nonnegative")
        if not self.tau > 0:
            raise ConfigError("distillation temperature must be positive")
        if self.replay_batch < 1 or self.fisher_cap < 1:
            raise ConfigError("replay batch and fisher cap must be positive")
        if self.buffer_capacity < 1:
            raise ConfigError("buffer capacity must be positive")


@dataclass
class TaskSnapshot:
    """Frozen parameters plus their diagonal curvature weights after a task."""

    params: dict[str, Array]
    fisher: dict[str, Array]
    teacher: MLP | None = None


# ---------------------------------------------------------------------------
# loss builders


def _ce_with_logits(model: MLP, feats: Array, labels: Sequence[int]) -> tuple[Tensor, Tensor]:
    logits = model.forward(feats)
    return loss_ce(logits, labels), logits


def _draw(
    buffer: ReplayBuffer,
    featurizer: Featurizer,
    batch_size: int,
    step_seed: int,
    draw_index: int,
) -> tuple[Array, list[int], Array]:
    items = buffer.sample_batch(batch_size, child_seed(step_seed, draw_index))
    feats = np.stack([featurizer(it.clip) for it in items])
    labels = [it.label for it in items]
    logits = np.stack([it.logits for it in items])
    return feats, labels, logits


def loss_finetune(model: MLP, feats: Array, labels: Sequence[int]) -> Tensor:
    """Plain cross-entropy on the current batch."""
    loss, _ = _ce_with_logits(model, feats, labels)
    return loss


def loss_er(
    model: MLP,
    feats: Array,
    labels: Sequence[int],
    buffer: ReplayBuffer | None,
    featurizer: Featurizer,
    replay_batch: int,
    step_seed: int,
) -> Tensor:
    """Cross-entropy on the batch plus cross-entropy on a replay draw."""
    loss, _ = _ce_with_logits(model, feats, labels)
    if buffer is None or buffer.is_empty():
        return loss
    rfeats, rlabels, _ = _draw(buffer, featurizer, replay_batch, step_seed, REPLAY_PRIMARY)
    return add(loss, loss_ce(model.forward(rfeats), rlabels))


def _logit_match_term(model: MLP, buffer, featurizer, replay_batch, step_seed) -> Tensor:
    rfeats, _, rlogits = _draw(buffer, featurizer, replay_batch, step_seed, REPLAY_PRIMARY)
    if rlogits.shape[1] != model.k:
        raise ConfigError(
            f"stored logits have length {rlogits.shape[1]}, model head is {model.k}"
        )
    return loss_mse(model.forward(rfeats), Tensor(rlogits))


def loss_der(
    model: MLP,
    feats: Array,
    labels: Sequence[int],
    buffer: ReplayBuffer | None,
    featurizer: Featurizer,
    replay_batch: int,
    step_seed: int,
    alpha: float,
) -> Tensor:
    """Cross-entropy plus alpha * MSE(current logits on replayed clips,
    logits stored at insertion)."""
    loss, _ = _ce_with_logits(model, feats, labels)
    if alpha == 0.0 or buffer is None or buffer.is_empty():
        return loss
    term = _logit_match_term(model, buffer, featurizer, replay_batch, step_seed)
    return add(loss, scale(term, alpha))


def loss_derpp(
    model: MLP,
    feats: Array,
    labels: Sequence[int],
    buffer: ReplayBuffer | None,
    featurizer: Featurizer,
    replay_batch: int,
    step_seed: int,
    alpha: float,
    beta: float,
) -> Tensor:
    """The logit-matching loss plus beta * cross-entropy on a second draw."""
    loss = loss_der(model, feats, labels, buffer, featurizer, replay_batch, step_seed, alpha)
    if beta == 0.0 or buffer is None or buffer.is_empty():
        return loss
    rfeats, rlabels, _ = _draw(buffer, featurizer, replay_batch, step_seed, REPLAY_SECONDARY)
    return add(loss, scale(loss_ce(model.forward(rfeats), rlabels), beta))


def ewc_penalty(model: MLP, snapshots: Sequence[TaskSnapshot]) -> Tensor | None:
    """Sum over snapshots of sum_i F_i * (theta_i - theta*_i)^2."""
    pen: Tensor | None = None
    for snap in snapshots:
        for name, t in model.pv:
            anchor = snap.params[name]
            fisher = snap.fisher[name]
            if anchor.shape != t.data.shape or fisher.shape != t.data.shape:
                raise ConfigError(f"snapshot shape mismatch on parameter {name!r}")
            d = sub_const(t, anchor)
            s = sum_all(mul_const(mul(d, d), fisher))
            pen = s if pen is None else add(pen, s)
    return pen


def loss_ewc(
    model: MLP,
    feats: Array,
    labels: Sequence[int],
    snapshots: Sequence[TaskSnapshot],
    lam: float,
) -> Tensor:
    """Cross-entropy plus (lambda/2) * quadratic anchor penalty."""
    loss, _ = _ce_with_logits(model, feats, labels)
    if lam == 0.0 or not snapshots:
        return loss
    pen = ewc_penalty(model, snapshots)
    return add(loss, scale(pen, lam / 2.0))


def loss_lwf(
    model: MLP,
    feats: Array,
    labels: Sequence[int],
    teacher: MLP | None,
    tau: float,
    weight: float,
) -> Tensor:
    """Cross-entropy plus temperature-scaled distillation against the frozen
    teacher's softened outputs on the same batch."""
    logits = model.forward(feats)
    loss = loss_ce(logits, labels)
    if teacher is None or weight == 0.0:
        return loss
    inv_tau = 1.0 / tau
    t_scaled = teacher.logits_np(feats) * inv_tau
    pt = softmax_np(t_scaled)
    log_pt = log_softmax_np(t_scaled)
    const = float((pt * log_pt).sum())
    lsm = log_softmax(scale(logits, inv_tau))
    cross = sum_all(mul_const(lsm, pt))
    kl = add_const(scale(cross, -1.0), const)
    b = feats.shape[0]
    return add(loss, scale(kl, weight * tau * tau / b))


def estimate_fisher(
    model: MLP, feats: Array, labels: Sequence[int], sample_cap: int, seed: int
) -> dict[str, Array]:
    """Empirical diagonal Fisher: mean squared log-likelihood gradient over
    at most sample_cap samples (seeded subsample when the set is larger)."""
    n = len(labels)
    if n == 0:
        raise EstimationError("fisher estimation needs at least one sample")
    take = min(sample_cap, n)
    idx = np.random.default_rng(seed).permutation(n)[:take]
    acc = {name: np.zeros_like(t.data) for name, t in model.pv}
    for i in idx:
        model.zero_grad()
        loss = loss_ce(model.forward(feats[i : i + 1]), [labels[i]])
        loss.backward()
        for name, t in model.pv:
            acc[name] += t.grad * t.grad
    model.zero_grad()
    for name in acc:
        acc[name] /= take
    return acc


def agem_project(g: Array, g_ref: Array) -> Array:
    """Project g off g_ref when they disagree: g' = g - (<g,gr>/<gr,gr>) gr."""
    g = np.asarray(g, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    if g.shape != g_ref.shape:
        raise ConfigError(f"gradient shapes differ: {g.shape} vs {g_ref.shape}")
    dot = float(g @ g_ref)
    if dot >= 0.0:
        return g
    return g - (dot / float(g_ref @ g_ref)) * g_ref


# ---------------------------------------------------------------------------
# strategy objects


class Strategy:
    """Base: plain fine-tuning. Subclasses override _build and hooks."""

    kind = "finetune"
    uses_buffer = False

    def __init__(self, cfg: StrategyConfig, featurizer: Featurizer):
        self.cfg = cfg
        self._featurize = featurizer
        self._feat_cache: dict[int, Array] = {}

    def _item_features(self, item: BufferItem) -> Array:
        hit = self._feat_cache.get(item.stream_index)
        if hit is None:
            hit = self._featurize(item.clip)
            self._feat_cache[item.stream_index] = hit
        return hit

    def _replay(self, buffer: ReplayBuffer, step_seed: int, draw_index: int):
        items = buffer.sample_batch(
            self.cfg.replay_batch, child_seed(step_seed, draw_index)
        )
        feats = np.stack([self._item_features(it) for it in items])
        labels = [it.label for it in items]
        logits = np.stack([it.logits for it in items])
        return feats, labels, logits

    def _build(
        self,
        model: MLP,
        feats: Array,
        labels: Sequence[int],
        buffer: ReplayBuffer | None,
        step_seed: int,
    ) -> tuple[Tensor, Tensor]:
        return _ce_with_logits(model, feats, labels)

    def prepare_gradients(
        self,
        model: MLP,
        feats: Array,
        labels: Sequence[int],
        buffer: ReplayBuffer | None,
        step_seed: int,
    ) -> tuple[float, Array]:
        """Build the loss, backprop, leave gradients in the model. Returns
        (loss value, detached current-batch logits for buffer offers)."""
        model.zero_grad()
        loss, logits = self._build(model, feats, labels, buffer, step_seed)
        loss.backward()
        return float(loss.data), logits.data.copy()

    def end_of_task(self, model: MLP, feats: Array, labels: Sequence[int]) -> None:
        pass


class ERStrategy(Strategy):
    kind = "er"
    uses_buffer = True

    def _build(self, model, feats, labels, buffer, step_seed):
        loss, logits = _ce_with_logits(model, feats, labels)
        if buffer is not None and not buffer.is_empty():
            rfeats, rlabels, _ = self._replay(buffer, step_seed, REPLAY_PRIMARY)
            loss = add(loss, loss_ce(model.forward(rfeats), rlabels))
        return loss, logits


class DERStrategy(Strategy):
    kind = "der"
    uses_buffer = True

    def _build(self, model, feats, labels, buffer, step_seed):
        loss, logits = _ce_with_logits(model, feats, labels)
        if self.cfg.alpha != 0.0 and buffer is not None and not buffer.is_empty():
            rfeats, _, rlogits = self._replay(buffer, step_seed, REPLAY_PRIMARY)
            if rlogits.shape[1] != model.k:
                raise ConfigError(
                    f"stored logits have length {rlogits.shape[1]}, model head is {model.k}"
                )
            term = loss_mse(model.forward(rfeats), Tensor(rlogits))
            loss = add(loss, scale(term, self.cfg.alpha))
        return loss, logits


class DERPPStrategy(DERStrategy):
    kind = "derpp"

    def _build(self, model, feats, labels, buffer, step_seed):
        loss, logits = super()._build(model, feats, labels, buffer, step_seed)
        if self.cfg.beta != 0.0 and buffer is not None and not buffer.is_empty():
            rfeats, rlabels, _ = self._replay(buffer, step_seed, REPLAY_SECONDARY)
            loss = add(loss, scale(loss_ce(model.forward(rfeats), rlabels), self.cfg.beta))
        return loss, logits


class EWCStrategy(Strategy):
    kind = "ewc"

    def __init__(self, cfg, featurizer):
        super().__init__(cfg, featurizer)
        self.snapshots: list[TaskSnapshot] = []

    def _build(self, model, feats, labels, buffer, step_seed):
        logits = model.forward(feats)
        loss = loss_ce(logits, labels)
        if self.cfg.ewc_lambda != 0.0 and self.snapshots:
            pen = ewc_penalty(model, self.snapshots)
            loss = add(loss, scale(pen, self.cfg.ewc_lambda / 2.0))
        return loss, logits

    def end_of_task(self, model, feats, labels):
        fisher = estimate_fisher(
            model, feats, labels, self.cfg.fisher_cap, child_seed(len(self.snapshots), "fisher")
        )
        self.snapshots.append(TaskSnapshot(params=model.pv.as_arrays(), fisher=fisher))


class LwFStrategy(Strategy):
    kind = "lwf"

    def __init__(self, cfg, featurizer):
        super().__init__(cfg, featurizer)
        self.teacher: MLP | None = None

    def _build(self, model, feats, labels, buffer, step_seed):
        logits = model.forward(feats)
        loss = loss_ce(logits, labels)
        if self.teacher is not None and self.cfg.lwf_weight != 0.0:
            inv_tau = 1.0 / self.cfg.tau
            t_scaled = self.teacher.logits_np(feats) * inv_tau
            pt = softmax_np(t_scaled)
            log_pt = log_softmax_np(t_scaled)
            const = float((pt * log_pt).sum())
            lsm = log_softmax(scale(logits, inv_tau))
            kl = add_const(scale(sum_all(mul_const(lsm, pt)), -1.0), const)
            b = feats.shape[0]
            loss = add(loss, scale(kl, self.cfg.lwf_weight * self.cfg.tau**2 / b))
        return loss, logits

    def end_of_task(self, model, feats, labels):
        self.teacher = model.copy()


class AGEMStrategy(Strategy):
    kind = "agem"
    uses_buffer = True

    def prepare_gradients(self, model, feats, labels, buffer, step_seed):
        model.zero_grad()
        loss, logits = _ce_with_logits(model, feats, labels)
        loss.backward()
        if buffer is not None and not buffer.is_empty():
            g = model.pv.flat_grads()
            rfeats, rlabels, _ = self._replay(buffer, step_seed, REPLAY_PRIMARY)
            model.zero_grad()
            ref_loss = loss_ce(model.forward(rfeats), rlabels)
            ref_loss.backward()
            g_ref = model.pv.flat_grads()
            model.pv.load_flat_grads(agem_project(g, g_ref))
        return float(loss.data), logits.data.copy()


_STRATEGIES = {
    cls.kind: cls
    for cls in (
        Strategy,
        ERStrategy,
        DERStrategy,
        DERPPStrategy,
        EWCStrategy,
        LwFStrategy,
        AGEMStrategy,
    )
}


def make_strategy(cfg: StrategyConfig, featurizer: Featurizer) -> Strategy:
    return _STRATEGIES[cfg.kind](cfg, featurizer)
