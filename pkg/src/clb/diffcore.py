"""Dense float64 tensor core with reverse-mode automatic differentiation.

Holds the minimal op set the training protocol needs (matrix multiply, bias
add, ReLU, log-softmax, the loss reductions), a two-layer MLP classifier,
SGD/RMSProp updates, and the binary parameter-checkpoint format.

Gradients accumulate across backward calls until zero_grad, matching the
usual tape semantics. All arithmetic is float64; non-finite values raise
NumericError at the checkpoints where they can first appear (loss values,
gradients entering an optimizer step, network inputs and outputs).
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    GraphError,
    LabelError,
    NumericError,
)

Array = np.ndarray


class Tensor:
    """A float64 array plus the tape bookkeeping needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._bw = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _on_tape(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every reachable leaf's .grad."""
        if self.data.size != 1:
            raise GraphError("backward needs a scalar, got shape %r" % (self.shape,))
        if not self._on_tape():
            raise GraphError("backward on a scalar detached from any graph")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._bw is not None:
                node._bw()


def _accum(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _node(data: Array, parents: tuple[Tensor, ...], bw) -> Tensor:
    out = Tensor(data)
    out._parents = parents
    out._bw = bw
    return out


def _check_finite_scalar(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}: {value!r}")


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects rank-2 operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )
    out = _node(a.data @ b.data, (a, b), None)

    def bw():
        g = out.grad
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    out._bw = bw
    return out


def add_row(a: Tensor, bias: Tensor) -> Tensor:
    """Broadcast-add a length-K bias row onto a BxK matrix."""
    if a.data.ndim != 2 or bias.data.ndim != 1 or a.data.shape[1] != bias.data.shape[0]:
        raise DimensionError(
            f"bias add shape mismatch: {a.data.shape} + {bias.data.shape}"
        )
    out = _node(a.data + bias.data, (a, bias), None)

    def bw():
        g = out.grad
        _accum(a, g)
        _accum(bias, g.sum(axis=0))

    out._bw = bw
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data + b.data, (a, b), None)

    def bw():
        g = out.grad
        _accum(a, g)
        _accum(b, g)

    out._bw = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data - b.data, (a, b), None)

    def bw():
        g = out.grad
        _accum(a, g)
        _accum(b, -g)

    out._bw = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product. a and b may be the same tensor (squaring)."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data * b.data, (a, b), None)

    def bw():
        g = out.grad
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    out._bw = bw
    return out


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or array (not differentiated)."""
    c = np.asarray(c, dtype=np.float64)
    out = _node(a.data * c, (a,), None)

    def bw():
        _accum(a, out.grad * c)

    out._bw = bw
    return out


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    out = _node(a.data + c, (a,), None)

    def bw():
        _accum(a, out.grad)

    out._bw = bw
    return out


def sub_const(a: Tensor, c) -> Tensor:
    return add_const(a, -np.asarray(c, dtype=np.float64))


def scale(a: Tensor, s: float) -> Tensor:
    return mul_const(a, float(s))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out = _node(a.data * mask, (a,), None)

    def bw():
        _accum(a, out.grad * mask)

    out._bw = bw
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _node(np.asarray(a.data.sum()), (a,), None)

    def bw():
        _accum(a, np.full(a.data.shape, float(out.grad)))

    out._bw = bw
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _node(np.asarray(a.data.mean()), (a,), None)

    def bw():
        _accum(a, np.full(a.data.shape, float(out.grad) / n))

    out._bw = bw
    return out


def log_softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("log_softmax expects a BxK matrix")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = _node(z - lse, (a,), None)

    def bw():
        g = out.grad
        soft = np.exp(out.data)
        _accum(a, g - soft * g.sum(axis=1, keepdims=True))

    out._bw = bw
    return out


def log_softmax_np(logits: Array) -> Array:
    """Graph-free twin of log_softmax, bit-identical arithmetic."""
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_np(logits: Array) -> Array:
    return np.exp(log_softmax_np(np.asarray(logits, dtype=np.float64)))


def nll_mean(lsm: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative picked log-probability over the batch."""
    b, k = lsm.data.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise DimensionError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= k:
        raise LabelError(f"label outside [0, {k})")
    rows = np.arange(b)
    out = _node(np.asarray(-lsm.data[rows, labels].mean()), (lsm,), None)

    def bw():
        g = np.zeros_like(lsm.data)
        g[rows, labels] = -float(out.grad) / b
        _accum(lsm, g)

    out._bw = bw
    return out


def loss_ce(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of logits against integer labels."""
    out = nll_mean(log_softmax(logits), labels)
    _check_finite_scalar(float(out.data), "cross-entropy loss")
    return out


def loss_mse(logits: Tensor, target: Tensor) -> Tensor:
    """Mean squared elementwise difference."""
    if logits.data.shape != target.data.shape:
        raise DimensionError(
            f"mse shape mismatch: {logits.data.shape} vs {target.data.shape}"
        )
    d = sub(logits, target)
    out = mean_all(mul(d, d))
    _check_finite_scalar(float(out.data), "mse loss")
    return out


# ---------------------------------------------------------------------------
# parameters and optimizers


class ParamVector:
    """Ordered named parameter tensors with mirrored gradient storage."""

    def __init__(self, named: Iterable[tuple[str, Array]]):
        self._params: dict[str, Tensor] = {}
        for name, arr in named:
            if name in self._params:
                raise ConfigError(f"duplicate parameter name {name!r}")
            self._params[name] = Tensor(np.array(arr, dtype=np.float64), requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.items())

    def names(self) -> list[str]:
        return list(self._params)

    @property
    def dim(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0

    def flatten(self) -> Array:
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def unflatten(self, vec: Array) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimensionError(f"expected {self.dim} values, got shape {vec.shape}")
        pos = 0
        for t in self._params.values():
            n = t.data.size
            t.data[...] = vec[pos : pos + n].reshape(t.data.shape)
            pos += n

    def flat_grads(self) -> Array:
        return np.concatenate([t.grad.ravel() for t in self._params.values()])

    def load_flat_grads(self, vec: Array) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimensionError(f"expected {self.dim} values, got shape {vec.shape}")
        pos = 0
        for t in self._params.values():
            n = t.data.size
            t.grad[...] = vec[pos : pos + n].reshape(t.data.shape)
            pos += n

    def copy(self) -> "ParamVector":
        return ParamVector((name, t.data.copy()) for name, t in self)

    def as_arrays(self) -> dict[str, Array]:
        return {name: t.data.copy() for name, t in self}


class OptimizerState:
    """SGD or RMSProp update state over one ParamVector."""

    KINDS = ("sgd", "rmsprop")

    def __init__(
        self,
        kind: str,
        learning_rate: float,
        rho: float = 0.99,
        eps: float = 1e-8,
    ):
        if kind not in self.KINDS:
            raise ConfigError(f"unknown optimizer kind {kind!r}")
        if not learning_rate > 0:
            raise ConfigError("learning rate must be positive")
        if not (0.0 < rho < 1.0):
            raise ConfigError("rmsprop decay must lie in (0, 1)")
        self.kind = kind
        self.lr = float(learning_rate)
        self.rho = float(rho)
        self.eps = float(eps)
        self._accum: dict[str, Array] = {}

    def accumulator(self, name: str) -> Array | None:
        return self._accum.get(name)

    def step(self, params: ParamVector) -> None:
        """Apply one update in place from the currently stored gradients."""
        for name, t in params:
            g = t.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            if self.kind == "sgd":
                t.data -= self.lr * g
            else:
                v = self._accum.get(name)
                if v is None:
                    v = np.zeros_like(t.data)
                    self._accum[name] = v
                v *= self.rho
                v += (1.0 - self.rho) * g * g
                t.data -= self.lr * g / np.sqrt(v + self.eps)


# ---------------------------------------------------------------------------
# the classifier


def forward_mlp(params: ParamVector, batch: Array) -> Tensor:
    """Two-layer ReLU network: relu(x W1 + b1) W2 + b2, graph retained."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise DimensionError("batch must be rank 2 (B x D_in)")
    w1 = params["w1"]
    if batch.shape[1] != w1.data.shape[0]:
        raise DimensionError(
            f"batch width {batch.shape[1]} != input dimension {w1.data.shape[0]}"
        )
    if not np.isfinite(batch).all():
        raise NumericError("non-finite values in input batch")
    x = Tensor(batch)
    h = relu(add_row(matmul(x, w1), params["b1"]))
    logits = add_row(matmul(h, params["w2"]), params["b2"])
    if not np.isfinite(logits.data).all():
        raise NumericError("non-finite logits in forward pass")
    return logits


class MLP:
    """The stand-in clip classifier: flattened features -> hidden -> K logits."""

    def __init__(self, d_in: int, hidden: int, k: int, seed: int):
        if min(d_in, hidden, k) <= 0:
            raise ConfigError("model dimensions must be positive")
        rng = np.random.default_rng(seed)
        w1 = rng.standard_normal((d_in, hidden)) * np.sqrt(2.0 / d_in)
        w2 = rng.standard_normal((hidden, k)) * np.sqrt(2.0 / hidden)
        self.d_in, self.hidden, self.k = d_in, hidden, k
        self.pv = ParamVector(
            [
                ("w1", w1),
                ("b1", np.zeros(hidden)),
                ("w2", w2),
                ("b2", np.zeros(k)),
            ]
        )

    def forward(self, batch: Array) -> Tensor:
        return forward_mlp(self.pv, batch)

    def logits_np(self, batch: Array) -> Array:
        """Graph-free forward with the same arithmetic as forward()."""
        batch = np.asarray(batch, dtype=np.float64)
        h = batch @ self.pv["w1"].data + self.pv["b1"].data
        h = h * (h > 0.0)
        return h @ self.pv["w2"].data + self.pv["b2"].data

    def zero_grad(self) -> None:
        self.pv.zero_grad()

    def copy(self) -> "MLP":
        twin = MLP.__new__(MLP)
        twin.d_in, twin.hidden, twin.k = self.d_in, self.hidden, self.k
        twin.pv = self.pv.copy()
        return twin


# ---------------------------------------------------------------------------
# parameter checkpoints

CHECKPOINT_MAGIC = b"CLWB"
CHECKPOINT_VERSION = 1


def save_params(path, params) -> None:
    """Write named tensors: magic, version byte, then per tensor
    u16 name length, name, u8 rank, u32 extents, raw little-endian float64.
    Accepts a ParamVector or a plain name->array mapping."""
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(name, t.data) for name, t in params]
    chunks = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION)]
    for name, arr in named:
        nameb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nameb)))
        chunks.append(nameb)
        chunks.append(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            chunks.append(struct.pack("<I", extent))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_params(path) -> dict[str, Array]:
    """Read a checkpoint back into named float64 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 5:
        raise FormatError(
            f"checkpoint too short: expected at least 5 bytes, found {len(blob)}", 0
        )
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}", 0)
    if blob[4] != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {blob[4]}", 4)
    out: dict[str, Array] = {}
    pos = 5
    while pos < len(blob):
        if pos + 2 > len(blob):
            raise FormatError("truncated tensor name length", pos)
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + nlen + 1 > len(blob):
            raise FormatError("truncated tensor header", pos)
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rank = blob[pos]
        pos += 1
        if pos + 4 * rank > len(blob):
            raise FormatError(f"truncated extents for tensor {name!r}", pos)
        shape = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
        pos += 4 * rank
        count = 1
        for extent in shape:
            count *= extent
        need = count * 8
        if pos + need > len(blob):
            raise FormatError(
                f"truncated payload for tensor {name!r}: expected {need} bytes, "
                f"found {len(blob) - pos}",
                pos,
            )
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(
            shape
        ).astype(np.float64)
        pos += need
    return out
