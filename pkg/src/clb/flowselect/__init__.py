"""Dense optical flow (coarse-to-fine polynomial-expansion matching) and the
motion-driven frame selector built on it.

The two per-pixel hot loops (quadratic neighborhood expansion and the
displacement normal-equation update) exist twice: a compiled Cython kernel
module and a numpy/scipy fallback. The compiled backend is used when built;
set CLB_FLOW_BACKEND=numpy or =cython to force one.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from ..errors import BudgetError, ConfigError, DimensionError, NumericError
from ..videodata import Clip

Array = np.ndarray

_ENV_BACKEND = "CLB_FLOW_BACKEND"


def _load_backend():
    want = os.environ.get(_ENV_BACKEND, "").strip().lower()
    if want not in ("", "cython", "numpy"):
        raise ConfigError(f"{_ENV_BACKEND} must be 'cython' or 'numpy', got {want!r}")
    if want != "numpy":
        try:
            from . import _kernels  # compiled extension, absent on pure installs

            return _kernels, "cython"
        except ImportError:
            if want == "cython":
                raise ConfigError(
                    "compiled flow backend requested but the extension is not built"
                ) from None
    from . import _numpy

    return _numpy, "numpy"


_impl, BACKEND = _load_backend()


def available_backends() -> dict[str, object]:
    """All importable kernel backends, for the comparison benchmark."""
    from . import _numpy

    out: dict[str, object] = {"numpy": _numpy}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 3
    radius: int = 4
    iterations: int = 3
    sigma: float = 1.1

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("flow pyramid needs at least 1 level")
        if self.radius < 2:
            raise ConfigError("expansion window radius must be at least 2")
        if self.iterations < 1:
            raise ConfigError("flow needs at least 1 iteration per level")
        if not self.sigma > 0:
            raise ConfigError("flow sigma must be positive")


@dataclass
class FlowField:
    """Per-pixel motion (u along columns, v along rows), pixels per frame."""

    u: Array
    v: Array


# ---------------------------------------------------------------------------
# precomputed pieces shared by both backends

_kern_cache: dict[tuple[int, float], tuple[Array, Array, Array, Array]] = {}


def _expansion_kernels(radius: int, sigma: float):
    """1-D Gaussian moment kernels and the inverse Gram matrix of the basis
    (1, x, y, x^2, y^2, xy) under the separable applicability weights."""
    key = (radius, float(sigma))
    hit = _kern_cache.get(key)
    if hit is not None:
        return hit
    o = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(o * o) / (2.0 * sigma * sigma))
    g /= g.sum()
    gk = g
    xgk = o * g
    xxgk = o * o * g
    xx, yy = np.meshgrid(o, o)  # xx varies along columns, yy along rows
    wgt = np.outer(g, g)
    basis = np.stack(
        [np.ones_like(xx), xx, yy, xx * xx, yy * yy, xx * yy], axis=-1
    ).reshape(-1, 6)
    gram = basis.T @ (wgt.reshape(-1, 1) * basis)
    ginv = np.linalg.inv(gram)
    out = (gk, xgk, xxgk, ginv)
    _kern_cache[key] = out
    return out


def _gauss_kernel(sigma: float) -> Array:
    r = max(1, int(round(2.0 * sigma)))
    o = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(o * o) / (2.0 * sigma * sigma))
    return k / k.sum()


def _smooth(arr: Array, kernel: Array) -> Array:
    return correlate1d(
        correlate1d(arr, kernel, axis=0, mode="reflect"), kernel, axis=1, mode="reflect"
    )


def _downsample(arr: Array) -> Array:
    # contiguity matters: the compiled kernels take C-contiguous views
    return np.ascontiguousarray(_smooth(arr, _gauss_kernel(1.0))[::2, ::2])


def _resize_bilinear(arr: Array, shape: tuple[int, int]) -> Array:
    h, w = arr.shape
    fh, fw = shape
    if (h, w) == (fh, fw):
        return arr.copy()
    rr = np.linspace(0.0, h - 1.0, fh)
    cc = np.linspace(0.0, w - 1.0, fw)
    r0 = np.floor(rr).astype(np.int64)
    c0 = np.floor(cc).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rr - r0)[:, None]
    fc = (cc - c0)[None, :]
    return (
        arr[np.ix_(r0, c0)] * (1 - fr) * (1 - fc)
        + arr[np.ix_(r0, c1)] * (1 - fr) * fc
        + arr[np.ix_(r1, c0)] * fr * (1 - fc)
        + arr[np.ix_(r1, c1)] * fr * fc
    )


# displacement-field smoothing width; fixed relative to the expansion window,
# chosen against the synthetic translation oracle
_SMOOTH_SIGMA_FACTOR = 1.0


def estimate_flow(frame_a: Array, frame_b: Array, cfg: FlowConfig | None = None) -> FlowField:
    """Dense displacement field from frame_a to frame_b (grayscale float)."""
    cfg = cfg or FlowConfig()
    a = np.ascontiguousarray(frame_a, dtype=np.float64)
    b = np.ascontiguousarray(frame_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("flow frames must be 2-D grayscale")
    if a.shape != b.shape:
        raise DimensionError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < 16:
        raise DimensionError("flow needs frames of at least 16x16 pixels")

    gk, xgk, xxgk, ginv = _expansion_kernels(cfg.radius, cfg.sigma)
    smooth_k = _gauss_kernel(_SMOOTH_SIGMA_FACTOR * cfg.radius)

    pyr: list[tuple[Array, Array]] = [(a, b)]
    while len(pyr) < cfg.levels:
        pa, pb = pyr[-1]
        if min(pa.shape) // 2 < 2 * cfg.radius + 1:
            break
        pyr.append((_downsample(pa), _downsample(pb)))

    u = np.zeros_like(pyr[-1][0])
    v = np.zeros_like(pyr[-1][0])
    for la, lb in reversed(pyr):
        if u.shape != la.shape:
            u = _resize_bilinear(u, la.shape) * 2.0
            v = _resize_bilinear(v, la.shape) * 2.0
        e1 = _impl.poly_expand(la, ginv, gk, xgk, xxgk)
        e2 = _impl.poly_expand(lb, ginv, gk, xgk, xxgk)
        for _ in range(cfg.iterations):
            g11, g12, g22, h1, h2 = _impl.update_matrices(*e1, *e2, u, v)
            g11 = _smooth(g11, smooth_k)
            g12 = _smooth(g12, smooth_k)
            g22 = _smooth(g22, smooth_k)
            h1 = _smooth(h1, smooth_k)
            h2 = _smooth(h2, smooth_k)
            det = g11 * g22 - g12 * g12
            ok = det > 1e-12
            safe = np.where(ok, det, 1.0)
            u = np.where(ok, (g22 * h1 - g12 * h2) / safe, 0.0)
            v = np.where(ok, (g11 * h2 - g12 * h1) / safe, 0.0)
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise NumericError("non-finite flow field")
    return FlowField(u=u, v=v)


# ---------------------------------------------------------------------------
# clip-level scoring and selection

_LUMA = np.array([0.299, 0.587, 0.114])


def luminance(frames: Array) -> Array:
    """uint8 (p,H,W,C) frames to float64 (p,H,W) luminance."""
    if frames.ndim != 4:
        raise DimensionError("expected rank-4 frame stack")
    c = frames.shape[3]
    x = frames.astype(np.float64)
    if c == 1:
        return x[..., 0]
    if c == 3:
        return x @ _LUMA
    raise ConfigError(f"luminance needs 1 or 3 channels, got {c}")


def transition_norms(clip: Clip, cfg: FlowConfig | None = None) -> Array:
    """L2 norm of the flow field for each of the p-1 frame transitions."""
    cfg = cfg or FlowConfig()
    lum = luminance(clip.frames)
    norms = np.empty(clip.p - 1, dtype=np.float64)
    for i in range(clip.p - 1):
        f = estimate_flow(lum[i], lum[i + 1], cfg)
        norms[i] = float(np.sqrt((f.u * f.u + f.v * f.v).sum()))
    return norms


def select_from_norms(norms: Array, k: int, p: int) -> list[int]:
    """Top-k frame indices by score(j) = max(norm_{j-1}, norm_j), missing
    neighbors scoring 0; ties break toward earlier frames; ascending output."""
    norms = np.asarray(norms, dtype=np.float64)
    if norms.shape != (p - 1,):
        raise DimensionError(f"expected {p - 1} transition norms, got {norms.shape}")
    left = np.concatenate([[0.0], norms])
    right = np.concatenate([norms, [0.0]])
    scores = np.maximum(left, right)
    top = np.argsort(-scores, kind="stable")[:k]
    return sorted(int(i) for i in top)


def idd_select(clip: Clip, k: int, cfg: FlowConfig | None = None) -> list[int]:
    """Pick the k most motion-heavy frames of the clip, original order kept."""
    if k < 2 or k > clip.p:
        raise BudgetError(f"frame budget {k} outside [2, {clip.p}]")
    if k == clip.p:
        return list(range(clip.p))
    return select_from_norms(transition_norms(clip, cfg), k, clip.p)
