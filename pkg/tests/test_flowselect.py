"""Dense-flow estimator and motion-driven frame selection tests.

The polynomial expansion is checked against a per-pixel weighted
least-squares fit done the slow, obvious way; the full estimator is checked
against synthetic translations where the true displacement is known.
"""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from clb.errors import BudgetError, ConfigError, DimensionError
from clb.flowselect import (
    FlowConfig,
    _expansion_kernels,
    available_backends,
    estimate_flow,
    idd_select,
    luminance,
    select_from_norms,
    transition_norms,
)
from clb.videodata import Clip


def _texture(h=64, w=64, seed=0, scale=3.0):
    """Smooth random texture with plenty of gradient structure."""
    rng = np.random.default_rng(seed)
    return gaussian_filter(rng.uniform(0.0, 255.0, (h, w)), scale) * 4.0


def _interior(field, margin=8):
    return field[margin:-margin, margin:-margin]


# ---------------------------------------------------------------------------
# polynomial expansion vs brute-force weighted least squares


def _lsq_expand_at(img, r, c, radius, sigma):
    """Quadratic fit around (r, c): returns (axx, axy, ayy, bx, by)."""
    o = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(o * o) / (2.0 * sigma * sigma))
    g /= g.sum()
    rows = []
    weights = []
    values = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            rows.append([1.0, dx, dy, dx * dx, dy * dy, dx * dy])
            weights.append(g[dy + radius] * g[dx + radius])
            values.append(img[r + dy, c + dx])
    B = np.asarray(rows)
    W = np.diag(weights)
    f = np.asarray(values)
    coef = np.linalg.solve(B.T @ W @ B, B.T @ W @ f)
    return coef[3], coef[5] * 0.5, coef[4], coef[1], coef[2]


@pytest.mark.parametrize("backend", sorted(available_backends()))
def test_poly_expand_matches_least_squares_fit(backend):
    impl = available_backends()[backend]
    radius, sigma = 4, 1.1
    img = np.ascontiguousarray(_texture(32, 32, seed=5))
    gk, xgk, xxgk, ginv = _expansion_kernels(radius, sigma)
    axx, axy, ayy, bx, by = impl.poly_expand(img, ginv, gk, xgk, xxgk)
    for r, c in [(8, 8), (15, 20), (24, 10)]:
        ref = _lsq_expand_at(img, r, c, radius, sigma)
        got = (axx[r, c], axy[r, c], ayy[r, c], bx[r, c], by[r, c])
        for name, a, b in zip(("axx", "axy", "ayy", "bx", "by"), got, ref):
            assert abs(a - b) < 1e-8, f"{backend} {name}: {a} vs {b}"


def test_backends_agree_bitwise_tolerance():
    impls = available_backends()
    if len(impls) < 2:
        pytest.skip("compiled backend not built")
    img = np.ascontiguousarray(_texture(48, 48, seed=2))
    gk, xgk, xxgk, ginv = _expansion_kernels(4, 1.1)
    outs = {
        name: impl.poly_expand(img, ginv, gk, xgk, xxgk)
        for name, impl in impls.items()
    }
    a, b = outs["numpy"], outs["cython"]
    for x, y in zip(a, b):
        assert np.abs(np.asarray(x) - np.asarray(y)).max() < 1e-10


# ---------------------------------------------------------------------------
# full estimator on known translations


def test_zero_motion_gives_near_zero_flow():
    img = _texture(seed=1)
    flow = estimate_flow(img, img)
    assert np.abs(flow.u).mean() < 0.05
    assert np.abs(flow.v).mean() < 0.05


@pytest.mark.parametrize(
    "shift,axis",
    [(2, 1), (-2, 1), (3, 1), (-3, 1), (2, 0), (-2, 0), (3, 0), (-3, 0)],
)
def test_translation_recovered_within_quarter_pixel(shift, axis):
    img = _texture(seed=7)
    moved = np.roll(img, shift, axis=axis)
    flow = estimate_flow(img, moved)
    u = float(_interior(flow.u).mean())
    v = float(_interior(flow.v).mean())
    want_u = shift if axis == 1 else 0.0
    want_v = shift if axis == 0 else 0.0
    assert abs(u - want_u) <= 0.25, f"u={u} want {want_u}"
    assert abs(v - want_v) <= 0.25, f"v={v} want {want_v}"


def test_flow_magnitude_grows_with_shift():
    img = _texture(seed=9)
    mags = []
    for s in (1, 2, 3):
        flow = estimate_flow(img, np.roll(img, s, axis=1))
        mags.append(float(np.hypot(_interior(flow.u), _interior(flow.v)).mean()))
    assert mags[0] < mags[1] < mags[2]


def test_flow_input_validation():
    img = _texture(32, 32)
    with pytest.raises(DimensionError):
        estimate_flow(img[0], img[0])
    with pytest.raises(DimensionError):
        estimate_flow(img, img[:16])
    with pytest.raises(DimensionError):
        estimate_flow(img[:8, :8], img[:8, :8])


def test_flow_config_validation():
    with pytest.raises(ConfigError):
        FlowConfig(levels=0)
    with pytest.raises(ConfigError):
        FlowConfig(radius=1)
    with pytest.raises(ConfigError):
        FlowConfig(iterations=0)
    with pytest.raises(ConfigError):
        FlowConfig(sigma=0.0)


# ---------------------------------------------------------------------------
# luminance


def test_luminance_weights():
    frames = np.zeros((1, 2, 2, 3), dtype=np.uint8)
    frames[0, 0, 0] = (100, 0, 0)
    frames[0, 0, 1] = (0, 100, 0)
    frames[0, 1, 0] = (0, 0, 100)
    lum = luminance(frames)
    assert abs(lum[0, 0, 0] - 29.9) < 1e-9
    assert abs(lum[0, 0, 1] - 58.7) < 1e-9
    assert abs(lum[0, 1, 0] - 11.4) < 1e-9


def test_luminance_single_channel_passthrough():
    frames = np.arange(16, dtype=np.uint8).reshape(1, 4, 4, 1)
    assert np.array_equal(luminance(frames), frames[..., 0].astype(np.float64))


def test_luminance_rejects_two_channels():
    with pytest.raises(ConfigError):
        luminance(np.zeros((1, 4, 4, 2), dtype=np.uint8))


# ---------------------------------------------------------------------------
# transition norms on clips


def _clip_from_lum(lums):
    frames = np.clip(np.stack(lums), 0, 255).astype(np.uint8)[..., None]
    return Clip(frames=frames, label=0, source_id="t")


def test_static_clip_norms_are_tiny():
    img = _texture(64, 64, seed=3) % 255.0
    clip = _clip_from_lum([img] * 5)
    norms = transition_norms(clip)
    assert norms.shape == (4,)
    assert norms.max() < 0.05 * np.sqrt(64 * 64)


def test_uniform_translation_norm_near_sqrt_hw():
    img = _texture(64, 64, seed=4) % 255.0
    clip = _clip_from_lum([np.roll(img, t, axis=1) for t in range(3)])
    norms = transition_norms(clip)
    want = np.sqrt(64 * 64)  # |(1,0)| at every pixel
    assert abs(norms[0] - want) / want < 0.10
    assert abs(norms[1] - want) / want < 0.10


def test_single_moving_transition_dominates():
    img = _texture(64, 64, seed=6) % 255.0
    lums = [img, img, np.roll(img, 2, axis=0), np.roll(img, 2, axis=0)]
    norms = transition_norms(_clip_from_lum(lums))
    assert int(np.argmax(norms)) == 1
    assert norms[1] > 10 * max(norms[0], norms[2])


# ---------------------------------------------------------------------------
# selection


def test_select_prefers_frames_next_to_big_norms():
    norms = np.array([0.0, 0.0, 9.0, 1.0, 0.0])
    # scores: f0=0 f1=0 f2=9 f3=9 f4=1 f5=0
    assert select_from_norms(norms, 3, 6) == [2, 3, 4]


def test_select_all_ties_take_earliest_frames():
    norms = np.ones(7)
    assert select_from_norms(norms, 3, 8) == [0, 1, 2]


def test_select_output_sorted_even_when_scores_are_not():
    norms = np.array([5.0, 0.0, 0.0, 7.0])
    # scores: f0=5 f1=5 f2=0 f3=7 f4=7
    assert select_from_norms(norms, 3, 5) == [0, 3, 4]


def test_select_norm_count_validation():
    with pytest.raises(DimensionError):
        select_from_norms(np.ones(5), 2, 5)


def test_idd_identity_when_budget_is_clip_length():
    clip = _clip_from_lum([_texture(32, 32, seed=i) % 255.0 for i in range(4)])
    assert idd_select(clip, 4) == [0, 1, 2, 3]


def test_idd_budget_validation():
    clip = _clip_from_lum([_texture(32, 32, seed=i) % 255.0 for i in range(4)])
    with pytest.raises(BudgetError):
        idd_select(clip, 1)
    with pytest.raises(BudgetError):
        idd_select(clip, 5)


def test_idd_picks_moving_half():
    base = _texture(64, 64, seed=8) % 255.0
    # content static through frame 5; motion begins with transition 5 -> 6,
    # so frame 5 is the first frame touching a moving transition
    lums = [base] * 6 + [np.roll(base, 2, axis=1), np.roll(base, 4, axis=1)]
    clip = _clip_from_lum(lums)
    picked = idd_select(clip, 3)
    assert picked == sorted(picked)
    assert picked == [5, 6, 7]
