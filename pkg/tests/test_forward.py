import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hypermoco.exceptions import ConfigurationError, DimensionError, ParameterError
from hypermoco.forward import (
    MotionParams,
    ShotPattern,
    adjoint,
    apply_rigid_motion,
    apply_rigid_motion_adjoint,
    dc_grad_m,
    dc_loss,
    forward,
    make_shot_pattern,
    motion_free_operator,
    shot_losses,
    spectral_energy,
)
from hypermoco.numerics import fft2c, ifft2c
from hypermoco.nufft import nudft
from hypermoco.sim import make_phantom, synth_coil_profiles

from conftest import crandn, random_motion

SP = 260.0 / 64


@pytest.fixture(scope="module")
def coils():
    return synth_coil_profiles(np.random.default_rng(3), 64, 64, 4)


# -- shot pattern ------------------------------------------------------------


def test_dc_row_belongs_to_shot_two(pattern):
    assert pattern.shot_of_row[32] == 2
    assert pattern.dc_shot == 2


def test_shot_masks_partition_acquired_rows(pattern):
    masks = pattern.shot_masks()
    assert masks.sum(axis=0).max() == 1
    assert np.array_equal(masks.any(axis=0), pattern.row_mask())
    assert all(masks[s].any() for s in range(pattern.S))
    rows = pattern.acquired_rows
    assert len(rows) == len(set(rows.tolist())) == 26


def test_acquired_rows_cover_grid_and_acs(pattern):
    rows = set(pattern.acquired_rows.tolist())
    assert set(range(28, 36)) <= rows
    assert {r for r in range(64) if (r - 32) % 3 == 0} <= rows


def test_periphery_shots_carry_little_energy(pattern):
    x = make_phantom(np.random.default_rng(0), 64, 64, "shepp-logan")
    k = fft2c(x)
    energy = [np.sum(np.abs(k[pattern.shot_rows(s)]) ** 2) for s in range(1, 7)]
    assert energy[4] + energy[5] < 0.05 * energy[1]
    assert int(np.argmax(energy)) == 1


def test_pattern_json_round_trip(pattern):
    obj = json.loads(json.dumps(pattern.to_json()))
    assert ShotPattern.from_json(obj) == pattern
    assert set(obj) == {"H", "S", "R", "acs", "rows"}


@pytest.mark.parametrize("H,S,R,acs", [(64, 1, 3, 8), (4, 6, 3, 0), (64, 6, 0, 8)])
def test_pattern_rejects_impossible_configs(H, S, R, acs):
    with pytest.raises(ConfigurationError):
        make_shot_pattern(H, S, R, acs)


# -- rigid motion ------------------------------------------------------------


def test_zero_motion_is_bit_identity(rng):
    x = crandn(rng, 64, 64)
    assert np.array_equal(apply_rigid_motion(x, (0.0, 0.0, 0.0), SP), x)


def test_integer_translation_moves_impulse():
    img = np.zeros((16, 16), complex)
    img[8, 8] = 1.0
    out = apply_rigid_motion(img, (2 * SP, 0.0, 0.0), SP)
    expected = np.zeros_like(img)
    expected[8, 10] = 1.0
    assert np.max(np.abs(out - expected)) < 1e-12
    out = apply_rigid_motion(img, (0.0, -3 * SP, 0.0), SP)
    expected = np.zeros_like(img)
    expected[5, 8] = 1.0
    assert np.max(np.abs(out - expected)) < 1e-12


def test_quarter_turn_is_exact_on_grid():
    a = np.zeros((16, 16))
    a[3:6, 8:13] = 1.0
    a[9, 4] = 1.0
    out = apply_rigid_motion(a, (0.0, 0.0, 90.0), SP)
    cy = cx = 8
    expected = np.zeros_like(a)
    for r in range(16):
        for c in range(16):
            sr, sc = cy - (c - cx), r - cy + cx
            if 0 <= sr < 16 and 0 <= sc < 16:
                expected[r, c] = a[sr, sc]
    assert np.array_equal(np.abs(out) > 0.5, expected > 0.5)
    assert np.max(np.abs(out - expected)) < 1e-12


def test_rigid_motion_adjoint(rng):
    x, z = crandn(rng, 32, 32), crandn(rng, 32, 32)
    t = (1.3, -2.1, 7.5)
    lhs = np.vdot(apply_rigid_motion(x, t, SP), z)
    rhs = np.vdot(x, apply_rigid_motion_adjoint(z, t, SP))
    assert abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(z)) < 1e-12


# -- forward and adjoint -----------------------------------------------------


def test_zero_motion_reduces_to_motion_free_operator(rng, pattern, coils):
    x = crandn(rng, 64, 64)
    diff = forward(x, coils, pattern, MotionParams.zeros(6)) - motion_free_operator(x, coils, pattern)
    assert np.max(np.abs(diff)) < 1e-12


def test_forward_of_zero_is_zero(pattern, coils, rng):
    assert not np.any(forward(np.zeros((64, 64)), coils, pattern, random_motion(rng)))
    assert not np.any(adjoint(np.zeros((4, 64, 64)), coils, pattern, random_motion(rng)))


def test_forward_translation_matches_ndft_shift_theorem(rng):
    H = W = 16
    full = ShotPattern(H, 2, 1, 0, tuple((r, 1 if r % 2 else 2) for r in range(H)))
    x = crandn(rng, H, W)
    dh, dv = 1.7 * SP, -0.6 * SP
    m = MotionParams(np.array([[dh, dv, 0.0], [dh, dv, 0.0]]))
    y = forward(x, np.ones((1, H, W)), full, m)
    ky, kx = np.meshgrid(np.arange(H) - H // 2, np.arange(W) - W // 2, indexing="ij")
    pts = np.stack([kx.ravel(), ky.ravel()], 1).astype(float)
    ramp = np.exp(-2j * np.pi * (kx * (dh / SP) / W + ky * (dv / SP) / H)).ravel()
    ref = nudft(pts, x) * ramp
    assert np.max(np.abs(y[0].ravel() - ref)) < 1e-10


def test_full_sampling_adjoint_is_ifft(rng):
    H = W = 16
    full = ShotPattern(H, 2, 1, 0, tuple((r, 1 + r % 2) for r in range(H)))
    y = crandn(rng, 1, H, W)
    x = adjoint(y, np.ones((1, H, W)), full, MotionParams.zeros(2))
    assert np.max(np.abs(x - ifft2c(y[0]))) < 1e-12


def test_forward_zeroes_unacquired_rows(rng, pattern, coils):
    y = forward(crandn(rng, 64, 64), coils, pattern, random_motion(rng))
    assert not np.any(y[:, ~pattern.row_mask(), :])


def test_dot_product_test(rng, pattern, coils):
    for _ in range(5):
        x, y, m = crandn(rng, 64, 64), crandn(rng, 4, 64, 64), random_motion(rng)
        ax = forward(x, coils, pattern, m)
        lhs = np.vdot(ax, y)
        rhs = np.vdot(x, adjoint(y, coils, pattern, m))
        assert abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y)) < 1e-10


@given(
    st.integers(0, 2**31 - 1),
    st.complex_numbers(max_magnitude=5, allow_nan=False),
    st.complex_numbers(max_magnitude=5, allow_nan=False),
)
def test_forward_linearity_property(seed, a, b):
    gen = np.random.default_rng(seed)
    pattern = make_shot_pattern(32, 6, 3, 4)
    coils = synth_coil_profiles(gen, 32, 32, 2)
    x1, x2, m = crandn(gen, 32, 32), crandn(gen, 32, 32), random_motion(gen)
    lhs = forward(a * x1 + b * x2, coils, pattern, m)
    rhs = a * forward(x1, coils, pattern, m) + b * forward(x2, coils, pattern, m)
    scale = np.linalg.norm(rhs) + np.linalg.norm(lhs) + 1e-300
    assert np.linalg.norm(lhs - rhs) / scale < 1e-10


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_shot_locality_property(seed, shot):
    gen = np.random.default_rng(seed)
    pattern = make_shot_pattern(32, 6, 3, 4)
    coils = synth_coil_profiles(gen, 32, 32, 2)
    x, m = crandn(gen, 32, 32), random_motion(gen)
    m2 = m.copy()
    m2.triples[shot - 1] += gen.uniform(-2, 2, 3)
    d = np.abs(forward(x, coils, pattern, m) - forward(x, coils, pattern, m2)).max(axis=(0, 2))
    others = np.ones(32, bool)
    others[pattern.shot_rows(shot)] = False
    assert not np.any(d[others])


def test_forward_rejects_shape_mismatch(pattern, coils):
    with pytest.raises(DimensionError):
        forward(np.zeros((32, 32)), coils, pattern, MotionParams.zeros(6))
    with pytest.raises(DimensionError):
        forward(np.zeros((64, 64)), coils, pattern, MotionParams.zeros(5))


# -- data consistency --------------------------------------------------------


def test_dc_loss_examples(rng, pattern, coils):
    x, m = crandn(rng, 64, 64), random_motion(rng)
    y = forward(x, coils, pattern, m)
    e = spectral_energy(y, pattern)
    assert dc_loss(y, x, coils, pattern, m) <= 1e-18 * e
    assert dc_loss(y, np.zeros((64, 64)), coils, pattern, m) == pytest.approx(e, rel=1e-12)
    assert shot_losses(y, 0 * x, coils, pattern, m).sum() == pytest.approx(e, rel=1e-12)


def test_dc_loss_noise_floor(pattern, coils):
    ratios = []
    for seed in range(50):
        gen = np.random.default_rng(seed)
        x, m = crandn(gen, 64, 64), random_motion(gen)
        clean = forward(x, coils, pattern, m)
        rows = pattern.acquired_rows
        n = rows.size * 64
        y = clean.copy()
        for c in range(4):
            sig = np.sqrt(0.05 * np.sum(np.abs(clean[c, rows]) ** 2) / (2 * n))
            y[c, rows] += sig * crandn(gen, rows.size, 64)
        ratios.append(dc_loss(y, x, coils, pattern, m) / spectral_energy(y, pattern))
    assert abs(np.mean(ratios) - 0.05 / 1.05) < 0.2 * 0.05 / 1.05


def test_dc_loss_global_phase_invariance(rng, pattern, coils):
    x, m = crandn(rng, 64, 64), random_motion(rng)
    y = crandn(rng, 4, 64, 64)
    ph = np.exp(1j * 0.77)
    a = dc_loss(y, x, coils, pattern, m)
    b = dc_loss(y * ph, x * ph, coils, pattern, m)
    c = dc_loss(y * ph, x, coils * ph, pattern, m)
    assert b == pytest.approx(a, rel=1e-12)
    assert c == pytest.approx(a, rel=1e-12)


def test_dc_grad_vanishes_at_truth(record):
    p = record.pattern
    g = dc_grad_m(record.y, record.x_ref, record.coils, p, record.m_ref)
    # curvature scale: loss after a 1 mm / 1 degree nudge of every shot
    bumped = MotionParams(record.m_ref.triples + 1.0, record.m_ref.pixel_spacing)
    curv = dc_loss(record.y, record.x_ref, record.coils, p, bumped)
    assert np.linalg.norm(g) < 1e-3 * curv


def test_dc_grad_stencils_agree(rng, pattern, coils):
    x, m = crandn(rng, 64, 64), random_motion(rng)
    y = forward(x, coils, pattern, random_motion(rng))
    step = (0.01, 0.01)
    gc = dc_grad_m(y, x, coils, pattern, m, step)
    gf = dc_grad_m(y, x, coils, pattern, m, step, stencil="forward")
    gf2 = dc_grad_m(y, x, coils, pattern, m, (0.005, 0.005), stencil="forward")
    # forward differences carry an O(step) error: halving the step roughly
    # halves it (bilinear cell boundaries make single entries less regular)
    e1, e2 = np.abs(gf - gc), np.abs(gf2 - gc)
    assert np.all(e1 <= 1e-2 * np.abs(gc).max())
    big = e1 > 1e-6 * np.abs(gc).max()
    ratio = e2[big] / e1[big]
    assert abs(np.median(ratio) - 0.5) < 0.05
    assert ratio.max() < 0.8


def test_dc_grad_threads_match_sequential(rng, pattern, coils):
    x, m = crandn(rng, 64, 64), random_motion(rng)
    y = crandn(rng, 4, 64, 64)
    a = dc_grad_m(y, x, coils, pattern, m)
    b = dc_grad_m(y, x, coils, pattern, m, workers=4)
    assert np.array_equal(a, b)


def test_low_energy_shot_is_less_sensitive(record):
    p, y, x = record.pattern, record.y, record.x_ref
    base = dc_loss(y, x, record.coils, p, record.m_ref)
    out = {}
    for shot in (2, 5):
        m = record.m_ref.copy()
        m.triples[shot - 1] += (0.5, 0.5, 0.5)
        out[shot] = dc_loss(y, x, record.coils, p, m) - base
    assert out[5] < out[2]


def test_dc_grad_rejects_bad_step(rng, pattern, coils):
    with pytest.raises(ParameterError):
        dc_grad_m(np.zeros((4, 64, 64)), np.zeros((64, 64)), coils, pattern, MotionParams.zeros(6), (0.0, 0.01))
