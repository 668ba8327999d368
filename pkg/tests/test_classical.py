import numpy as np
import pytest

from hypermoco.classical import (
    arc_apply,
    arc_calibrate,
    arc_interp,
    cg_lsq,
    cgls,
    default_lambda,
    model_based_gt,
    rss,
    rss_recon,
)
from hypermoco.exceptions import CalibrationError, ParameterError, SolverError
from hypermoco.forward import MotionParams, ShotPattern, adjoint, forward, make_shot_pattern
from hypermoco.numerics import fft2c
from hypermoco.nufft import GriddedNUFFT, nudft, nudft_adjoint, nufft
from hypermoco.sim import corpus_pattern, generate_split, simulate_record, synth_coil_profiles
from hypermoco.ssim import ssim

from conftest import crandn, random_motion


def _full_pattern(H):
    return ShotPattern(H, 2, 1, 0, tuple((r, 1 + r % 2) for r in range(H)))


def _score(img, ref):
    ref = np.abs(ref)
    return ssim(np.abs(img) / ref.max(), ref / ref.max())


# -- RSS ----------------------------------------------------------------------


def test_rss_recon_single_flat_coil(rng):
    x = crandn(rng, 16, 16)
    assert np.max(np.abs(rss_recon(fft2c(x)[None]) - np.abs(x))) < 1e-10


def test_rss_recon_zero_and_conjugate_phase(rng):
    assert not np.any(rss_recon(np.zeros((3, 8, 8))))
    y = crandn(rng, 3, 16, 16)
    imgs = np.fft.ifft2(y)
    # conjugating every coil image leaves the magnitude combination unchanged
    conj_y = np.fft.fft2(np.conj(imgs))
    assert np.allclose(rss_recon(y), rss_recon(conj_y), atol=1e-12)


# -- ARC ----------------------------------------------------------------------


def test_arc_passes_fully_sampled_input_through(rng):
    y = crandn(rng, 4, 16, 16)
    assert np.array_equal(arc_interp(y, _full_pattern(16)), y)


def test_arc_keeps_acquired_rows(record):
    out = arc_interp(record.y, record.pattern)
    rows = record.pattern.acquired_rows
    assert np.array_equal(out[:, rows], record.y[:, rows])
    assert np.all(np.abs(out[:, 1]) > 0)


def test_arc_noiseless_quality(noiseless_cfg):
    # motion-free noiseless acquisitions of the first 20 test-split phantoms
    p = corpus_pattern(noiseless_cfg)
    scores = []
    for rec in generate_split(noiseless_cfg, "test", 20):
        clean = forward(rec.x_ref, rec.coils, p, MotionParams.zeros(6))
        scores.append(_score(rss_recon(arc_interp(clean, p)), rec.x_ref))
    assert np.mean(scores) >= 0.90


def test_arc_retains_motion_artifacts(noiseless_cfg):
    p = corpus_pattern(noiseless_cfg)
    rec = simulate_record(noiseless_cfg, p, 4321, onset=3)
    clean = forward(rec.x_ref, rec.coils, p, MotionParams.zeros(6))
    assert _score(rss_recon(arc_interp(rec.y, p)), rec.x_ref) < _score(rss_recon(arc_interp(clean, p)), rec.x_ref) - 0.02


def test_arc_linear_for_fixed_calibration(record, rng):
    p = record.pattern
    k = arc_calibrate(record.y, p)
    y2 = forward(crandn(rng, 64, 64), record.coils, p, MotionParams.zeros(6))
    lhs = arc_apply(record.y + y2, k)
    rhs = arc_apply(record.y, k) + arc_apply(y2, k)
    assert np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs) < 1e-10


def test_arc_without_acs_raises(rng):
    p = make_shot_pattern(64, 6, 3, 0)
    with pytest.raises(CalibrationError):
        arc_interp(crandn(rng, 4, 64, 64), p)


def test_arc_singular_without_ridge(pattern):
    with pytest.raises(SolverError, match="ridge"):
        arc_interp(np.zeros((4, 64, 64), complex), pattern, ridge=0.0)


def test_arc_rejects_even_kernel_width(record):
    with pytest.raises(ParameterError):
        arc_interp(record.y, record.pattern, kernel=(2, 2))


# -- CG least squares ---------------------------------------------------------


def test_cg_unitary_case(rng):
    p = _full_pattern(16)
    x = crandn(rng, 16, 16)
    y = fft2c(x)[None]
    res = cg_lsq(y, np.ones((1, 16, 16)), p, MotionParams.zeros(2), lam=0.0, iters=5, tol=1e-14)
    assert np.max(np.abs(res.x - x)) < 1e-8


def test_cg_residuals_non_increasing(record):
    res = cg_lsq(record.y, record.coils, record.pattern, record.m_true, lam=0.0, iters=60, tol=1e-14)
    r = np.array(res.residuals)
    assert np.all(np.diff(r) <= 1e-12 * r[0])


def _dense_operator(coils, pattern, m):
    H, W = coils.shape[-2:]
    cols = []
    for i in range(H * W):
        e = np.zeros(H * W, complex)
        e[i] = 1.0
        cols.append(forward(e.reshape(H, W), coils, pattern, m)[:, pattern.acquired_rows].ravel())
    return np.stack(cols, 1)


@pytest.mark.parametrize("lam", [0.0, 0.05])
def test_cg_matches_dense_solution(rng, lam):
    p = ShotPattern(8, 2, 2, 2, ((1, 1), (3, 2), (4, 2), (5, 1), (7, 1)))
    coils = synth_coil_profiles(rng, 8, 8, 3)
    m = MotionParams(np.array([[0.0, 0.0, 0.0], [3.0, -2.0, 6.0]]))
    A = _dense_operator(coils, p, m)
    y = np.zeros((3, 8, 8), complex)
    y[:, p.acquired_rows] = crandn(rng, 3, 5, 8)
    b = y[:, p.acquired_rows].ravel()
    x_ref = np.linalg.solve(A.conj().T @ A + lam * np.eye(64), A.conj().T @ b)
    res = cg_lsq(y, coils, p, m, lam=lam, iters=500, tol=1e-14)
    assert np.max(np.abs(res.x.ravel() - x_ref)) < 1e-6 * max(1.0, np.abs(x_ref).max())


def test_cg_norm_decreases_with_lambda(rng):
    p = ShotPattern(8, 2, 2, 2, ((1, 1), (3, 2), (4, 2), (5, 1), (7, 1)))
    coils = synth_coil_profiles(rng, 8, 8, 2)
    m = MotionParams(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]))
    y = np.zeros((2, 8, 8), complex)
    y[:, p.acquired_rows] = crandn(rng, 2, 5, 8)
    norms = [np.linalg.norm(cg_lsq(y, coils, p, m, lam=lam, iters=400, tol=1e-14).x) for lam in (1e-3, 1e-2, 1e-1, 1.0)]
    assert np.all(np.diff(norms) <= 1e-9)


def test_cgls_argument_checks():
    with pytest.raises(ParameterError):
        cgls(lambda v: v, lambda v: v, np.ones(3), -1.0, np.zeros(3), 3, 1e-6)
    with pytest.raises(ParameterError):
        cgls(lambda v: v, lambda v: v, np.ones(3), 0.0, np.zeros(3), 0, 1e-6)


def test_default_lambda_scale(record):
    aty = adjoint(record.y, record.coils, record.pattern, MotionParams.zeros(6))
    assert default_lambda(aty) == pytest.approx(1e-3 * np.abs(aty).max())


# -- Model-Based-GT -----------------------------------------------------------


def test_model_based_zero_motion_equals_cg(record):
    y = forward(record.x_ref, record.coils, record.pattern, MotionParams.zeros(6))
    zero = MotionParams.zeros(6)
    for op in ("image", "nufft"):
        img = model_based_gt(y, record.coils, record.pattern, zero, 1e-3, 40, 1e-8, operator=op)
        ref = cg_lsq(y, record.coils, record.pattern, zero, 1e-3, 40, 1e-8).x
        assert np.max(np.abs(img - rss(record.coils * ref))) < 1e-8


def test_model_based_beats_naive_on_noiseless_records(noiseless_cfg):
    p = corpus_pattern(noiseless_cfg)
    for seed in range(3):
        rec = simulate_record(noiseless_cfg, p, 700 + seed, onset=3)
        mb = model_based_gt(rec.y, rec.coils, p, rec.m_true, 0.0, 150)
        assert _score(mb, rec.x_ref) >= _score(rss_recon(rec.y), rec.x_ref)
        assert _score(mb, rec.x_ref) >= _score(rss_recon(arc_interp(rec.y, p)), rec.x_ref)


def test_model_based_translation_only_is_exact(noiseless_cfg):
    p = corpus_pattern(noiseless_cfg)
    rec = simulate_record(noiseless_cfg, p, 55, onset=3)
    m = rec.m_true.copy()
    m.triples[:, 2] = 0.0
    from hypermoco.sim import simulate_corrupted, make_phantom
    from hypermoco.numerics import RngStream

    src = make_phantom(RngStream(55, 1), 64, 64, noiseless_cfg["phantom"])
    rec = simulate_corrupted(src, rec.coils, p, m, RngStream(0), 0.0)
    img = model_based_gt(rec.y, rec.coils, p, rec.m_true, 0.0)
    assert _score(img, rec.x_ref) >= 0.999


# -- NUFFT --------------------------------------------------------------------


def test_ndft_on_grid_matches_fft(rng):
    img = crandn(rng, 16, 16)
    ky, kx = np.meshgrid(np.arange(16) - 8, np.arange(16) - 8, indexing="ij")
    pts = np.stack([kx.ravel(), ky.ravel()], 1).astype(float)
    assert np.max(np.abs(nudft(pts, img) - fft2c(img).ravel())) < 1e-10


def test_ndft_adjoint(rng):
    img = crandn(rng, 12, 10)
    pts = rng.uniform(-4.9, 4.9, size=(80, 2))
    v = crandn(rng, 80)
    lhs = np.vdot(nudft(pts, img), v)
    rhs = np.vdot(img, nudft_adjoint(pts, v, (12, 10)))
    assert abs(lhs - rhs) / (np.linalg.norm(img) * np.linalg.norm(v)) < 1e-10


def test_gridded_matches_direct(rng):
    img = crandn(rng, 16, 16)
    pts = rng.uniform(-8, 8, size=(200, 2))
    direct = nudft(pts, img)
    fast = nufft(pts, img)
    assert np.linalg.norm(fast - direct) / np.linalg.norm(direct) < 1e-3
    g = GriddedNUFFT(pts, (16, 16))
    v = crandn(rng, 200)
    assert abs(np.vdot(g.forward(img), v) - np.vdot(img, g.adjoint(v))) < 1e-10 * np.linalg.norm(img) * np.linalg.norm(v)


def test_ndft_rejects_out_of_range(rng):
    with pytest.raises(ParameterError):
        nudft(np.array([[9.0, 0.0]]), crandn(rng, 16, 16))
