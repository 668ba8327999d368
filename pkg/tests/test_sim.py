import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from hypermoco.exceptions import DimensionError, ParameterError
from hypermoco.forward import MotionParams, apply_rigid_motion, forward, spectral_energy
from hypermoco.numerics import RngStream, fft2c
from hypermoco.sim import (
    PHANTOM_MARGIN,
    Corpus,
    corpus_pattern,
    make_phantom,
    mix_two_acquisitions,
    record_seed,
    resolve_corpus_config,
    sample_motion,
    simulate_corrupted,
    simulate_record,
    synth_coil_profiles,
    write_corpus,
)


def test_shepp_logan_construction():
    x = make_phantom(RngStream(0), 64, 64, "shepp-logan")
    mag = np.abs(x)
    assert mag.max() == pytest.approx(1.0)
    assert not np.any(mag[:PHANTOM_MARGIN]) and not np.any(mag[-PHANTOM_MARGIN:])
    assert not np.any(mag[:, :PHANTOM_MARGIN]) and not np.any(mag[:, -PHANTOM_MARGIN:])


def test_phantom_determinism():
    a = make_phantom(RngStream(5, 1), 64, 64, "random-ellipses")
    b = make_phantom(RngStream(5, 1), 64, 64, "random-ellipses")
    assert np.array_equal(a, b)


def test_random_ellipses_bounded_over_seeds():
    for seed in range(100):
        mag = np.abs(make_phantom(RngStream(seed, 1), 64, 64, "random-ellipses"))
        assert mag.min() >= 0.0 and mag.max() <= 1.0 + 1e-12


def test_phantom_rejects_bad_arguments():
    with pytest.raises(ParameterError):
        make_phantom(RngStream(0), 64, 64, "brain")
    with pytest.raises(ParameterError):
        make_phantom(RngStream(0), 16, 64)


def test_single_coil_is_unit_magnitude():
    c = synth_coil_profiles(RngStream(1), 32, 32, 1)
    assert np.allclose(np.abs(c), 1.0, atol=1e-12)


def test_coil_rss_is_one():
    c = synth_coil_profiles(RngStream(2), 64, 64, 4)
    assert np.max(np.abs(np.sqrt(np.sum(np.abs(c) ** 2, 0)) - 1)) < 1e-6


def test_adjacent_coils_correlate_more_than_opposite():
    c = synth_coil_profiles(RngStream(3), 64, 64, 4)
    mags = np.abs(c).reshape(4, -1)
    mags = mags - mags.mean(1, keepdims=True)
    corr = np.corrcoef(mags)
    adj = [corr[i, (i + 1) % 4] for i in range(4)]
    opp = [corr[i, (i + 2) % 4] for i in range(4)]
    assert min(adj) > max(opp)
    raw = np.abs(c).reshape(4, -1)
    assert np.dot(raw[0], raw[1]) > 0


def test_motion_bounds_and_first_shot():
    for seed in range(200):
        m = sample_motion(RngStream(seed, 3), 6)
        assert np.all(np.abs(m.triples[:, :2]) <= 10) and np.all(np.abs(m.triples[:, 2]) <= 10)
        assert not np.any(m.triples[0])


def test_onset_uniform_and_params_uniform():
    gen = np.random.default_rng(0)
    draws = [sample_motion(gen, 6) for _ in range(10_000)]
    onsets = [int(np.argmax(np.any(d.triples != 0, axis=1))) + 1 for d in draws]
    counts = np.bincount(onsets, minlength=7)[2:]
    assert stats.chisquare(counts).pvalue > 0.001
    expected = 2000
    assert np.all(np.abs(counts - expected) < 3 * np.sqrt(expected * 0.8))
    last = np.array([d.triples[-1] for d in draws])
    assert stats.kstest(last[:, 0], stats.uniform(-10, 20).cdf).pvalue > 0.01
    assert stats.kstest(last[:, 2], stats.uniform(-10, 20).cdf).pvalue > 0.01


def test_shared_post_motion_triple():
    m = sample_motion(RngStream(9, 3), 6, onset=3)
    assert not np.any(m.triples[:2])
    assert np.all(m.triples[2:] == m.triples[2])
    per = sample_motion(RngStream(9, 3), 6, onset=3, per_shot=True)
    assert not np.all(per.triples[3:] == per.triples[2])


def test_sample_motion_rejects_single_shot():
    with pytest.raises(ParameterError):
        sample_motion(RngStream(0), 1)


def test_motion_free_noiseless_record(pattern):
    x = make_phantom(RngStream(0), 64, 64)
    c = synth_coil_profiles(RngStream(1), 64, 64, 4)
    rec = simulate_corrupted(x, c, pattern, MotionParams.zeros(6), RngStream(2), 0.0)
    assert np.array_equal(rec.y, forward(x, c, pattern, MotionParams.zeros(6)))
    assert np.array_equal(rec.x_ref, x)


def test_noise_calibration_single_record(pattern):
    x = make_phantom(RngStream(0), 64, 64)
    c = synth_coil_profiles(RngStream(1), 64, 64, 4)
    m = sample_motion(RngStream(2), 6)
    clean = simulate_corrupted(x, c, pattern, m, RngStream(3), 0.0)
    noisy = simulate_corrupted(x, c, pattern, m, RngStream(3), 0.05)
    rows = pattern.acquired_rows
    for coil in range(4):
        e_sig = np.sum(np.abs(clean.y[coil, rows]) ** 2)
        e_noise = np.sum(np.abs(noisy.y[coil, rows] - clean.y[coil, rows]) ** 2)
        assert 0.04 < e_noise / e_sig < 0.06
    assert not np.any(noisy.y[:, ~pattern.row_mask()])


def test_dc_shot_motion_moves_reference(noiseless_cfg, pattern):
    rec = simulate_record(noiseless_cfg, pattern, 77, onset=2)
    assert rec.s_star == 2
    x_src = make_phantom(RngStream(77, 1), 64, 64, noiseless_cfg["phantom"])
    moved = apply_rigid_motion(x_src, rec.m_true.triples[1], rec.m_true.pixel_spacing)
    assert np.array_equal(rec.x_ref, moved)
    assert not np.allclose(rec.x_ref, x_src)


def test_reference_rows_match_owning_pose(record):
    # noiseless conservation: each shot's rows equal that pose's full FFT rows (to rounding)
    p = record.pattern
    src = make_phantom(RngStream(record.seed, 1), 64, 64, "random-ellipses")
    for s in range(1, p.S + 1):
        pose = apply_rigid_motion(src, record.m_true.triples[s - 1], record.m_true.pixel_spacing)
        k = fft2c(record.coils * pose)
        rows = p.shot_rows(s)
        np.testing.assert_allclose(record.y[:, rows], k[:, rows], rtol=0, atol=1e-12 * np.abs(k).max())


def test_mix_identical_inputs(pattern, rng):
    y = rng.standard_normal((4, 64, 64)) + 0j
    out = mix_two_acquisitions(y, y, pattern, 3)
    assert np.array_equal(out, y * pattern.row_mask()[None, :, None])


def test_mix_onset_two(pattern, rng):
    y1 = np.ones((2, 64, 64), complex)
    y2 = 2 * y1
    out = mix_two_acquisitions(y1, y2, pattern, 2)
    shot1 = pattern.shot_rows(1)
    others = np.setdiff1d(pattern.acquired_rows, shot1)
    assert np.all(out[:, shot1] == 1) and np.all(out[:, others] == 2)


def test_mix_matches_pipeline(pattern):
    x = make_phantom(RngStream(4), 64, 64)
    c = synth_coil_profiles(RngStream(5), 64, 64, 4)
    m = sample_motion(RngStream(6), 6, onset=4)
    zero = MotionParams.zeros(6)
    post = MotionParams(np.tile(m.triples[-1], (6, 1)))
    y1 = forward(x, c, pattern, zero)
    y2 = forward(x, c, pattern, post)
    rec = simulate_corrupted(x, c, pattern, m, RngStream(7), 0.0)
    assert np.array_equal(mix_two_acquisitions(y1, y2, pattern, 4), rec.y)


def test_mix_errors(pattern):
    with pytest.raises(DimensionError):
        mix_two_acquisitions(np.zeros((4, 64, 64)), np.zeros((2, 64, 64)), pattern, 3)
    with pytest.raises(ParameterError):
        mix_two_acquisitions(np.zeros((4, 64, 64)), np.zeros((4, 64, 64)), pattern, 1)


@given(st.integers(0, 2**40))
def test_record_reproducibility_property(seed):
    cfg = resolve_corpus_config({"H": 32, "W": 32, "noise_frac": 0.05})
    p = corpus_pattern(cfg)
    a = simulate_record(cfg, p, seed)
    b = simulate_record(cfg, p, seed)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.x_ref, b.x_ref)
    assert np.array_equal(a.m_true.triples, b.m_true.triples)
    assert not np.any(a.m_true.triples[: a.s_star - 1])


def test_split_seeds_disjoint():
    seeds = {split: {record_seed(0, split, i) for i in range(600)} for split in ("train", "val", "test")}
    assert not (seeds["train"] & seeds["val"]) and not (seeds["val"] & seeds["test"])


def test_config_rejects_unknown_keys():
    with pytest.raises(ParameterError):
        resolve_corpus_config({"colis": 4})


def test_default_split_sizes():
    assert resolve_corpus_config(None)["splits"] == {"train": 553, "val": 197, "test": 100}


def test_corpus_round_trip(tmp_path):
    cfg = {"splits": {"train": 2, "test": 1}, "seed": 3}
    man = write_corpus(cfg, tmp_path / "c")
    corpus = Corpus(tmp_path / "c")
    assert corpus.record_ids("train") == ["train-0000", "train-0001"]
    rec = corpus.load("test", "test-0000")
    assert rec.y.shape == (4, 64, 64)
    assert set(json.loads((tmp_path / "c/test/test-0000/motion.json").read_text())) >= {"s_star", "triples"}
    sig = man["noise_sigma"]["train-0000"]
    assert len(sig) == 4 and all(s > 0 for s in sig)
    fresh = simulate_record(resolve_corpus_config(cfg), corpus.pattern, man["seeds"]["test-0000"])
    # container stores single precision
    assert np.allclose(rec.y, fresh.y.astype(np.complex64), rtol=0, atol=0)
    assert spectral_energy(rec.y, corpus.pattern) > 0
