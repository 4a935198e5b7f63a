import hashlib

import numpy as np
import pytest
from scipy.fft import dctn, idctn

from ossa.core import format_features
from ossa.errors import IoError, ParamError, ProfileError, SizeError
from ossa.synthdata import (
    AUGMENT_QUALITIES,
    DCT_BINS,
    DEFAULT_SEEN,
    DEFAULT_UNSEEN,
    FEATURE_DIM,
    LUMINANCE_QTABLE,
    GeneratorProfile,
    augment,
    augment_quality,
    base_field,
    build_dataset,
    extract_features,
    jpeg_degrade,
    periodic_pattern,
    pretext_profiles,
    quality_scale,
    quality_table,
    random_crop,
    read_pgm,
    synth_patch,
    write_pgm,
)

# first row and first column of the published luminance table
PUBLISHED_ROW0 = [16, 11, 10, 16, 24, 40, 51, 61]
PUBLISHED_COL0 = [16, 12, 14, 14, 18, 24, 49, 72]


def oracle_jpeg(patch, quality):
    """Block-by-block round trip through scipy's orthonormal DCT.

    Quantization rounds half away from zero and pixels round half up,
    both after snapping to 1e-9.
    """
    table = quality_table(quality).astype(float)
    out = np.empty(patch.shape, dtype=float)
    for i in range(0, patch.shape[0], 8):
        for j in range(0, patch.shape[1], 8):
            block = patch[i:i + 8, j:j + 8].astype(float) - 128
            ratio = np.round(dctn(block, norm="ortho") / table, 9)
            coef = np.sign(ratio) * np.floor(np.abs(ratio) + 0.5) * table
            out[i:i + 8, j:j + 8] = idctn(coef, norm="ortho") + 128
    out = np.round(out, 9)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def flat_profile(period=2, amplitude=0.0, noise=0.0, cid=0, phase=(0, 0)):
    return GeneratorProfile(cid, period, amplitude, phase, noise)


def test_luminance_table_values():
    assert LUMINANCE_QTABLE[0].tolist() == PUBLISHED_ROW0
    assert LUMINANCE_QTABLE[:, 0].tolist() == PUBLISHED_COL0
    assert LUMINANCE_QTABLE[7, 7] == 99


def test_amplitude_zero_is_base_field():
    patch = synth_patch(flat_profile(amplitude=0.0), 40, seed=9)
    np.testing.assert_array_equal(patch, base_field(40, seed=9))
    assert patch.dtype == np.uint8
    assert abs(float(patch.mean()) - 128) < 10


@pytest.mark.parametrize("seed", range(4))
def test_period_two_peaks_at_nyquist(seed):
    n, a = 64, 12.0
    patch = synth_patch(flat_profile(2, a), n, seed).astype(float)
    k = np.arange(n)
    F = np.exp(-2j * np.pi * np.outer(k, k) / n)
    spectrum = np.abs(F @ (patch - patch.mean()) @ F.T)
    spectrum[0, 0] = 0.0
    assert np.unravel_index(spectrum.argmax(), spectrum.shape) == (n // 2, n // 2)
    # pixel rounding moves each sample by at most 0.5
    assert abs(spectrum[n // 2, n // 2] - a * n * n) <= 0.5 * n * n


def test_synth_deterministic():
    prof = DEFAULT_SEEN[2]
    np.testing.assert_array_equal(synth_patch(prof, 32, 4), synth_patch(prof, 32, 4))
    assert not np.array_equal(synth_patch(prof, 32, 4), synth_patch(prof, 32, 5))
    with pytest.raises(SizeError):
        synth_patch(prof, 7, 0)


def test_quality_mapping():
    assert quality_scale(50) == 100
    np.testing.assert_array_equal(quality_table(50), LUMINANCE_QTABLE)
    assert quality_scale(95) == 10
    assert quality_table(95)[0, 0] == 2  # (16*10 + 50) // 100
    assert quality_scale(10) == 500
    assert quality_table(100).max() == 1
    assert quality_table(1).max() == 255
    for bad in (0, 101, -5):
        with pytest.raises(ParamError):
            jpeg_degrade(np.zeros((8, 8), np.uint8), bad)


@pytest.mark.parametrize("quality", [1, 20, 50, 75, 95, 100])
def test_jpeg_matches_block_oracle(quality):
    patch = synth_patch(DEFAULT_SEEN[0], 32, seed=quality)
    np.testing.assert_array_equal(jpeg_degrade(patch, quality), oracle_jpeg(patch, quality))


@pytest.mark.parametrize("quality", range(50, 101))
def test_constant_patch_within_one_level(quality):
    for c in range(0, 256, 5):
        patch = np.full((16, 24), c, np.uint8)
        out = jpeg_degrade(patch, quality)
        np.testing.assert_array_equal(out, oracle_jpeg(patch, quality))
        assert np.abs(out.astype(int) - c).max() <= 1


@pytest.mark.parametrize("quality", [1, 5, 10, 20, 33, 49])
def test_constant_patch_bound_at_low_quality(quality):
    # only the DC term survives; its quantization step divided by 8 per
    # axis bounds the pixel error before rounding
    bound = quality_table(quality)[0, 0] / 16 + 0.5
    for c in range(256):
        out = jpeg_degrade(np.full((8, 8), c, np.uint8), quality)
        assert np.abs(out.astype(int) - c).max() <= bound


def test_jpeg_pads_odd_sizes():
    patch = synth_patch(DEFAULT_SEEN[1], 37, seed=0)[:, :29]
    out = jpeg_degrade(patch, 80)
    assert out.shape == patch.shape


def test_jpeg_double_pass_regression():
    for seed in range(5):
        patch = synth_patch(DEFAULT_SEEN[seed % 5], 32, seed)
        once = jpeg_degrade(patch, 75)
        twice = jpeg_degrade(once, 75)
        one_pass = np.abs(once.astype(int) - patch).max()
        assert np.abs(twice.astype(int) - patch).max() <= one_pass + 1


def test_augment_branch_frequencies():
    draws = [augment_quality(seed) for seed in range(6000)]
    for q in AUGMENT_QUALITIES:
        assert abs(draws.count(q) - 1000) <= 120


def test_augment_branches():
    patch = synth_patch(DEFAULT_SEEN[0], 16, 0)
    none_seed = next(s for s in range(100) if augment_quality(s) is None)
    np.testing.assert_array_equal(augment(patch, none_seed), patch)
    q_seed = next(s for s in range(100) if augment_quality(s) == 75)
    np.testing.assert_array_equal(augment(patch, q_seed), jpeg_degrade(patch, 75))
    np.testing.assert_array_equal(augment(patch, 17), augment(patch, 17))


def test_random_crop():
    patch = np.arange(100, dtype=np.uint8).reshape(10, 10)
    np.testing.assert_array_equal(random_crop(patch, 10, seed=3), patch)
    corners = set()
    for seed in range(900):
        out = random_crop(patch, 8, seed)
        assert out.shape == (8, 8)
        corners.add((int(out[0, 0]) // 10, int(out[0, 0]) % 10))
    assert corners == {(r, c) for r in range(3) for c in range(3)}
    with pytest.raises(SizeError):
        random_crop(patch, 11, 0)


def test_features_of_constant_patch():
    f = extract_features(np.full((32, 32), 77, np.uint8))
    assert f.shape == (FEATURE_DIM,)
    assert np.all(f[:32] == 0.0)
    assert np.all(f[32:] < 1e-12)  # AC energy is round-off only


def test_feature_dimension_constant():
    assert FEATURE_DIM == 92 == 32 + len(DCT_BINS)
    for size in (32, 45, 64, 80):
        assert extract_features(synth_patch(DEFAULT_SEEN[0], size, 1)).shape == (FEATURE_DIM,)
    with pytest.raises(SizeError):
        extract_features(np.zeros((31, 40)))


def test_checkerboard_nyquist_dominates():
    board = np.clip(128 + periodic_pattern(64, 2, 50.0), 0, 255).astype(np.uint8)
    f = extract_features(board)[32:]
    nyq = DCT_BINS.index((7, 7))
    # compare with the block transform taken directly
    direct = np.abs(dctn(board[:8, :8].astype(float) - 128, norm="ortho"))
    assert np.isclose(np.expm1(f[nyq]), direct[7, 7], rtol=1e-12)
    assert all(f[nyq] > f[i] for i in range(len(f)) if i != nyq)


@pytest.mark.parametrize("period", [2, 4])
def test_phase_shift_covariance(period):
    def board(phase):
        return np.rint(128 + periodic_pattern(64, period, 40.0, phase)).astype(np.uint8)

    ref = extract_features(board((0, 0)))
    for phase in [(period, 0), (0, period), (period, 2 * period)]:
        np.testing.assert_allclose(extract_features(board(phase)), ref, rtol=0, atol=1e-9)
    if period == 2:
        # half-period shift negates the pattern; magnitudes are unchanged
        np.testing.assert_allclose(extract_features(board((1, 0))), ref, rtol=0, atol=1e-9)


def test_profile_validation():
    with pytest.raises(ProfileError):
        GeneratorProfile(0, 1, 5.0, (0, 0), 1.0)
    with pytest.raises(ProfileError):
        GeneratorProfile(0, 2, 31.0, (0, 0), 1.0)
    a = GeneratorProfile(0, 3, 5.0, (0, 0), 1.0)
    with pytest.raises(ProfileError):
        build_dataset([a], [GeneratorProfile(1, 3, 5.0, (1, 1), 2.0)], counts=(1, 1, 1), unseen_test=1)
    with pytest.raises(ProfileError):
        build_dataset([a], [GeneratorProfile(0, 4, 5.0, (1, 1), 2.0)], counts=(1, 1, 1), unseen_test=1)


def test_default_profiles_are_distinct():
    profiles = DEFAULT_SEEN + DEFAULT_UNSEEN
    assert len(DEFAULT_SEEN) == 5 and len(DEFAULT_UNSEEN) == 2
    assert len({(p.period, p.amplitude) for p in profiles}) == 7
    assert len({p.class_id for p in profiles}) == 7


def test_small_dataset_layout_and_digest():
    kw = dict(counts=(4, 2, 3), unseen_test=5, seed=11)
    data = build_dataset(DEFAULT_SEEN[:2], DEFAULT_UNSEEN[:1], **kw)
    assert len(data) == 2 * 9 + 5
    assert not np.any((data.split == "train") & ~data.seen)
    assert data.select(seen=False).split.tolist() == ["test"] * 5
    digest = hashlib.sha256(format_features(data).encode()).hexdigest()
    again = build_dataset(DEFAULT_SEEN[:2], DEFAULT_UNSEEN[:1], **kw)
    assert hashlib.sha256(format_features(again).encode()).hexdigest() == digest
    other = build_dataset(DEFAULT_SEEN[:2], DEFAULT_UNSEEN[:1], **{**kw, "seed": 12})
    assert hashlib.sha256(format_features(other).encode()).hexdigest() != digest


@pytest.mark.slow
def test_full_size_dataset_count():
    data = build_dataset(DEFAULT_SEEN, DEFAULT_UNSEEN, seed=0)
    assert len(data) == 3900
    assert len(data.select(seen=False)) == 400


def test_pgm_round_trip(tmp_path):
    patch = synth_patch(DEFAULT_SEEN[3], 24, 2)[:, :20]
    path = tmp_path / "p.pgm"
    write_pgm(patch, path)
    assert path.read_bytes().startswith(b"P5")
    np.testing.assert_array_equal(read_pgm(path), patch)
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(IoError):
        read_pgm(bad)
    bad.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(IoError):
        read_pgm(bad)


def test_pretext_profiles_disjoint_from_attribution_profiles():
    pretext = pretext_profiles(20)
    assert len({(p.period, p.amplitude) for p in pretext}) == 20
    used = {(p.period, p.amplitude) for p in DEFAULT_SEEN + DEFAULT_UNSEEN}
    assert not used & {(p.period, p.amplitude) for p in pretext}
