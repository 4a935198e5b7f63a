"""Synthetic generator fingerprints, JPEG-style degradation and forensic features.

Each synthetic "generator" stamps an additive periodic pattern on smooth
random content. Patches then go through the same augmentation as real
data would (random JPEG quality or none, random crop without resampling)
before a fixed feature extractor turns them into vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import LabeledDataset
from .errors import IoError, ParamError, ProfileError, SizeError

# JPEG Annex K luminance quantization table (quality 50).
LUMINANCE_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)

AUGMENT_QUALITIES = (75, 80, 85, 90, 95, None)

LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
POOL_GRID = 4
RESIDUAL_MOMENTS = 2
# Block-DCT bins kept as features: every (u, v) with max(u, v) >= 2.
DCT_BINS = tuple((u, v) for u in range(8) for v in range(8) if max(u, v) >= 2)
FEATURE_DIM = POOL_GRID * POOL_GRID * RESIDUAL_MOMENTS + len(DCT_BINS)
MIN_FEATURE_SIZE = 32

BASE_SMOOTHING = 3.0
BASE_CONTRAST = 25.0


@dataclass(frozen=True)
class GeneratorProfile:
    class_id: int
    period: int
    amplitude: float
    phase: tuple = (0, 0)
    noise_std: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.period < 2:
            raise ProfileError(f"class {self.class_id}: period must be >= 2")
        if not 0 <= self.amplitude <= 30:
            raise ProfileError(f"class {self.class_id}: amplitude must lie in [0, 30]")
        if self.noise_std < 0:
            raise ProfileError(f"class {self.class_id}: noise_std must be non-negative")

    @property
    def label(self):
        return self.name or f"gen{self.class_id}"


DEFAULT_SEEN = (
    GeneratorProfile(0, 2, 6.0, (0, 0), 2.0, "gen-p2"),
    GeneratorProfile(1, 3, 8.0, (1, 0), 2.0, "gen-p3"),
    GeneratorProfile(2, 4, 10.0, (0, 1), 3.0, "gen-p4"),
    GeneratorProfile(3, 8, 12.0, (2, 3), 2.0, "gen-p8"),
    GeneratorProfile(4, 5, 9.0, (1, 2), 3.0, "gen-p5"),
)
DEFAULT_UNSEEN = (
    GeneratorProfile(5, 6, 10.0, (0, 0), 2.0, "gen-p6"),
    GeneratorProfile(6, 2, 16.0, (1, 1), 4.0, "gen-p2-strong"),
)


def pretext_profiles(n_classes=20):
    """Many-class surrogate "camera" task with distinct noise/period signatures."""
    periods = (2, 3, 4, 5, 6, 7, 8)
    profiles = []
    for k in range(n_classes):
        period = periods[k % len(periods)]
        tier = k // len(periods)
        profiles.append(GeneratorProfile(
            class_id=k,
            period=period,
            amplitude=3.25 + 5.0 * tier + 0.5 * (k % 3),  # off the integer grid of DEFAULT_*
            phase=(k % period, (2 * k) % period),
            noise_std=1.0 + 1.5 * ((k + tier) % 3),
            name=f"cam{k:02d}",
        ))
    return tuple(profiles)


def check_patch(patch):
    patch = np.asarray(patch)
    if patch.ndim != 2 or min(patch.shape) < 8:
        raise SizeError(f"patch must be 2-D and at least 8x8, got {patch.shape}")
    return patch


def base_field(size, seed):
    """Smooth random content around mean 128, quantized to 8 bits."""
    if size < 8:
        raise SizeError("patch size must be at least 8")
    rng = np.random.default_rng(seed)
    return _quantize(_smooth_content(size, rng))


def _smooth_content(size, rng):
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), BASE_SMOOTHING, mode="wrap")
    field *= BASE_CONTRAST / max(field.std(), 1e-12)
    return 128.0 + field


def _quantize(values):
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def periodic_pattern(size, period, amplitude, phase=(0, 0)):
    y, x = np.mgrid[0:size, 0:size]
    w = 2.0 * np.pi / period
    return amplitude * np.cos(w * (x + phase[1])) * np.cos(w * (y + phase[0]))


def synth_patch(profile: GeneratorProfile, size, seed):
    """Smooth content + the profile's periodic trace + pixel noise, clamped."""
    if size < 8:
        raise SizeError("patch size must be at least 8")
    rng = np.random.default_rng(seed)
    content = _smooth_content(size, rng)
    values = content + periodic_pattern(size, profile.period, profile.amplitude, profile.phase)
    if profile.noise_std > 0:
        values = values + rng.normal(0.0, profile.noise_std, size=(size, size))
    return _quantize(values)


# -- JPEG quantization round trip ------------------------------------------


def quality_scale(quality):
    if not 1 <= quality <= 100:
        raise ParamError(f"JPEG quality must be in 1..100, got {quality}")
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def quality_table(quality):
    """IJG scaling of the luminance table."""
    scale = quality_scale(quality)
    return np.clip((LUMINANCE_QTABLE * scale + 50) // 100, 1, 255)


@lru_cache(maxsize=None)
def dct_matrix(n=8):
    """Orthonormal type-II DCT matrix; ``C @ x`` transforms a column."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    C = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    C[0] /= np.sqrt(2.0)
    return C


def _to_blocks(img):
    h, w = img.shape
    return img.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _from_blocks(blocks):
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)


def block_dct(img):
    """2-D DCT of every 8x8 block; returns shape (rows, cols, 8, 8)."""
    C = dct_matrix(8)
    return C @ _to_blocks(np.asarray(img, dtype=np.float64)) @ C.T


def round_half_away(x):
    """Round to nearest, ties away from zero, as the IJG quantizer does.

    Values are first snapped to 1e-9 so that transform round-off cannot
    push an exact tie to either side.
    """
    x = np.round(x, 9)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def jpeg_degrade(patch, quality):
    """Quantize the 8x8 block DCT at ``quality`` and decode back to pixels.

    Sizes that are not multiples of 8 are edge-padded, then cropped back.
    """
    patch = check_patch(patch)
    table = quality_table(quality).astype(np.float64)
    h, w = patch.shape
    ph, pw = -h % 8, -w % 8
    img = np.pad(patch.astype(np.float64), ((0, ph), (0, pw)), mode="edge") - 128.0
    coef = block_dct(img)
    coef = round_half_away(coef / table) * table
    C = dct_matrix(8)
    recon = _from_blocks(C.T @ coef @ C) + 128.0
    return np.clip(round_half_away(recon[:h, :w]), 0, 255).astype(np.uint8)


def augment_quality(seed):
    """The seeded draw among qualities 75..95 and no compression (``None``)."""
    rng = np.random.default_rng(seed)
    return AUGMENT_QUALITIES[int(rng.integers(len(AUGMENT_QUALITIES)))]


def augment(patch, seed):
    quality = augment_quality(seed)
    if quality is None:
        return np.array(patch, copy=True)
    return jpeg_degrade(patch, quality)


def random_crop(patch, crop_size, seed):
    """Uniform top-left corner; the crop is a plain slice, never resampled."""
    patch = np.asarray(patch)
    h, w = patch.shape
    if h < crop_size or w < crop_size:
        raise SizeError(f"patch {patch.shape} smaller than crop {crop_size}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(h - crop_size + 1))
    left = int(rng.integers(w - crop_size + 1))
    return patch[top:top + crop_size, left:left + crop_size].copy()


# -- features --------------------------------------------------------------


def extract_features(patch):
    """Fixed-length forensic descriptor of a grayscale patch.

    The first ``POOL_GRID**2 * 2`` entries are the mean absolute value and
    standard deviation of a Laplacian high-pass residual inside each cell of
    a 4x4 spatial grid. The remaining ``len(DCT_BINS)`` entries are the mean
    magnitude of each mid/high-frequency 8x8 block-DCT coefficient. All
    entries are ``log1p``-compressed. Total length is ``FEATURE_DIM``.
    """
    patch = np.asarray(patch)
    if patch.ndim != 2 or min(patch.shape) < MIN_FEATURE_SIZE:
        raise SizeError(f"feature extraction needs at least {MIN_FEATURE_SIZE}x{MIN_FEATURE_SIZE}")
    img = patch.astype(np.float64)

    residual = ndimage.convolve(img, LAPLACIAN, mode="wrap")
    stats = []
    for band in np.array_split(residual, POOL_GRID, axis=0):
        for cell in np.array_split(band, POOL_GRID, axis=1):
            stats.append(np.abs(cell).mean())
            stats.append(cell.std())

    h, w = img.shape
    coef = np.abs(block_dct(img[: h - h % 8, : w - w % 8] - 128.0)).mean(axis=(0, 1))
    dct = [coef[u, v] for u, v in DCT_BINS]
    return np.log1p(np.array(stats + dct, dtype=np.float64))


def sample_seeds(seed, class_id, index):
    """Independent synth/augment/crop seeds for one sample."""
    ss = np.random.SeedSequence([int(seed), int(class_id), int(index)])
    return [int(child.generate_state(1)[0]) for child in ss.spawn(3)]


def make_sample(profile, seed, index, patch_size=80, crop_size=64):
    s_synth, s_aug, s_crop = sample_seeds(seed, profile.class_id, index)
    patch = synth_patch(profile, patch_size, s_synth)
    patch = augment(patch, s_aug)
    return random_crop(patch, crop_size, s_crop)


def build_dataset(seen, unseen, counts=(500, 100, 100), unseen_test=200, seed=0,
                  patch_size=80, crop_size=64) -> LabeledDataset:
    """Synthesize, augment, crop and featurize every sample.

    Seen classes get ``counts`` = (train, val, test) samples; unseen classes
    only get ``unseen_test`` test samples. Rows are ordered by class then
    sample index.
    """
    profiles = list(seen) + list(unseen)
    ids = [p.class_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ProfileError("duplicate class ids among profiles")
    keys = [(p.period, p.amplitude) for p in profiles]
    if len(set(keys)) != len(keys):
        raise ProfileError("profiles must have distinct (period, amplitude) pairs")

    rows, labels, splits, seens = [], [], [], []
    plan = [(p, True) for p in seen] + [(p, False) for p in unseen]
    for profile, is_seen in sorted(plan, key=lambda item: item[0].class_id):
        if is_seen:
            layout = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
        else:
            layout = ["test"] * unseen_test
        for index, split in enumerate(layout):
            patch = make_sample(profile, seed, index, patch_size, crop_size)
            rows.append(extract_features(patch))
            labels.append(profile.class_id)
            splits.append(split)
            seens.append(is_seen)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), FEATURE_DIM)
    table = {p.class_id: p.label for p in profiles}
    return LabeledDataset(X, labels, splits, seens, table)


# -- PGM (P5) i/o ----------------------------------------------------------


def write_pgm(patch, path):
    patch = check_patch(patch).astype(np.uint8)
    h, w = patch.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + patch.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IoError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise IoError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise IoError(f"{path}: bad PGM header") from None
    if maxval != 255 or len(data) - pos < w * h:
        raise IoError(f"{path}: unsupported or truncated PGM")
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()
