"""Synthetic segmentation corpus with an age-like generative latent.

Every sample is a pair of two smooth elliptical blobs (a lung-like
layout) over a textured, noisy background. The `age` latent drives blob
size, eccentricity and background texture monotonically, so partitioning
by age bands produces genuine covariate shift between clients rather
than a relabeling trick.

Generation is a pure function of (seed, age, side): the same inputs
reproduce a sample bit-exactly, which is what makes whole experiment
runs replayable from a handful of integers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError

# SeedSequence stream tags; distinct tags keep every consumer of the
# corpus seed on an independent, collision-free stream.
SPLIT_PROXY = 1
SPLIT_TEST = 2
SPLIT_TRAIN = 3
SPLIT_TEACHER_EXTRA = 4
_AGE_STREAM = 0x414745
_SAMPLE_STREAM = 0x53414D50
_PARTITION_STREAM = 0x50415254

# Generator shape constants. Blob area roughly triples from age 0 to 100
# while staying inside [5%, 50%] foreground for every draw. Blob contrast
# swings monotonically from bright (young) to dark (old) through a steep
# crossing: models fit to one age band learn polarity-specific filters
# that transfer poorly (and average destructively) across bands, which is
# exactly the covariate shift the age-skew partition exploits. Models
# exposed to the full age range learn both polarities at once.
_BLOB_SY = (0.145, 0.105)  # base + age slope, vertical semi-axis
_BLOB_SX = (0.085, 0.045)
_CENTER_JITTER = 0.04
_AXIS_JITTER = 0.10
_GAIN_SPAN = 0.24       # contrast magnitude at the young plateau
_GAIN_CROSS = 0.55      # age fraction where contrast crosses zero
_GAIN_STEEP = 3.0
_NOISE_SIGMA = 0.08
_TEXTURE_AMP = (0.08, 0.05)
_TEXTURE_FREQ = (2.0, 3.0)


def blob_gain(age):
    """Signed blob contrast at `age`; strictly decreasing in age."""
    t = age / 100.0
    return float(
        _GAIN_SPAN
        * np.tanh(_GAIN_STEEP * (_GAIN_CROSS - t))
        / np.tanh(_GAIN_STEEP * _GAIN_CROSS)
    )


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    mask: np.ndarray   # (1, H, W) float32 binary
    age: float
    seed: int


@dataclass
class CorpusSplit:
    proxy: list
    test: list
    train: list


@dataclass
class ClientShard:
    client_id: int
    samples: list

    @property
    def count(self):
        return len(self.samples)


def _soft_ellipse(u, v, cx, cy, sx, sy, ang):
    dx = u - cx
    dy = v - cy
    xr = dx * np.cos(ang) + dy * np.sin(ang)
    yr = -dx * np.sin(ang) + dy * np.cos(ang)
    d2 = (xr / sx) ** 2 + (yr / sy) ** 2
    return d2, 1.0 / (1.0 + np.exp(-6.0 * (1.0 - d2)))


def generate_sample(seed, age, side=32):
    """Render one image/mask pair from (seed, age).

    The mask marks the two tall target blobs only. Round distractor
    bumps of comparable intensity (same and opposite polarity) litter
    the background, so segmentation requires shape and layout cues, not
    an intensity threshold. Draw order is fixed (centers, axes, angles,
    distractors, texture, noise), making the sample a pure function of
    its arguments.
    """
    if not 0.0 <= age <= 100.0:
        raise ConfigError(f"age must lie in [0, 100], got {age}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), _SAMPLE_STREAM)))
    t = age / 100.0

    centers = []
    for base_x, base_y in ((0.30, 0.48), (0.70, 0.52)):
        cx = base_x + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER)
        cy = base_y + rng.uniform(-2 * _CENTER_JITTER, 2 * _CENTER_JITTER)
        centers.append((cx, cy))
    axes = []
    for _ in range(2):
        jy = 1.0 + rng.uniform(-_AXIS_JITTER, _AXIS_JITTER)
        jx = 1.0 + rng.uniform(-_AXIS_JITTER, _AXIS_JITTER)
        sy = (_BLOB_SY[0] + _BLOB_SY[1] * t) * jy
        sx = (_BLOB_SX[0] + _BLOB_SX[1] * t) * jx
        axes.append((sx, sy))
    angles = [rng.uniform(-0.45, 0.45) for _ in range(2)]

    grid = (np.arange(side) + 0.5) / side
    u = grid[None, :]  # x
    v = grid[:, None]  # y

    gain = blob_gain(age)
    mask = np.zeros((side, side), dtype=bool)
    bumps = np.zeros((side, side), dtype=np.float64)
    for (cx, cy), (sx, sy), ang in zip(centers, axes, angles):
        d2, soft = _soft_ellipse(u, v, cx, cy, sx, sy, ang)
        mask |= d2 <= 1.0
        bumps += gain * soft

    # Distractors: round bumps kept clear of the target blobs; first
    # group shares the target polarity at lower contrast, second group
    # is inverted at comparable contrast.
    for polarity, lo, hi, count in (
        (1.0, 0.5, 0.8, int(rng.integers(1, 3))),
        (-1.0, 0.6, 0.95, int(rng.integers(1, 3))),
    ):
        for _ in range(count):
            for _attempt in range(8):
                dx_c = rng.uniform(0.08, 0.92)
                dy_c = rng.uniform(0.08, 0.92)
                if all(
                    (dx_c - cx) ** 2 + (dy_c - cy) ** 2 > (0.16 + sy) ** 2
                    for (cx, cy), (_, sy) in zip(centers, axes)
                ):
                    break
            radius = rng.uniform(0.05, 0.085)
            squash = 1.0 + rng.uniform(-0.2, 0.2)
            strength = rng.uniform(lo, hi)
            _, soft = _soft_ellipse(u, v, dx_c, dy_c, radius, radius * squash, 0.0)
            bumps += polarity * strength * gain * soft

    phi = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    freq = _TEXTURE_FREQ[0] + _TEXTURE_FREQ[1] * t
    amp = _TEXTURE_AMP[0] + _TEXTURE_AMP[1] * t
    bg = 0.42 + amp * np.sin(2.0 * np.pi * freq * (u * np.cos(phi) + v * np.sin(phi)) + phase)

    img = bg + bumps + rng.normal(0.0, _NOISE_SIGMA, size=(side, side))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[None]
    return Sample(img, mask.astype(np.float32)[None], float(age), int(seed))


_grid_cache = {}


def _centered_grid(h, w):
    if (h, w) not in _grid_cache:
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        _grid_cache[(h, w)] = (ys - (h - 1) / 2.0, xs - (w - 1) / 2.0)
    return _grid_cache[(h, w)]


def _rotate(plane, degrees, bilinear):
    """Rotate one (H, W) plane about its center; fill 0 outside."""
    h, w = plane.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    rad = np.deg2rad(degrees)
    cos, sin = np.cos(rad), np.sin(rad)
    ysc, xsc = _centered_grid(h, w)
    # Inverse map: output pixel -> source coordinate.
    sx = cos * xsc + sin * ysc + cx
    sy = -sin * xsc + cos * ysc + cy
    if bilinear:
        x0 = np.floor(sx).astype(int)
        y0 = np.floor(sy).astype(int)
        fx = sx - x0
        fy = sy - y0
        out = np.zeros((h, w), dtype=np.float64)
        for dy in (0, 1):
            for dx in (0, 1):
                xi = x0 + dx
                yi = y0 + dy
                wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
                valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                out[valid] += wgt[valid] * plane[yi[valid], xi[valid]]
        return out
    xi = np.rint(sx).astype(int)
    yi = np.rint(sy).astype(int)
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros((h, w), dtype=plane.dtype)
    out[valid] = plane[yi[valid], xi[valid]]
    return out


def apply_augmentation(sample, degrees, flip, brightness, contrast):
    """Deterministic core of `augment`; identity parameters are no-ops
    so the untouched arrays pass through bit-identically."""
    img = sample.image[0]
    mask = sample.mask[0]
    if degrees != 0.0:
        img = _rotate(img, degrees, bilinear=True)
        mask = _rotate(mask, degrees, bilinear=False)
    if flip:
        img = img[:, ::-1]
        mask = mask[:, ::-1]
    if brightness != 0.0 or contrast != 1.0:
        img = (img - 0.5) * contrast + 0.5 + brightness
    img = np.clip(img, 0.0, 1.0)
    return Sample(
        np.ascontiguousarray(img, dtype=np.float32)[None],
        np.ascontiguousarray(mask, dtype=np.float32)[None],
        sample.age,
        sample.seed,
    )


def augment(sample, rng):
    """Random rotation (±15°), horizontal flip (p=0.5), brightness
    (±0.1) and contrast ([0.9, 1.1]). The mask follows geometry only."""
    degrees = rng.uniform(-15.0, 15.0)
    flip = rng.random() < 0.5
    brightness = rng.uniform(-0.1, 0.1)
    contrast = rng.uniform(0.9, 1.1)
    return apply_augmentation(sample, degrees, flip, brightness, contrast)


def _derive_sample_seed(corpus_seed, tag, index):
    ss = np.random.SeedSequence((int(corpus_seed), int(tag), int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


def generate_uniform_set(corpus_seed, tag, count, side=32):
    """Generate `count` samples with ages uniform over [0, 100]."""
    age_rng = np.random.default_rng(
        np.random.SeedSequence((int(corpus_seed), int(tag), _AGE_STREAM))
    )
    ages = age_rng.uniform(0.0, 100.0, size=count)
    return [
        generate_sample(_derive_sample_seed(corpus_seed, tag, i), ages[i], side)
        for i in range(count)
    ]


def build_splits(n_proxy, n_test, n_train, seed, side=32):
    """Generate the proxy/test/train corpus; splits are disjoint by seed."""
    for label, n in (("proxy", n_proxy), ("test", n_test), ("train", n_train)):
        if n < 1:
            raise ConfigError(f"{label} split needs at least 1 sample, got {n}")
    proxy = generate_uniform_set(seed, SPLIT_PROXY, n_proxy, side)
    test = generate_uniform_set(seed, SPLIT_TEST, n_test, side)
    train = generate_uniform_set(seed, SPLIT_TRAIN, n_train, side)
    seen = [s.seed for s in proxy + test + train]
    if len(set(seen)) != len(seen):
        raise ContractError("split sample seeds collide; corpus seed unusable")
    return CorpusSplit(proxy=proxy, test=test, train=train)


def partition_iid(train, k, seed):
    """Random permutation into K near-equal shards (sizes differ by <= 1)."""
    if k < 1:
        raise ConfigError(f"client count must be >= 1, got {k}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), _PARTITION_STREAM, 0)))
    order = rng.permutation(len(train))
    base, extra = divmod(len(train), k)
    shards = []
    start = 0
    for cid in range(k):
        size = base + (1 if cid < extra else 0)
        idx = order[start : start + size]
        shards.append(ClientShard(cid, [train[i] for i in idx]))
        start += size
    return shards


def partition_age_skew(train, k, boundaries=None):
    """Contiguous age bands; client k owns ages in [b_{k-1}, b_k)."""
    if boundaries is None:
        if k == 3:
            boundaries = (33.0, 66.0)
        else:
            boundaries = tuple(100.0 * (i + 1) / k for i in range(k - 1))
    boundaries = tuple(float(b) for b in boundaries)
    if len(boundaries) != k - 1:
        raise ConfigError(
            f"age skew with {k} clients needs {k - 1} boundaries, got {len(boundaries)}"
        )
    if any(b2 <= b1 for b1, b2 in zip(boundaries, boundaries[1:])):
        raise ConfigError(f"age boundaries must be strictly increasing: {boundaries}")
    edges = (0.0,) + boundaries + (100.0,)
    shards = []
    for cid in range(k):
        lo, hi = edges[cid], edges[cid + 1]
        if cid == k - 1:
            members = [s for s in train if lo <= s.age <= hi]
        else:
            members = [s for s in train if lo <= s.age < hi]
        if not members:
            raise ConfigError(f"age band [{lo}, {hi}) holds no samples (degenerate client)")
        shards.append(ClientShard(cid, members))
    return shards


def partition_quantity_skew(train, k, fractions=(0.7, 0.2, 0.1), seed=0):
    """Permutation plus contiguous cuts at the cumulative fractions,
    with largest-remainder rounding of shard sizes."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != k:
        raise ConfigError(f"need {k} fractions, got {len(fractions)}")
    if any(f <= 0 for f in fractions):
        raise ConfigError(f"fractions must be positive: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(train)
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    remainders = [r - s for r, s in zip(raw, sizes)]
    # Hand leftover samples to the largest remainders; ties to lower index.
    for i in sorted(range(k), key=lambda i: (-remainders[i], i))[: n - sum(sizes)]:
        sizes[i] += 1
    if any(s == 0 for s in sizes):
        raise ConfigError(f"quantity skew produced an empty shard: sizes {sizes}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), _PARTITION_STREAM, 1)))
    order = rng.permutation(n)
    shards = []
    start = 0
    for cid in range(k):
        idx = order[start : start + sizes[cid]]
        shards.append(ClientShard(cid, [train[i] for i in idx]))
        start += sizes[cid]
    return shards


def bounding_box_channel(mask):
    """Binary (1, H, W) map that is 1 inside the mask's bounding box."""
    m = mask[0] > 0.5
    out = np.zeros_like(mask, dtype=np.float32)
    if not m.any():
        return out
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    out[0, rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = 1.0
    return out


def mask_area(sample):
    return float(sample.mask.sum())


def export_split(samples, path):
    """Debug dump: header (u32 count, u32 H, u32 W), then per sample
    (u64 seed, f32 age, H*W f32 image, H*W u8 mask), little-endian."""
    if not samples:
        raise ConfigError("cannot export an empty split")
    h, w = samples[0].image.shape[1:]
    chunks = [struct.pack("<III", len(samples), h, w)]
    for s in samples:
        if s.image.shape[1:] != (h, w):
            raise ContractError("export_split: mixed sample resolutions")
        chunks.append(struct.pack("<Qf", s.seed, s.age))
        chunks.append(s.image.astype("<f4", copy=False).tobytes())
        chunks.append(s.mask.astype(np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_split(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated split file")
    count, h, w = struct.unpack("<III", blob[:12])
    off = 12
    rec = 8 + 4 + 4 * h * w + h * w
    if len(blob) != 12 + count * rec:
        raise CheckpointError(f"{path}: split file length mismatch")
    samples = []
    for _ in range(count):
        seed, age = struct.unpack("<Qf", blob[off : off + 12])
        off += 12
        img = np.frombuffer(blob[off : off + 4 * h * w], dtype="<f4").reshape(1, h, w)
        off += 4 * h * w
        mask = np.frombuffer(blob[off : off + h * w], dtype=np.uint8).reshape(1, h, w)
        off += h * w
        samples.append(Sample(img.astype(np.float32), mask.astype(np.float32), float(age), int(seed)))
    return samples
