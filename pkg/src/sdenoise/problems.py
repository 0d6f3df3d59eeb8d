"""Corruption processes, forward operators, and desk-scale datasets.

Measurements follow ``y = a (A x) + b n`` with the stored operator already
absorbing the mixing coefficient ``a``, so every packaged problem satisfies
``y - A x == n`` bitwise. Noise generators cover the structured cases used
throughout: sinusoidal-variance Gaussian noise, glyph (sprite) overlays,
and plain i.i.d. Gaussian noise.
"""

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arrayio
from .errors import ConfigError, DataFormatError
from .guidance import LinearOperator


@dataclass
class InverseProblem:
    """A forward operator, an observation, and optional ground truth."""

    A: LinearOperator
    y: np.ndarray
    x_true: np.ndarray = None
    n_true: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.shape[-1] != self.A.m:
            raise ValueError(
                f"observation dim {self.y.shape[-1]} does not match operator rows {self.A.m}"
            )


def observe(x, A, noise, mix=(1.0, 1.0), meta=None):
    """Package an observation ``y = a (A x) + b noise`` as an InverseProblem.

    The returned problem stores the scaled operator ``a A`` and the residual
    noise ``y - (aA) x``, so the measurement identity holds exactly. The
    digit-overlay corruption is ``mix=(0.5, 0.5)`` with an identity A.
    """
    x = np.asarray(x, dtype=float)
    noise = np.asarray(noise, dtype=float)
    a, b = mix
    A_eff = A.scaled(a)
    ax = A_eff.apply(x)
    if noise.shape != ax.shape:
        raise ValueError(f"noise shape {noise.shape} does not match measurement shape {ax.shape}")
    y = ax + b * noise
    n_eff = y - A_eff.apply(x)
    meta = dict(meta or {})
    meta["mix"] = [float(a), float(b)]
    return InverseProblem(A=A_eff, y=y, x_true=x.copy(), n_true=n_eff, meta=meta)


def _image_shape(shape):
    if np.isscalar(shape):
        return 1, int(shape)
    h, w = shape
    return int(h), int(w)


def sine_std_profile(shape, avg_std, axis="row", period=16):
    """Per-pixel stds sigma_k ~ exp(sin(2 pi k / period)), mean-matched.

    ``axis='row'`` varies the pattern along each row (k = column index);
    ``axis='col'`` along each column. The profile is rescaled so the mean
    per-pixel std equals ``avg_std``.
    """
    if avg_std < 0:
        raise ValueError("avg_std must be nonnegative")
    h, w = _image_shape(shape)
    n = w if axis == "row" else h
    k = np.arange(n)
    prof = np.exp(np.sin(2.0 * np.pi * k / period))
    prof *= avg_std / prof.mean()
    grid = np.tile(prof, (h, 1)) if axis == "row" else np.tile(prof[:, None], (1, w))
    return grid.ravel()


def gen_sine_noise(shape, rng, avg_std, axis="row", period=16):
    """Independent zero-mean Gaussian noise with a sinusoidal std pattern."""
    stds = sine_std_profile(shape, avg_std, axis=axis, period=period)
    return rng.standard_normal(stds.size) * stds


_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgcde", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def _draw_glyph(digit, cell):
    """Seven-segment rendering of one digit on a cell x cell canvas."""
    img = np.zeros((cell, cell))
    m = max(2, cell // 6)
    w = max(1, cell // 8)
    mid = cell // 2
    segs = _SEGMENTS[digit]
    if "a" in segs:
        img[m : m + w, m : cell - m] = 1.0
    if "d" in segs:
        img[cell - m - w : cell - m, m : cell - m] = 1.0
    if "g" in segs:
        img[mid - w // 2 : mid - w // 2 + w, m : cell - m] = 1.0
    if "f" in segs:
        img[m:mid, m : m + w] = 1.0
    if "b" in segs:
        img[m:mid, cell - m - w : cell - m] = 1.0
    if "e" in segs:
        img[mid : cell - m, m : m + w] = 1.0
    if "c" in segs:
        img[mid : cell - m, cell - m - w : cell - m] = 1.0
    return img


def default_sprite_library(cell=16):
    """Procedurally drawn digit glyphs (seven-segment style), values in [0, 1]."""
    return [_draw_glyph(d, cell) for d in range(10)]


def load_sprite_library(directory):
    """Ingest external glyph images (8-bit PGM files) as a sprite library."""
    paths = sorted(Path(directory).glob("*.pgm"))
    return [arrayio.read_pgm(p) for p in paths]


def gen_sprite_noise(shape, sprite_library, rng, weight, n_sprites=(1, 3)):
    """Compose glyphs from the library onto a blank canvas, scaled by weight.

    Glyphs are placed at uniform-random offsets (clipped to the canvas) and
    combined by maximum, so pixel values stay within [0, weight].
    """
    if len(sprite_library) == 0:
        raise ConfigError("sprite library is empty")
    h, w = _image_shape(shape)
    canvas = np.zeros((h, w))
    lo, hi = n_sprites
    count = int(rng.integers(lo, hi + 1))
    for _ in range(count):
        glyph = sprite_library[int(rng.integers(len(sprite_library)))]
        gh, gw = glyph.shape
        top = int(rng.integers(0, max(h - gh, 0) + 1))
        left = int(rng.integers(0, max(w - gw, 0) + 1))
        gh_eff = min(gh, h - top)
        gw_eff = min(gw, w - left)
        region = canvas[top : top + gh_eff, left : left + gw_eff]
        np.maximum(region, glyph[:gh_eff, :gw_eff], out=region)
    return weight * canvas.ravel()


@dataclass
class NoiseModelSpec:
    """Declarative noise model; ``sample(shape, rng)`` draws one realization."""

    kind: str  # sinusoidal-variance | sprite-overlay | gaussian-iid
    avg_std: float = 0.2
    period: int = 16
    axis: str = "row"
    weight: float = 0.5
    n_sprites: tuple = (1, 3)
    sprite_cell: int = 16

    def __post_init__(self):
        kinds = ("sinusoidal-variance", "sprite-overlay", "gaussian-iid")
        if self.kind not in kinds:
            raise ConfigError(f"unknown noise kind {self.kind!r}; options: {kinds}")
        if self.avg_std < 0 or self.period <= 0 or self.weight < 0:
            raise ConfigError("noise parameters must be positive where applicable")

    def sample(self, shape, rng, library=None):
        if self.kind == "sinusoidal-variance":
            return gen_sine_noise(shape, rng, self.avg_std, axis=self.axis, period=self.period)
        if self.kind == "sprite-overlay":
            library = library if library is not None else default_sprite_library(self.sprite_cell)
            return gen_sprite_noise(shape, library, rng, self.weight, n_sprites=self.n_sprites)
        h, w = _image_shape(shape)
        return self.avg_std * rng.standard_normal(h * w)


def make_cs_operator(d, factor, rng):
    """Random Gaussian m x d measurement matrix with m = round(d / factor).

    Entries are i.i.d. N(0, 1/m), so columns have unit expected norm.
    """
    if factor < 1:
        raise ConfigError(f"subsampling factor must be >= 1, got {factor}")
    m = int(round(d / factor))
    if m < 1:
        raise ConfigError(f"subsampling factor {factor} leaves no measurement rows for d={d}")
    matrix = rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, d))
    return LinearOperator.dense(matrix, kind="random-gaussian")


def smooth_image_prior(shape, mean=0.5, amplitude=0.15, length_scale=3.0, jitter=1e-8):
    """Gaussian random field prior over pixels (squared-exponential kernel).

    Returns (mean vector, covariance matrix) for use as an analytic signal
    prior on small images.
    """
    h, w = _image_shape(shape)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(float)
    sq = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=2)
    cov = amplitude**2 * np.exp(-sq / (2.0 * length_scale**2))
    cov[np.diag_indices_from(cov)] += jitter
    return np.full(h * w, float(mean)), cov


def sample_gaussian(mean, cov, rng, size=None):
    """Draw from N(mean, cov) via a (cached-free) Cholesky factor."""
    mean = np.asarray(mean, dtype=float)
    chol = np.linalg.cholesky(cov)
    shape = (mean.size,) if size is None else (size, mean.size)
    z = rng.standard_normal(shape)
    return mean + z @ chol.T


def fit_gaussian(samples, shrinkage=1e-3):
    """Moment-match a Gaussian to sample vectors, with ridge shrinkage.

    The covariance gets ``shrinkage * mean-diagonal-variance`` added to its
    diagonal so it stays SPD for score evaluation.
    """
    samples = np.asarray(samples, dtype=float)
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / samples.shape[0]
    ridge = shrinkage * max(np.trace(cov) / cov.shape[0], 1e-12)
    cov[np.diag_indices_from(cov)] += ridge
    return mean, cov


def save_dataset(path, vectors, meta=None):
    """Write an (N, d) dataset to the flat binary container."""
    arr = np.asarray(vectors, dtype=float)
    arrayio.save_array(path, arr, meta=dict(meta or {}, content="dataset"))


def load_dataset(path, format=None):
    """Load signal vectors from a file or PGM directory, values in [0, 1].

    Formats: ``bin`` (flat binary container, one (N, d) array), ``pgm``
    (directory of 8-bit PGM images, flattened row-major), ``csv`` (one
    vector per row). Out-of-range values are rejected with the offending
    location in the message.
    """
    path = Path(path)
    if format is None:
        if path.is_dir():
            format = "pgm"
        elif path.suffix == ".csv":
            format = "csv"
        else:
            format = "bin"
    if format == "pgm":
        files = sorted(path.glob("*.pgm"))
        if not files:
            warnings.warn(f"no PGM files under {path}; returning empty dataset")
            return np.empty((0, 0))
        rows = []
        width = None
        for f in files:
            img = arrayio.read_pgm(f)
            if width is None:
                width = img.shape
            elif img.shape != width:
                raise DataFormatError(f"{f}: image shape {img.shape} differs from {width}")
            rows.append(img.ravel())
        return np.stack(rows)
    if format == "csv":
        header, raw = arrayio.read_csv(path)
        rows = []
        for i, row in enumerate(raw):
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataFormatError(f"{path}: record {i}: non-numeric entry: {exc}") from exc
        data = np.array(rows)
        if data.size == 0:
            warnings.warn(f"{path}: empty dataset")
            return np.empty((0, 0))
        _check_unit_range(data, path)
        return data
    if format == "bin":
        data, _ = arrayio.load_array(path)
        data = np.atleast_2d(np.asarray(data, dtype=float))
        _check_unit_range(data, path)
        return data
    raise ConfigError(f"unknown dataset format {format!r}")


def _check_unit_range(data, path):
    bad = np.argwhere((data < 0.0) | (data > 1.0))
    if bad.size:
        r, c = bad[0]
        raise DataFormatError(
            f"{path}: value {data[r, c]} at record {r}, column {c} outside [0, 1]"
        )
