"""Synthetic source generators and PGM ingestion.

Every generator is a pure function of (spec, block_index): block t of a
stream is reproducible in isolation, so trials can run on any number of
workers without changing results.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import FormatError, ParameterError

# Class-mean constants are shared by every experiment (they play the role of
# pre-trained task weights), so they hang off a fixed seed instead of the
# per-run spec seed.
CLASS_MEAN_SEED = 0xC1A55

BLOCK_SIDE = 8  # PGM tiling is 8x8 -> n=64


@dataclass(frozen=True)
class SourceBlock:
    """One fixed-length sample vector, optionally labelled with a class index."""

    samples: np.ndarray
    label: Optional[int] = None


@dataclass(frozen=True)
class SourceSpec:
    kind: str = "gauss_markov"  # gauss_markov | class_mixture | image_blocks
    n: int = 64
    rho: float = 0.0
    class_count: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.n < 1:
            raise ParameterError(f"block length must be >= 1, got {self.n}")
        if self.kind == "gauss_markov" and not (0.0 <= self.rho < 1.0):
            raise ParameterError(f"rho must lie in [0, 1), got {self.rho}")
        if self.kind == "class_mixture":
            if self.class_count < 1:
                raise ParameterError("class_count must be >= 1")
            if self.class_count > self.n:
                raise ParameterError(
                    f"cannot build {self.class_count} orthogonal class means in "
                    f"dimension {self.n}"
                )


def _block_rng(seed: int, block_index: int) -> np.random.Generator:
    return np.random.default_rng((seed, block_index))


@lru_cache(maxsize=8)
def class_means(n: int, class_count: int) -> np.ndarray:
    """K orthogonal class-mean rows of norm sqrt(n)/2, fixed for all runs."""
    if class_count > n:
        raise ParameterError(
            f"cannot build {class_count} orthogonal class means in dimension {n}"
        )
    rng = np.random.default_rng(CLASS_MEAN_SEED)
    raw = rng.standard_normal((n, n))
    q, r = np.linalg.qr(raw)
    # Fix the QR sign convention so the basis is unambiguous.
    q = q * np.sign(np.diag(r))
    means = q[:, :class_count].T * (0.5 * np.sqrt(n))
    means.setflags(write=False)
    return means


def gen_gauss_markov(spec: SourceSpec, block_index: int = 0) -> SourceBlock:
    """AR(1) block: x[i] = rho*x[i-1] + sqrt(1-rho^2)*w[i], unit marginal variance."""
    if spec.kind != "gauss_markov":
        raise ParameterError(f"spec.kind is {spec.kind!r}, expected 'gauss_markov'")
    spec.validate()
    rng = _block_rng(spec.seed, block_index)
    w = rng.standard_normal(spec.n)
    if spec.rho == 0.0:
        return SourceBlock(samples=w)
    x = np.empty(spec.n)
    x[0] = w[0]  # stationary start keeps the marginal variance at 1
    scale = np.sqrt(1.0 - spec.rho**2)
    for i in range(1, spec.n):
        x[i] = spec.rho * x[i - 1] + scale * w[i]
    return SourceBlock(samples=x)


def gen_class_mixture(
    spec: SourceSpec, block_index: int = 0, noise_std: float = 1.0
) -> SourceBlock:
    """Draw a uniform class label and emit its mean vector plus white noise.

    noise_std is a test hook; the production mixture uses unit noise.
    """
    if spec.kind != "class_mixture":
        raise ParameterError(f"spec.kind is {spec.kind!r}, expected 'class_mixture'")
    spec.validate()
    means = class_means(spec.n, spec.class_count)
    rng = _block_rng(spec.seed, block_index)
    label = int(rng.integers(spec.class_count))
    samples = means[label] + noise_std * rng.standard_normal(spec.n)
    return SourceBlock(samples=samples, label=label)


def gen_block(spec: SourceSpec, block_index: int = 0) -> SourceBlock:
    """Dispatch on spec.kind (image streams are built via load_pgm instead)."""
    if spec.kind == "gauss_markov":
        return gen_gauss_markov(spec, block_index)
    if spec.kind == "class_mixture":
        return gen_class_mixture(spec, block_index)
    raise ParameterError(f"cannot generate blocks for source kind {spec.kind!r}")


def pixel_to_sample(p: np.ndarray) -> np.ndarray:
    return 2.0 * p / 255.0 - 1.0


def sample_to_pixel(s: np.ndarray) -> np.ndarray:
    return np.rint((np.asarray(s) + 1.0) * 127.5).astype(np.int64)


def _parse_pgm_header(data: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, data_offset) for a binary 'P5' file."""
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        return data[start:pos]

    if next_token() != b"P5":
        raise FormatError("not a binary PGM (magic != P5)")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise FormatError(f"malformed PGM header: {exc}") from None
    if width < 1 or height < 1:
        raise FormatError(f"bad PGM dimensions {width}x{height}")
    return width, height, maxval, pos + 1  # single whitespace before raster


def load_pgm(path) -> list[SourceBlock]:
    """Tile a maxval-255 binary PGM into zero-padded 8x8 blocks, row-major."""
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, maxval, offset = _parse_pgm_header(data)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    raster = np.frombuffer(data, dtype=np.uint8, offset=offset)
    if raster.size < width * height:
        raise FormatError(
            f"PGM raster too short: {raster.size} bytes for {width}x{height}"
        )
    image = raster[: width * height].reshape(height, width)

    by = -(-height // BLOCK_SIDE)
    bx = -(-width // BLOCK_SIDE)
    padded = np.zeros((by * BLOCK_SIDE, bx * BLOCK_SIDE))
    padded[:height, :width] = pixel_to_sample(image.astype(np.float64))

    blocks = []
    for r in range(by):
        for c in range(bx):
            tile = padded[
                r * BLOCK_SIDE : (r + 1) * BLOCK_SIDE,
                c * BLOCK_SIDE : (c + 1) * BLOCK_SIDE,
            ]
            blocks.append(SourceBlock(samples=tile.reshape(-1).copy()))
    return blocks
