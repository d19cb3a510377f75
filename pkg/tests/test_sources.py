import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from datosc.errors import FormatError, ParameterError
from datosc.sources import (
    SourceSpec,
    class_means,
    gen_class_mixture,
    gen_gauss_markov,
    load_pgm,
    sample_to_pixel,
)


def test_iid_case_unit_variance():
    spec = SourceSpec(kind="gauss_markov", n=4096, rho=0.0, seed=1)
    block = gen_gauss_markov(spec)
    assert 0.95 <= np.var(block.samples) <= 1.05


def test_lag1_autocorrelation_matches_rho():
    spec = SourceSpec(kind="gauss_markov", n=8192, rho=0.9, seed=7)
    acc = []
    for t in range(100):
        x = gen_gauss_markov(spec, t).samples
        x = x - x.mean()
        acc.append(np.dot(x[:-1], x[1:]) / np.dot(x, x))
    assert 0.88 <= np.mean(acc) <= 0.92


def test_same_seed_bit_identical():
    spec = SourceSpec(kind="gauss_markov", n=256, rho=0.5, seed=99)
    a = gen_gauss_markov(spec, 3).samples
    b = gen_gauss_markov(spec, 3).samples
    assert np.array_equal(a, b)
    c = gen_gauss_markov(spec, 4).samples
    assert not np.array_equal(a, c)


def test_marginal_mean_near_zero():
    spec = SourceSpec(kind="gauss_markov", n=1000, rho=0.8, seed=5)
    total = np.concatenate([gen_gauss_markov(spec, t).samples for t in range(120)])
    assert abs(total.mean()) <= 0.02
    assert total.size >= 10**5


def test_rho_out_of_range_rejected():
    with pytest.raises(ParameterError):
        gen_gauss_markov(SourceSpec(kind="gauss_markov", n=8, rho=1.0, seed=0))
    with pytest.raises(ParameterError):
        gen_gauss_markov(SourceSpec(kind="gauss_markov", n=8, rho=-0.1, seed=0))


def test_class_means_are_orthogonal_with_fixed_norm():
    means = class_means(64, 4)
    gram = means @ means.T
    assert np.allclose(np.diag(gram), 64 * 0.25, atol=1e-9)
    off = gram - np.diag(np.diag(gram))
    assert np.max(np.abs(off)) < 1e-9
    # constants are independent of any stream seed
    assert np.array_equal(means, class_means(64, 4))


def test_single_class_always_label_zero():
    spec = SourceSpec(kind="class_mixture", n=16, class_count=1, seed=3)
    assert all(gen_class_mixture(spec, t).label == 0 for t in range(20))


def test_too_many_classes_rejected():
    with pytest.raises(ParameterError):
        gen_class_mixture(SourceSpec(kind="class_mixture", n=4, class_count=5, seed=0))


def test_noiseless_mixture_classifies_exactly():
    spec = SourceSpec(kind="class_mixture", n=64, class_count=4, seed=11)
    means = class_means(64, 4)
    for t in range(50):
        block = gen_class_mixture(spec, t, noise_std=0.0)
        d2 = np.sum((means - block.samples) ** 2, axis=1)
        assert int(np.argmin(d2)) == block.label


def _mixture_accuracy_oracle(n: int, k_classes: int) -> float:
    """Exact nearest-centroid accuracy for orthogonal equal-norm means under
    unit noise: P(correct) = E_t[Phi(m + t)^(K-1)], m = 0.5*sqrt(n)."""
    m = 0.5 * np.sqrt(n)
    val, _ = quad(
        lambda t: norm.pdf(t) * norm.cdf(m + t) ** (k_classes - 1), -12, 12
    )
    return val


def test_mixture_accuracy_matches_integral_oracle():
    spec = SourceSpec(kind="class_mixture", n=64, class_count=4, seed=21)
    means = class_means(64, 4)
    hits = 0
    trials = 10_000
    for t in range(trials):
        block = gen_class_mixture(spec, t)
        d2 = np.sum((means - block.samples) ** 2, axis=1)
        hits += int(np.argmin(d2) == block.label)
    expected = _mixture_accuracy_oracle(64, 4)
    assert abs(hits / trials - expected) <= 0.02


# ---------------------------------------------------------------------------
# PGM ingestion
# ---------------------------------------------------------------------------

def _write_pgm(path, width, height, pixels, maxval=255, magic=b"P5"):
    with open(path, "wb") as fh:
        fh.write(magic + b"\n# comment\n")
        fh.write(f"{width} {height}\n{maxval}\n".encode())
        fh.write(bytes(pixels))


def test_all_zero_image_gives_constant_blocks(tmp_path):
    path = tmp_path / "z.pgm"
    _write_pgm(path, 16, 16, [0] * 256)
    blocks = load_pgm(path)
    assert len(blocks) == 4
    for b in blocks:
        assert np.all(b.samples == -1.0)
        assert b.label is None


def test_single_bright_pixel(tmp_path):
    path = tmp_path / "p.pgm"
    pixels = [0] * 64
    pixels[0] = 255
    _write_pgm(path, 8, 8, pixels)
    (block,) = load_pgm(path)
    assert block.samples[0] == 1.0
    assert np.all(block.samples[1:] == -1.0)


def test_partial_block_zero_padding(tmp_path):
    path = tmp_path / "w.pgm"
    _write_pgm(path, 17, 8, [255] * (17 * 8))
    blocks = load_pgm(path)
    assert len(blocks) == 3
    third = blocks[2].samples.reshape(8, 8)
    assert np.all(third[:, 0] == 1.0)        # the one real column
    assert np.all(third[:, 1:] == 0.0)       # zero-padded sample positions


def test_malformed_header_rejected(tmp_path):
    path = tmp_path / "bad.pgm"
    _write_pgm(path, 8, 8, [0] * 64, magic=b"P2")
    with pytest.raises(FormatError):
        load_pgm(path)


def test_wrong_maxval_rejected(tmp_path):
    path = tmp_path / "m.pgm"
    _write_pgm(path, 8, 8, [0] * 64, maxval=65535)
    with pytest.raises(FormatError):
        load_pgm(path)


def test_truncated_raster_rejected(tmp_path):
    path = tmp_path / "t.pgm"
    _write_pgm(path, 8, 8, [0] * 10)
    with pytest.raises(FormatError):
        load_pgm(path)


def test_pixel_map_round_trips_exactly(tmp_path):
    path = tmp_path / "r.pgm"
    pixels = list(range(256)) * 4  # 32x32 covers every pixel value
    _write_pgm(path, 32, 32, pixels)
    blocks = load_pgm(path)
    grid = np.zeros((32, 32))
    for i, b in enumerate(blocks):
        r, c = divmod(i, 4)
        grid[r * 8 : r * 8 + 8, c * 8 : c * 8 + 8] = b.samples.reshape(8, 8)
    assert np.array_equal(
        sample_to_pixel(grid).reshape(-1), np.array(pixels, dtype=np.int64)
    )
