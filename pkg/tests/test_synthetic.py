import numpy as np

from weakcrack.data import load_image, load_mask, scan_directory
from weakcrack.synthetic import generate_corpus, make_crack, make_road, \
    value_noise


def test_value_noise_shape_and_range():
    rng = np.random.default_rng(0)
    for cells in (2, 4, 8):
        v = value_noise(rng, 24, cells)
        assert v.shape == (24, 24)
        assert 0.0 <= v.min() and v.max() <= 1.0


def test_make_images_deterministic():
    a, ma = make_crack(np.random.default_rng(4), 32)
    b, mb = make_crack(np.random.default_rng(4), 32)
    assert np.array_equal(a, b) and np.array_equal(ma, mb)
    r1 = make_road(np.random.default_rng(4), 32)
    r2 = make_road(np.random.default_rng(4), 32)
    assert np.array_equal(r1, r2)


def test_crack_is_dark_thin_stroke():
    rng = np.random.default_rng(1)
    for _ in range(5):
        img, mask = make_crack(rng, 48)
        assert img.shape == (48, 48, 3) and mask.shape == (48, 48)
        assert 0.0 <= img.min() and img.max() <= 1.0
        on = mask.astype(bool)
        assert 1 <= on.sum() <= 48 * 48 * 0.15  # thin structure, not a blob
        # stroke pixels are darker than the surrounding texture
        assert img[on].mean() < img[~on].mean() - 0.1


def test_corpus_layout(corpus_dir):
    counts_train = scan_directory(corpus_dir, "train").class_counts
    counts_test = scan_directory(corpus_dir, "test").class_counts
    assert counts_train == (6, 6)
    assert counts_test == (3, 3)
    test = scan_directory(corpus_dir, "test")
    for s in test.samples:
        mask = load_mask(corpus_dir / s.mask)
        if s.label == 1:
            assert mask.sum() >= 1
        else:
            assert mask.sum() == 0
        img = load_image(corpus_dir / s.path)
        assert img.shape == (32, 32, 3)


def test_corpus_regeneration_identical(tmp_path):
    generate_corpus(tmp_path / "x", n_train=4, n_test=2, size=16, seed=3)
    generate_corpus(tmp_path / "y", n_train=4, n_test=2, size=16, seed=3)
    xs = sorted(p.relative_to(tmp_path / "x") for p in (tmp_path / "x").rglob("*.png"))
    ys = sorted(p.relative_to(tmp_path / "y") for p in (tmp_path / "y").rglob("*.png"))
    assert xs == ys
    for rel in xs:
        assert (tmp_path / "x" / rel).read_bytes() == (tmp_path / "y" / rel).read_bytes()
