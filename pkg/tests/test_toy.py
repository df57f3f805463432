import numpy as np

from ganorcon.toy import TOY_SCHEMA, make_toy_splits, render_latent, render_shape


def test_render_is_valid():
    img, mask = render_shape(np.random.default_rng(0), 64)
    assert img.shape == (64, 64, 3) and img.dtype == np.float32
    assert 0 <= img.min() and img.max() <= 1
    assert set(np.unique(mask)) == {0, 1, 2, 3}


def test_scales_with_size():
    _, small = render_shape(np.random.default_rng(1), 32)
    _, big = render_shape(np.random.default_rng(1), 64)
    frac = lambda m, c: (m == c).mean()
    for c in range(4):
        assert abs(frac(small, c) - frac(big, c)) < 0.03


def test_deterministic_splits():
    a, b = make_toy_splits(seed=2, n_unlabeled=3, n_fewshot=2, n_test=5, size=32), \
        make_toy_splits(seed=2, n_unlabeled=3, n_fewshot=2, n_test=5, size=32)
    assert all(np.array_equal(x, y) for x, y in zip(a["unlabeled"], b["unlabeled"]))
    assert all(np.array_equal(x, y) for x, y in zip(a["test"].masks, b["test"].masks))
    assert a["fewshot"].schema == TOY_SCHEMA and len(a["test"]) == 5


def test_latent_rendering():
    i1, m1 = render_latent(7, 32)
    i2, m2 = render_latent(7, 32)
    i3, _ = render_latent(8, 32)
    assert np.array_equal(i1, i2) and np.array_equal(m1, m2) and not np.array_equal(i1, i3)
