import numpy as np

from pemma.rng import Rng


def test_same_seed_same_stream():
    np.testing.assert_array_equal(Rng(5, "a").normal(10), Rng(5, "a").normal(10))


def test_keys_separate_streams():
    assert not np.array_equal(Rng(5, "a").normal(10), Rng(5, "b").normal(10))
    assert not np.array_equal(Rng(5).normal(10), Rng(6).normal(10))


def test_child_is_independent_of_parent_consumption():
    parent = Rng(1)
    before = parent.child("x").normal(4)
    parent.normal(100)
    np.testing.assert_array_equal(parent.child("x").normal(4), before)
    np.testing.assert_array_equal(Rng(1, "x").normal(4), before)


def test_dtype_and_scale():
    x = Rng(0).normal((2000,), std=0.5, mean=3.0, dtype=np.float32)
    assert x.dtype == np.float32
    assert abs(x.mean() - 3.0) < 0.05 and abs(x.std() - 0.5) < 0.05


def test_choice_and_permutation():
    r = Rng(2)
    assert sorted(r.permutation(6).tolist()) == list(range(6))
    assert set(r.choice(3, size=50).tolist()) <= {0, 1, 2}
