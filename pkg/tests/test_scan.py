import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_seq_lab.scan import scan_parallel, scan_sequential


def rel_dev(a, b):
    return np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-12))


def random_instance(rng, batch, length, channels, dtype=np.float64):
    decay = rng.uniform(0.0, 1.0, size=(batch, length, channels)).astype(dtype)
    inputs = rng.standard_normal((batch, length, channels)).astype(dtype)
    h0 = rng.standard_normal((batch, channels)).astype(dtype)
    return decay, inputs, h0


def test_constant_zero_case():
    decay = np.ones((1, 5, 2))
    inputs = np.zeros((1, 5, 2))
    h0 = np.zeros((1, 2))
    assert np.all(scan_sequential(decay, inputs, h0) == 0)
    assert np.all(scan_parallel(decay, inputs, h0) == 0)


def test_two_step_hand_computation():
    decay = np.full((1, 2, 2), 0.5)
    inputs = np.ones((1, 2, 2))
    h0 = np.zeros((1, 2))
    out = scan_sequential(decay, inputs, h0)
    assert np.allclose(out[0, :, 0], [1.0, 1.5])


def test_single_element_matches_and_combine_rule_l2():
    rng = np.random.default_rng(1)
    d, u, h0 = random_instance(rng, 2, 1, 3)
    assert np.allclose(scan_parallel(d, u, h0), scan_sequential(d, u, h0))

    d, u, h0 = random_instance(rng, 1, 2, 3)
    out = scan_parallel(d, u, h0)
    h2 = d[:, 1] * (d[:, 0] * h0 + u[:, 0]) + u[:, 1]
    assert np.allclose(out[:, 1], h2)


@pytest.mark.parametrize("length", [1, 2, 3, 7, 16, 33, 100, 257, 1024])
def test_parallel_equals_sequential_various_lengths(length):
    rng = np.random.default_rng(length)
    d, u, h0 = random_instance(rng, 2, length, 5)
    assert rel_dev(scan_parallel(d, u, h0), scan_sequential(d, u, h0)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_parallel_equals_sequential_property(length, channels, seed):
    rng = np.random.default_rng(seed)
    d, u, h0 = random_instance(rng, 1, length, channels)
    assert rel_dev(scan_parallel(d, u, h0), scan_sequential(d, u, h0)) < 1e-9


def test_bitwise_identical_across_thread_counts():
    rng = np.random.default_rng(7)
    d, u, h0 = random_instance(rng, 2, 1024, 64)
    outs = [scan_parallel(d, u, h0, threads=t) for t in (1, 2, 4, 8)]
    for other in outs[1:]:
        assert np.array_equal(outs[0], other)


def test_combine_is_associative():
    # ((a·b)·c) == (a·(b·c)) for the pair combine, checked via three-element scans
    rng = np.random.default_rng(3)
    d, u, h0 = random_instance(rng, 1, 3, 4)
    da, ua = d[:, 0], u[:, 0]
    db, ub = d[:, 1], u[:, 1]
    dc, uc = d[:, 2], u[:, 2]
    ab = (da * db, ub + db * ua)
    left = (ab[0] * dc, uc + dc * ab[1])
    bc = (db * dc, uc + dc * ub)
    right = (da * bc[0], bc[1] + bc[0] * ua)
    assert np.allclose(left[0], right[0]) and np.allclose(left[1], right[1])


def test_shape_errors():
    with pytest.raises(ValueError):
        scan_sequential(np.ones((1, 4, 2)), np.ones((1, 4, 3)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        scan_parallel(np.ones((1, 4, 2)), np.ones((1, 4, 2)), np.zeros((1, 3)))


def test_float32_agreement_is_looser_but_close():
    rng = np.random.default_rng(11)
    d, u, h0 = random_instance(rng, 1, 512, 8, dtype=np.float32)
    out_p = scan_parallel(d, u, h0)
    out_s = scan_sequential(d, u, h0)
    assert out_p.dtype == np.float32
    assert rel_dev(out_p.astype(np.float64), out_s.astype(np.float64)) < 1e-4
