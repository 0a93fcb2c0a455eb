import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from plants import ndtensor as nt
from plants.patching import (
    multi_segment,
    n_usable,
    pooled_windows,
    segment,
    segment_batch,
    unsegment,
    usable_mask,
)
from plants.periodicity import fixed_windows


@pytest.mark.parametrize("L,w,M,pad", [(10, 3, 4, 2), (12, 4, 3, 0), (10, 16, 1, 6)])
def test_layout_examples(L, w, M, pad):
    view = segment(np.arange(L, dtype=float), w)
    assert (view.count, view.pad_len) == (M, pad)
    assert view.patches.shape == (M, w, 1)


def test_multi_segment_examples():
    x = np.random.default_rng(0).normal(size=(100, 2))
    a, b = multi_segment(x, fixed_windows([25, 10], 100))
    assert (a.window, a.count, a.pad_len) == (25, 4, 0)
    assert (b.window, b.count, b.pad_len) == (10, 10, 0)
    (c,) = multi_segment(x, fixed_windows([7], 100))
    assert (c.count, c.pad_len) == (15, 5)
    with pytest.raises(ValueError):
        multi_segment(x, None)


def test_non_positive_window_rejected():
    with pytest.raises(ValueError):
        segment(np.ones(5), 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 80), st.integers(1, 40), st.integers(1, 3), st.integers(0, 999))
def test_roundtrip_padding_and_prefix(L, w, C, seed):
    x = np.random.default_rng(seed).normal(size=(L, C))
    view = segment(x, w)
    assert view.count * w == L + view.pad_len and 0 <= view.pad_len < w
    assert np.array_equal(unsegment(view), x)
    flat = view.patches.reshape(-1, C)
    assert np.all(flat[L:] == 0.0)
    other = segment(x, max(1, w // 2 + 1)).patches.reshape(-1, C)
    assert np.array_equal(flat[:L], other[:L])


def test_masking_rule():
    # L=10, w=4: last window has 2 valid of 4 -> exactly half padding -> kept
    assert usable_mask(10, 4).tolist() == [True, True, True]
    # L=9, w=4: last window 1 valid of 4 -> dropped
    assert usable_mask(9, 4).tolist() == [True, True, False]
    assert n_usable(9, 4) == 2
    # a single short window is dropped too
    assert n_usable(3, 16) == 0


def test_segment_batch_matches_segment():
    x = np.random.default_rng(1).normal(size=(3, 11, 2))
    batched = segment_batch(x, 4)
    for i in range(3):
        assert np.array_equal(batched[i], segment(x[i], 4).patches)


def test_pooled_windows_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(2, 11, 3))
    got = pooled_windows(nt.Tensor(emb), 4).data
    for b in range(2):
        for m, (start, n) in enumerate([(0, 4), (4, 4), (8, 3)]):
            want = oracles.pooled_mean(emb[b, start : start + n].tolist(), n)
            np.testing.assert_allclose(got[b, m], want, atol=1e-12)
    assert pooled_windows(nt.Tensor(emb), 4, 2).shape == (2, 2, 3)
