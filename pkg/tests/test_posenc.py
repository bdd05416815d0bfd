import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dattn.posenc import PositionMode, RopeParams, assign_positions, rope_apply
from dattn.tensor import ConfigError, Rng


def test_biased_layout():
    p = assign_positions(7, 3, "biased")
    assert p.visual_positions == tuple(range(7)) and p.textual_positions == (7, 8, 9)


def test_debiased_layout():
    p = assign_positions(7, 3, PositionMode.DEBIASED)
    assert p.visual_positions == (0,) * 7 and p.textual_positions == (7, 8, 9)
    assert p.v2v_positions == tuple(range(7))


def test_no_visual_tokens():
    p = assign_positions(0, 2, "debiased")
    assert p.visual_positions == () and p.textual_positions == (0, 1)


@pytest.mark.parametrize("n,m", [(-1, 2), (3, 0)])
def test_bad_counts(n, m):
    with pytest.raises(ConfigError):
        assign_positions(n, m)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 50), st.integers(1, 50), st.sampled_from(list(PositionMode)))
def test_assignment_invariants(n, m, mode):
    p = assign_positions(n, m, mode)
    assert len(p.visual_positions) == n and len(p.textual_positions) == m
    assert all(b > a for a, b in zip(p.textual_positions, p.textual_positions[1:]))
    if mode is PositionMode.DEBIASED:
        assert len(set(p.visual_positions)) <= 1


def test_odd_head_dim_rejected():
    with pytest.raises(ConfigError):
        RopeParams(7)
    with pytest.raises(ConfigError):
        rope_apply(np.zeros((2, 1, 6)), [0, 1], RopeParams(8))


def test_position_zero_is_identity():
    x = Rng(0).normal((3, 2, 8))
    np.testing.assert_array_equal(rope_apply(x, [0, 0, 0], RopeParams(8)), x)


def test_pair_norms_preserved():
    x = Rng(1).normal((5, 3, 16))
    y = rope_apply(x, [0, 3, 17, 512, 4095], RopeParams(16))
    pair = lambda a: np.hypot(a[..., 0::2], a[..., 1::2])  # noqa: E731
    np.testing.assert_allclose(pair(y), pair(x), rtol=0, atol=1e-6)


def test_matches_pairwise_rotation():
    from reference import rotate

    x = Rng(2).normal((2, 1, 8))
    y = rope_apply(x, [5, 123], RopeParams(8, base=500.0))
    np.testing.assert_allclose(y[1, 0], rotate(x[1, 0], 123, base=500.0), atol=1e-14)


def _shifted_dot(q, k, p1, p2, s):
    params = RopeParams(q.shape[-1])
    qa = rope_apply(q[None, None], [p1], params)[0, 0]
    ka = rope_apply(k[None, None], [p2], params)[0, 0]
    qb = rope_apply(q[None, None], [p1 + s], params)[0, 0]
    kb = rope_apply(k[None, None], [p2 + s], params)[0, 0]
    return float(qa @ ka), float(qb @ kb)


def test_relative_position_seed_7():
    rng = Rng(7)
    q, k = rng.normal((16,)), rng.normal((16,))
    a, b = _shifted_dot(q, k, 11, 40, 300)
    assert abs(a - b) <= 1e-5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 4096), st.integers(0, 4096), st.integers(0, 1024))
def test_relative_position_property(seed, p1, p2, s):
    rng = Rng(seed)
    q, k = rng.normal((32,)), rng.normal((32,))
    a, b = _shifted_dot(q, k, p1, p2, s)
    assert abs(a - b) <= 1e-5 * max(1.0, abs(a))


def test_dtype_preserved():
    x = Rng(3).normal((2, 1, 4), np.float32)
    assert rope_apply(x, [1, 2], RopeParams(4)).dtype == np.float32
