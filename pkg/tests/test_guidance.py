import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dift.guidance import apply_vrg
from dift.oracle import LogitRow


def dense(values, position=0):
    return LogitRow(position=position, logits=np.asarray(values, dtype=np.float64))


def test_zero_scale_is_identity_on_cond():
    cond = dense([1.5, -2.25, 0.125])
    uncond = dense([9.0, 9.0, 9.0])
    out = apply_vrg(cond, uncond, 0.0)
    assert (out.logits == cond.logits).all()
    assert out.position == cond.position


def test_hand_evaluated_combination():
    out = apply_vrg(dense([2.0, -1.0]), dense([0.0, 0.0]), 0.5)
    np.testing.assert_array_equal(out.logits, [3.0, -1.5])


def test_equal_rows_pass_through_unchanged():
    values = [0.25, -3.5, 1.0, 2.75]
    for scale in (0.0, 0.5, 1.0, 4.0):
        out = apply_vrg(dense(values), dense(values), scale)
        assert (out.logits == np.asarray(values)).all()


def test_position_mismatch():
    with pytest.raises(ValueError):
        apply_vrg(dense([1.0, 2.0], position=0), dense([1.0, 2.0], position=1), 0.5)


def test_width_mismatch():
    with pytest.raises(ValueError):
        apply_vrg(dense([1.0, 2.0]), dense([1.0, 2.0, 3.0]), 0.5)


def test_negative_scale():
    with pytest.raises(ValueError):
        apply_vrg(dense([1.0, 2.0]), dense([0.0, 0.0]), -0.1)


def test_dense_sparse_mix_rejected():
    sparse = LogitRow(
        position=0, logits=np.array([1.0, 2.0]), token_ids=np.array([0, 1])
    )
    with pytest.raises(ValueError):
        apply_vrg(dense([1.0, 2.0]), sparse, 0.5)


def test_sparse_support_must_match():
    a = LogitRow(position=0, logits=np.array([1.0, 2.0]), token_ids=np.array([0, 1]))
    b = LogitRow(position=0, logits=np.array([1.0, 2.0]), token_ids=np.array([0, 2]))
    with pytest.raises(ValueError):
        apply_vrg(a, b, 0.5)


def test_sparse_rows_combine_on_shared_support():
    a = LogitRow(
        position=2, logits=np.array([2.0, -1.0]), token_ids=np.array([3, 5]),
        tail_mass=0.1,
    )
    b = LogitRow(
        position=2, logits=np.array([0.0, 0.0]), token_ids=np.array([3, 5]),
        tail_mass=0.2,
    )
    out = apply_vrg(a, b, 0.5)
    np.testing.assert_array_equal(out.logits, [3.0, -1.5])
    np.testing.assert_array_equal(out.token_ids, [3, 5])
    assert out.tail_mass == a.tail_mass


@given(
    st.integers(2, 12),
    st.floats(0.0, 4.0, allow_nan=False),
    st.integers(0, 2**32 - 1),
)
@settings(max_examples=200, deadline=None)
def test_linearity_within_one_ulp(width, scale, seed):
    rng = np.random.default_rng(seed)
    cond = rng.normal(0, 3, width)
    uncond = rng.normal(0, 3, width)
    out = apply_vrg(dense(cond), dense(uncond), scale).logits
    if scale == 0.0:
        np.testing.assert_array_equal(out, cond)
        return
    reference = uncond + (scale + 1.0) * (cond - uncond)
    tolerance = np.spacing(np.maximum(np.abs(out), np.abs(reference)))
    assert (np.abs(out - reference) <= tolerance).all()


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_two_token_argmax_never_flips_with_growing_scale(seed):
    # If the conditional row prefers token a and the cond-uncond gap is larger
    # at a than at b, raising the scale only widens a's lead.
    rng = np.random.default_rng(seed)
    cond = rng.normal(0, 2, 2)
    a = int(cond.argmax())
    b = 1 - a
    gap_low, gap_high = np.sort(rng.normal(0, 2, 2))
    uncond = np.empty(2)
    uncond[a] = cond[a] - gap_high
    uncond[b] = cond[b] - gap_low
    if not cond[a] - uncond[a] > cond[b] - uncond[b]:
        return
    for scale in np.linspace(0.0, 4.0, 9):
        guided = apply_vrg(dense(cond), dense(uncond), float(scale)).logits
        assert int(guided.argmax()) == a


def test_default_scale_is_half():
    from dift.core import DecodeConfig

    assert DecodeConfig(length=4, steps=2).s_vrg == 0.5
