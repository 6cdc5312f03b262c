import numpy as np
import pytest
from hypothesis import given, strategies as st

from ulab.rng import as_generator, stream

names = st.lists(st.one_of(st.integers(0, 2 ** 31), st.text(max_size=8)), max_size=4)


@given(st.integers(0, 2 ** 64 - 1), names)
def test_stream_reproducible(seed, ns):
    a = stream(seed, *ns).standard_normal(5)
    b = stream(seed, *ns).standard_normal(5)
    assert np.array_equal(a, b)


def test_creation_order_irrelevant():
    a1 = stream(3, "a").random(4)
    b1 = stream(3, "b").random(4)
    b2 = stream(3, "b").random(4)
    a2 = stream(3, "a").random(4)
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


def test_distinct_names_distinct_streams():
    draws = {tuple(stream(7, *n).random(3)) for n in [(), ("a",), ("b",), (1,), ("1",), ("a", 0), ("a", 1)]}
    assert len(draws) == 7


def test_negative_id_rejected():
    with pytest.raises(ValueError):
        stream(0, -1)


def test_as_generator():
    g = stream(1)
    assert as_generator(g) is g
    assert np.array_equal(as_generator(5).random(3), stream(5).random(3))
    with pytest.raises(ValueError):
        as_generator(None)
