import numpy as np
import pytest

from impedscope.seeding import substream, subseed


def test_substreams_reproducible():
    a = substream(7, "folds", 0).random(5)
    np.testing.assert_array_equal(a, substream(7, "folds", 0).random(5))


@pytest.mark.parametrize("other", [(8, "folds", 0), (7, "final-folds", 0), (7, "folds", 1)])
def test_substreams_independent(other):
    assert not np.array_equal(substream(7, "folds", 0).random(5), substream(*other).random(5))


def test_subseed_range_and_stability():
    s = subseed(2 ** 64 - 1, "model", 3, 4)
    assert 0 <= s < 2 ** 32 and s == subseed(2 ** 64 - 1, "model", 3, 4)
