"""Randomized property checks driven by hypothesis."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from picanet import checkpoint
from picanet.attention import attention_positions, global_attend, local_attend
from picanet.errors import CheckpointError
from picanet.metrics import f_measure, mae, pr_curve
from picanet.tensor import Tensor

SETTINGS = settings(max_examples=60, deadline=None)

names = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12)
arrays = st.one_of(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4)),
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4)),
)


@SETTINGS
@given(st.dictionaries(names, arrays, max_size=5))
def test_checkpoint_round_trip(state):
    blob = checkpoint.encode(state)
    back = checkpoint.decode(blob)
    assert list(back) == list(state)
    for name, arr in state.items():
        assert back[name].dtype == arr.dtype and back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()
    assert checkpoint.encode(back) == blob


@SETTINGS
@given(st.dictionaries(names, arrays, min_size=1, max_size=3), st.data())
def test_checkpoint_any_truncation_is_rejected(state, data):
    blob = checkpoint.encode(state)
    cut = data.draw(st.integers(0, len(blob) - 1))
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:cut])


def _pair(draw_shape):
    return st.tuples(
        hnp.arrays(np.float64, draw_shape, elements=st.floats(0, 1)),
        hnp.arrays(np.bool_, draw_shape),
    )


@SETTINGS
@given(_pair((6, 7)))
def test_pr_curve_shape_properties(pair):
    pred, gt = pair
    gt = gt.astype(float)
    gt[0, 0] = 1
    precision, recall = pr_curve(pred, gt)
    assert recall[0] == 1.0
    assert np.all(np.diff(recall) <= 0)
    assert np.all((precision >= 0) & (precision <= 1))
    f = f_measure(precision, recall)
    assert np.all(f <= np.maximum(precision, recall) + 1e-12)
    assert np.all(f >= np.minimum(precision, recall) - 1e-12)
    assert 0 <= mae(pred, gt) <= 1


@st.composite
def attend_case(draw):
    H, W = draw(st.integers(1, 7)), draw(st.integers(1, 7))
    grid = (draw(st.sampled_from([1, 3, 5])), draw(st.sampled_from([1, 3, 5])))
    d = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**32 - 1))
    return H, W, grid, d, seed


@SETTINGS
@given(attend_case(), st.sampled_from(["global", "local"]))
def test_attend_constant_features_give_in_map_mass(case, kind):
    H, W, grid, d, seed = case
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(1, grid[0] * grid[1], H, W))
    a /= a.sum(axis=1, keepdims=True)
    ones = Tensor(np.ones((1, 1, H, W)), dtype=np.float64)
    if kind == "global":
        out = global_attend(ones, Tensor(a, dtype=np.float64), attention_positions(W, H, grid, d)).data
    else:
        out = local_attend(ones, Tensor(a, dtype=np.float64), grid, d).data
    # attending to an all-ones map returns the weight mass that lands inside the map
    assert np.all(out <= 1 + 1e-12) and np.all(out >= -1e-12)
    if H >= (grid[1] - 1) * d + 1 and W >= (grid[0] - 1) * d + 1 and kind == "global":
        np.testing.assert_allclose(out, 1.0, atol=1e-12)
