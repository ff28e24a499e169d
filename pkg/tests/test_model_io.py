from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from mmlens.model_io import MODEL_TAG, ModelFormatError, dumps_model, load_model, loads_model, save_model
from mmlens.network import default_architecture, embed, forward, forward_with_trace, mlp

FIXTURES = Path(__file__).parent / "fixtures"


def test_round_trip_is_bit_exact(tmp_path):
    net = default_architecture(seed=11)
    rng = np.random.default_rng(0)
    for p in net.parameters():
        p += rng.standard_normal(p.shape) * 1e-3  # non-trivial mantissas, nonzero biases
    save_model(net, tmp_path / "m.txt")
    back = load_model(tmp_path / "m.txt")
    for a, b in zip(net.parameters(), back.parameters()):
        assert a.tobytes() == b.tobytes()
    X = rng.standard_normal((100, 216))
    assert np.array_equal(forward(net, X), forward(back, X))
    assert (back.embedding_index, back.expansion_depth) == (net.embedding_index, net.expansion_depth)
    assert dumps_model(back) == dumps_model(net)


@given(st.lists(st.integers(1, 5), min_size=1, max_size=3), st.integers(0, 1000))
def test_round_trip_random_mlps(hidden, seed):
    net = mlp([3] + hidden + [1], seed=seed)
    assert dumps_model(loads_model(dumps_model(net))) == dumps_model(net)


def test_hand_written_fixture_evaluates():
    net = load_model(FIXTURES / "hand_model.txt")
    for x, out, emb, pattern in oracles.HAND_MODEL_CASES:
        assert forward(net, x) == out
        assert embed(net, x).tolist() == emb
        _, tr = forward_with_trace(net, np.array(x))
        assert tr.patterns[3].tolist() == pattern


def test_mismatched_dims_reported_with_line():
    with pytest.raises(ModelFormatError) as e:
        load_model(FIXTURES / "bad_dims_model.txt")
    assert e.value.line == 7
    assert "weights" in str(e.value)


def test_missing_tag():
    with pytest.raises(ModelFormatError, match="line 1"):
        loads_model("input_length 2\n")


def test_truncated_file():
    text = dumps_model(mlp([2, 2, 1]))
    with pytest.raises(ModelFormatError):
        loads_model(text.replace("end\n", ""))


def test_bad_float_names_field():
    text = dumps_model(mlp([2, 2, 1])).replace("bias 0.0 0.0", "bias 0.0 zero", 1)
    with pytest.raises(ModelFormatError, match="bias"):
        loads_model(text)


def test_unreadable_path(tmp_path):
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "missing.txt")


def test_tag_constant():
    assert dumps_model(mlp([2, 1])).splitlines()[0] == MODEL_TAG == "mmlens-model/1"
