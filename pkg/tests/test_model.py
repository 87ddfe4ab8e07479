import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aida import tensor as T
from aida.errors import DegenerateEmbeddingError, FormatError, ShapeError
from aida.model import (
    ModelConfig,
    check_params,
    checkpoint_bytes,
    checkpoint_from_bytes,
    classify,
    embed,
    embed_numpy,
    extract_features,
    forward,
    init_params,
    l2_normalize,
    load_checkpoint,
    logits,
    save_checkpoint,
)
from aida.tensor import finite_diff_check

CFG = ModelConfig(feature_dim=5, hidden_dims=(7, 6), embed_dim=4, num_classes=3)


@pytest.fixture
def params():
    return init_params(CFG, 0)


def test_parameter_shapes_chain(params):
    assert params["backbone.0.weight"].shape == (5, 7)
    assert params["backbone.1.weight"].shape == (7, 6)
    assert params["head.weight"].shape == (6, 4)
    assert params["classifier.weight"].shape == (4, 3)
    assert all(np.all(params[k] == 0) for k in params if k.endswith("bias"))
    check_params(params)


def test_check_params_rejects_bad_chain(params):
    bad = dict(params, **{"head.weight": np.zeros((5, 4))})
    with pytest.raises(ShapeError):
        check_params(bad)
    nan = dict(params, **{"head.bias": np.full(4, np.nan)})
    with pytest.raises(ShapeError):
        check_params(nan)


def test_zero_weights_give_zero_features(params):
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    assert np.all(extract_features(zero, np.ones((2, 5))).data == 0)
    assert np.all(embed(zero, np.ones((2, 6))).data == 0)


def test_identity_layer_passes_input_through():
    p = {"backbone.0.weight": np.eye(3), "backbone.0.bias": np.zeros(3), "head.weight": np.eye(3), "head.bias": np.zeros(3)}
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(extract_features(p, x).data, x)
    np.testing.assert_array_equal(embed(p, x).data, x)


def test_embed_matches_reference(params, rng):
    f = rng.normal(size=(3, 6))
    ref = f @ params["head.weight"] + params["head.bias"]
    np.testing.assert_allclose(embed(params, f).data, ref, atol=1e-12)


def test_input_shape_checked(params):
    with pytest.raises(ShapeError):
        extract_features(params, np.ones((2, 4)))
    with pytest.raises(ShapeError):
        embed(params, np.ones((2, 5)))
    with pytest.raises(ShapeError):
        logits(params, np.ones((2, 3)))


def test_l2_normalize_cases():
    np.testing.assert_allclose(l2_normalize(np.array([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)
    np.testing.assert_array_equal(l2_normalize(np.array([[0.0, 1.0]])).data, [[0.0, 1.0]])
    with pytest.raises(DegenerateEmbeddingError):
        l2_normalize(np.array([[1.0, 1.0], [0.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_normalized_rows_have_unit_norm(seed):
    z = np.random.default_rng(seed).normal(size=(6, 4))
    assert np.abs(np.linalg.norm(l2_normalize(z).data, axis=1) - 1).max() <= 1e-12


def test_zero_classifier_gives_uniform_posteriors(params):
    p = dict(params, **{"classifier.weight": np.zeros((4, 3))})
    np.testing.assert_allclose(classify(p, np.ones((2, 4)) / 2).data, np.full((2, 3), 1 / 3), atol=1e-15)


def test_dominant_logit_saturates(params):
    p = dict(params, **{"classifier.weight": np.zeros((4, 3)), "classifier.bias": np.array([0.0, 100.0, 0.0])})
    assert classify(p, np.ones((1, 4)) / 2).data[0, 1] >= 1 - 1e-12


def test_posteriors_sum_to_one(params, rng):
    _, _, _, p = forward(params, rng.normal(size=(5, 5)))
    assert np.abs(p.data.sum(axis=1) - 1).max() <= 1e-12


def test_argmax_invariant_to_logit_shift(params, rng):
    z = l2_normalize(rng.normal(size=(8, 4))).data
    shifted = dict(params, **{"classifier.bias": params["classifier.bias"] + 7.25})
    assert np.array_equal(classify(params, z).data.argmax(axis=1), classify(shifted, z).data.argmax(axis=1))


def test_classify_on_raw_flag(params, rng):
    x = rng.normal(size=(3, 5))
    _, z, z_hat, p_norm = forward(params, x)
    _, _, _, p_raw = forward(params, x, classify_on_raw=True)
    np.testing.assert_allclose(p_norm.data, classify(params, z_hat).data)
    np.testing.assert_allclose(p_raw.data, classify(params, z).data)


def test_full_model_gradients(params, rng):
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 3))
    fn = lambda P: T.sum_(T.mul(forward(P, x)[3], w))  # noqa: E731
    assert finite_diff_check(fn, params) < 1e-4


def test_embed_numpy_matches_forward(params, rng):
    x = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(embed_numpy(params, x), forward(params, x)[2].data)


def test_checkpoint_round_trip_is_bit_exact(params, tmp_path):
    params = dict(params, scalar=np.array(0.1))
    path = tmp_path / "m.aida"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert set(back) == set(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_layout(params):
    buf = checkpoint_bytes({"a": np.arange(6.0).reshape(2, 3)})
    assert buf[:8] == b"AIDACKPT"
    assert int.from_bytes(buf[8:12], "little") == 1
    assert int.from_bytes(buf[12:16], "little") == 1
    assert int.from_bytes(buf[16:20], "little") == 1 and buf[20:21] == b"a"
    assert int.from_bytes(buf[21:25], "little") == 2
    assert np.frombuffer(buf[41:], "<f8").tolist() == list(range(6))


@pytest.mark.parametrize("mutate", [lambda b: b"BADMAGIC" + b[8:], lambda b: b[:-3], lambda b: b + b"\0"])
def test_corrupt_checkpoints_rejected(params, mutate):
    with pytest.raises(FormatError):
        checkpoint_from_bytes(mutate(checkpoint_bytes(params)))
