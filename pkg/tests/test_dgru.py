import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from falldef import dgru
from falldef.dataset import FALL, NONFALL, NormStats, WindowInstance
from falldef.errors import ModelFormatError, ShapeError
from falldef.numerics import batch_cross_entropy
from conftest import random_model
from oracles import finite_difference_grads, forward_scalar, gru_step_scalar, max_relative_error


def zero_model(hidden=(4,), window=5):
    m = dgru.init_model(0, 3, hidden, window_size=window)
    for _, arr in m.named_parameters():
        arr[...] = 0.0
    return m


def mean_loss(model, X, targets):
    probs, _ = dgru.forward_batch(model, X)
    return float(np.mean(batch_cross_entropy(probs, np.asarray(targets))))


# -- cell step ---------------------------------------------------------------


def test_cell_zero_params_zero_state():
    layer = zero_model().layers[0]
    h, tr = dgru.gru_cell_step(np.array([0.3, -1.0, 2.0]), np.zeros(4), layer)
    np.testing.assert_array_equal(h, np.zeros(4))
    np.testing.assert_array_equal(tr.z, np.full(4, 0.5))
    np.testing.assert_array_equal(tr.h_cand, np.zeros(4))


def test_cell_zero_params_halves_state():
    layer = zero_model().layers[0]
    v = np.array([1.0, -2.0, 0.5, 3.0])
    h, _ = dgru.gru_cell_step(np.array([0.3, -1.0, 2.0]), v, layer)
    np.testing.assert_array_equal(h, 0.5 * v)


def test_cell_matches_scalar_oracle(rng):
    layer = random_model(5, hidden_dims=(4,)).layers[0]
    x, h0 = rng.normal(size=3), rng.normal(size=4)
    h, _ = dgru.gru_cell_step(x, h0, layer)
    np.testing.assert_allclose(h, gru_step_scalar(x.tolist(), h0.tolist(), layer), rtol=0, atol=1e-12)


def test_cell_dimension_mismatch():
    layer = zero_model().layers[0]
    with pytest.raises(ShapeError):
        dgru.gru_cell_step(np.zeros(2), np.zeros(4), layer)
    with pytest.raises(ShapeError):
        dgru.gru_cell_step(np.zeros(3), np.zeros(5), layer)


@given(st.integers(0, 10_000))
def test_closed_update_gate_keeps_state(seed):
    layer = random_model(seed, hidden_dims=(4,), scale=0.2).layers[0]
    layer.bz[...] = -50.0
    r = np.random.default_rng(seed)
    x, h0 = r.normal(size=3), r.normal(size=4)
    h, _ = dgru.gru_cell_step(x, h0, layer)
    assert np.max(np.abs(h - h0)) <= 1e-15


# -- forward -----------------------------------------------------------------


def test_forward_zero_params_uniform():
    m = zero_model()
    probs, trace = dgru.forward(m, np.ones((5, 3)))
    np.testing.assert_array_equal(probs, [0.5, 0.5])
    assert len(trace) == 5


def test_forward_deterministic(small_model, rng):
    w = rng.normal(size=(7, 3))
    a, _ = dgru.forward(small_model, w)
    b, _ = dgru.forward(small_model, w.copy())
    assert a.tobytes() == b.tobytes()


def test_forward_matches_unrolled_oracle(rng):
    m = random_model(9, hidden_dims=(4,), window_size=5)
    w = rng.normal(size=(5, 3))
    probs, _ = dgru.forward(m, w)
    np.testing.assert_allclose(probs, forward_scalar(m, w), rtol=0, atol=1e-10)


def test_forward_two_layers_with_norm_matches_oracle(small_model, rng):
    w = rng.normal(size=(7, 3))
    probs, _ = dgru.forward(small_model, w)
    np.testing.assert_allclose(probs, forward_scalar(small_model, w), rtol=0, atol=1e-10)


def test_batch_rows_match_single_windows(small_model, rng):
    X = rng.normal(size=(6, 7, 3))
    batch, _ = dgru.forward_batch(small_model, X)
    for i in range(6):
        single, _ = dgru.forward(small_model, X[i])
        np.testing.assert_allclose(batch[i], single, rtol=0, atol=1e-14)


def test_forward_window_length_mismatch(small_model):
    with pytest.raises(ShapeError):
        dgru.forward(small_model, np.zeros((6, 3)))
    with pytest.raises(ShapeError):
        dgru.predict(small_model, WindowInstance(np.zeros((8, 3)), 0))


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_forward_output_is_probability_vector(seed, scale):
    m = random_model(seed % 1000, hidden_dims=(5,), window_size=4)
    w = np.random.default_rng(seed).normal(size=(4, 3)) * scale
    probs, _ = dgru.forward(m, w)
    assert np.all(np.isfinite(probs)) and abs(probs.sum() - 1.0) <= 1e-12


def test_interleaved_models_match_isolated_runs(rng):
    a = random_model(1, hidden_dims=(4, 4), window_size=6)
    b = random_model(2, hidden_dims=(3,), window_size=6)
    ws = rng.normal(size=(4, 6, 3))
    alone_a = [dgru.forward(a, w)[0] for w in ws]
    alone_b = [dgru.forward(b, w)[0] for w in ws]
    for i, w in enumerate(ws):
        assert dgru.forward(b, w)[0].tobytes() == alone_b[i].tobytes()
        assert dgru.forward(a, w)[0].tobytes() == alone_a[i].tobytes()


# -- backward ----------------------------------------------------------------


@pytest.mark.parametrize("hidden,window", [((8,), 5), ((4, 4), 3)])
def test_backward_matches_finite_differences(hidden, window, rng):
    m = random_model(21, hidden_dims=hidden, window_size=window,
                     norm=NormStats(np.array([0.0, -1.0, 0.2]), np.array([0.5, 0.7, 0.9])))
    X = rng.normal(size=(1, window, 3))
    _, trace = dgru.forward_batch(m, X)
    analytic = dgru.backward(m, trace, 1)
    numeric = finite_difference_grads(m, X, [1], mean_loss)
    assert max_relative_error(analytic, numeric) <= 1e-4


def test_batch_gradient_is_mean_of_single_gradients(rng):
    m = random_model(4, hidden_dims=(5,), window_size=4)
    X = rng.normal(size=(3, 4, 3))
    targets = [0, 1, 1]
    _, tr = dgru.forward_batch(m, X)
    g = dgru.backward_batch(m, tr, targets)
    singles = [dgru.backward(m, dgru.forward(m, X[i])[1], targets[i]) for i in range(3)]
    for name in g:
        np.testing.assert_allclose(g[name], sum(s[name] for s in singles) / 3, rtol=0, atol=1e-13)


def test_head_bias_gradient_is_probs_minus_onehot():
    m = random_model(6, hidden_dims=(4,), window_size=3)
    m.head.b2[...] = [-40.0, 40.0]  # probs one-hot at class 1 after clamping
    probs, trace = dgru.forward(m, np.ones((3, 3)))
    g = dgru.backward(m, trace, 1)
    np.testing.assert_allclose(g["head.b2"], probs - np.array([0.0, 1.0]), rtol=0, atol=1e-9)
    assert np.max(np.abs(g["head.b2"])) <= 1e-9


def test_zero_input_zero_params_gives_zero_input_weight_grads():
    m = zero_model(hidden=(4, 3), window=5)
    _, trace = dgru.forward(m, np.zeros((5, 3)))
    g = dgru.backward(m, trace, 0)
    for i in range(2):
        for name in ("Wz", "Wr", "Wh"):
            np.testing.assert_array_equal(g[f"layers.{i}.{name}"], 0.0)


def test_backward_rejects_foreign_trace():
    a = random_model(1, hidden_dims=(4,), window_size=3)
    b = random_model(1, hidden_dims=(4, 4), window_size=3)
    _, trace = dgru.forward(a, np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        dgru.backward(b, trace, 0)


def test_gradients_shape_congruent(small_model, rng):
    _, trace = dgru.forward(small_model, rng.normal(size=(7, 3)))
    g = dgru.backward(small_model, trace, 0)
    params = dict(small_model.named_parameters())
    assert list(g) == list(params)
    for name, arr in params.items():
        assert g[name].shape == arr.shape and np.all(np.isfinite(g[name]))


# -- predict -----------------------------------------------------------------


def fixed_output_model(probs):
    m = zero_model(window=3)
    m.head.b2[...] = np.log(probs)
    return m


def test_predict_fall():
    label, p_fall = dgru.predict(fixed_output_model([0.1, 0.9]), np.zeros((3, 3)))
    assert label == FALL and abs(p_fall - 0.9) < 1e-12


def test_predict_tie_goes_to_nonfall():
    label, p_fall = dgru.predict(zero_model(window=3), np.zeros((3, 3)))
    assert label == NONFALL and p_fall == 0.5


def test_decide_vectorised():
    np.testing.assert_array_equal(dgru.decide(np.array([[0.5, 0.5], [0.4, 0.6], [0.7, 0.3]])), [0, 1, 0])


# -- serialization -----------------------------------------------------------


def test_round_trip_bit_exact(tmp_path, small_model):
    p = tmp_path / "m.json"
    dgru.save_model(small_model, p, {"note": "x"})
    loaded = dgru.load_model(p)
    for (na, a), (nb, b) in zip(small_model.named_parameters(), loaded.named_parameters()):
        assert na == nb and a.tobytes() == b.tobytes()
    assert loaded.norm.mean.tobytes() == small_model.norm.mean.tobytes()
    assert loaded.norm.std.tobytes() == small_model.norm.std.tobytes()
    assert loaded.window_size == 7 and loaded.hidden_dims == [6, 5]


def test_file_is_self_describing(tmp_path, small_model):
    p = tmp_path / "m.json"
    dgru.save_model(small_model, p)
    doc = json.loads(p.read_text())
    assert doc["format_version"] == dgru.FORMAT_VERSION
    assert doc["arch"] == {"input_dim": 3, "hidden_dims": [6, 5], "head_dim": 5, "output_dim": 2, "window_size": 7}
    assert set(doc["norm"]) == {"mean", "std", "enabled"}


def _doc(model):
    return json.loads(json.dumps(dgru.model_to_dict(model)))


def test_three_output_rows_rejected(small_model):
    doc = _doc(small_model)
    doc["params"]["head"]["W2"].append(doc["params"]["head"]["W2"][0])
    with pytest.raises(ModelFormatError) as e:
        dgru.model_from_dict(doc)
    assert e.value.field == "params.head.W2"


def test_unknown_version_rejected(tmp_path, small_model):
    doc = _doc(small_model)
    doc["format_version"] = 99
    p = tmp_path / "m.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError) as e:
        dgru.load_model(p)
    assert e.value.field == "format_version"


def test_missing_field_named(small_model):
    doc = _doc(small_model)
    del doc["params"]["layers"][1]["Ur"]
    with pytest.raises(ModelFormatError) as e:
        dgru.model_from_dict(doc)
    assert e.value.field == "params.layers.1.Ur"


def test_wrong_inner_shape_named(small_model):
    doc = _doc(small_model)
    doc["params"]["layers"][0]["Uh"] = doc["params"]["layers"][0]["Uh"][:-1]
    with pytest.raises(ModelFormatError, match="params.layers.0.Uh"):
        dgru.model_from_dict(doc)


@settings(max_examples=40)
@given(st.data())
def test_flipped_byte_never_loads_silently(tmp_path_factory, data):
    m = random_model(2, hidden_dims=(3,), window_size=2)
    p = tmp_path_factory.mktemp("flip") / "m.json"
    dgru.save_model(m, p)
    raw = bytearray(p.read_bytes())
    start = raw.index(b'"params"')
    end = raw.index(b'"checksum"')
    i = data.draw(st.integers(start, end - 1))
    raw[i] ^= data.draw(st.sampled_from([0x01, 0x02, 0x04, 0x10]))
    p.write_bytes(bytes(raw))
    try:
        loaded = dgru.load_model(p)
    except ModelFormatError:
        return
    # loading succeeded only if the flip left every value intact
    for (_, a), (_, b) in zip(m.named_parameters(), loaded.named_parameters()):
        assert a.tobytes() == b.tobytes()


def test_unreadable_file(tmp_path):
    with pytest.raises(ModelFormatError):
        dgru.load_model(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ModelFormatError):
        dgru.load_model(tmp_path / "bad.json")
