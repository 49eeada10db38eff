import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mdlstm_det.detector import (ConfigError, ConvSpec, DropoutSpec, InputTooSmall, MdLstmSpec,
                                 ArchitectureConfig, PredictorGeometry, backward, build_model,
                                 config_from_ini, config_to_ini, decode_outputs, default_config_path,
                                 derive_geometry, deserialize, encode_output_grads, feature_map_sizes,
                                 forward, load_config, load_model, minimal_input_size, output_grid,
                                 parameter_counts, save_model, serialize, reference_config)

from conftest import central_difference, max_rel_error

REFERENCE_COUNTS = [204, 8880, 0, 2320, 15680, 0, 6936, 35040, 0, 8670, 54600, 0, 6516, 3700]


@pytest.fixture(scope="module")
def reference():
    return reference_config()


@pytest.fixture
def tiny():
    return load_config(default_config_path("tiny"))


def test_reference_parameter_counts(reference):
    assert parameter_counts(reference) == REFERENCE_COUNTS
    assert sum(REFERENCE_COUNTS) == 142546
    model = build_model(reference, np.random.default_rng(0))
    assert model.parameter_count == 142546


def test_parameter_count_does_not_depend_on_input(reference):
    model = build_model(reference, np.random.default_rng(0), init_scale=0.0)
    for size in [(838, 598), (900, 700), minimal_input_size(reference)]:
        raw, _ = forward(model, np.zeros((1,) + size, np.float32))
        assert raw.shape[0] == 100
    assert model.parameter_count == 142546


def test_reference_layout(reference):
    sizes = feature_map_sizes(reference, 838, 598)
    convs = [s for s, spec in zip(sizes, reference.layers) if isinstance(spec, ConvSpec)]
    assert [c for c, _, _ in convs] == [12, 16, 24, 30, 36, 100]
    rows, cols = output_grid(reference, 838, 598)
    assert rows * cols * reference.predictors == 1320
    assert reference.total_stride == (24, 216)


def test_zero_init_gives_half_confidence(reference):
    model = build_model(reference, np.random.default_rng(0), init_scale=0.0)
    raw, _ = forward(model, np.random.default_rng(1).random((1, 838, 598)).astype(np.float32))
    d = decode_outputs(raw, model.geometry((838, 598)))
    assert len(d) == 1320
    np.testing.assert_array_equal(d.confidence, 0.5)


def test_minimal_input(reference):
    h, w = minimal_input_size(reference)
    assert output_grid(reference, h, w) == (1, 1)
    for bad in [(h - 1, w), (h, w - 1)]:
        with pytest.raises(InputTooSmall) as info:
            output_grid(reference, *bad)
        assert info.value.minimal == (h, w)
        assert f"{h}x{w}" in str(info.value)


@given(h=st.integers(1, 60), w=st.integers(1, 60))
def test_minimal_input_is_tight(h, w):
    cfg = load_config(default_config_path("tiny"))
    mh, mw = minimal_input_size(cfg)
    ok = h >= mh and w >= mw
    try:
        output_grid(cfg, h, w)
        assert ok
    except InputTooSmall:
        assert not ok


def test_reference_geometry(reference):
    g = derive_geometry(reference)
    assert g.delta == pytest.approx((0.3612, 0.0286), abs=5e-5)
    assert g.lam == pytest.approx((2 * 216 / 598, 2 * 24 / 838, 1.0, 1.0))


@pytest.mark.parametrize("span", [(1.0, 1.0), (2.0, 0.5)])
def test_position_span_scales_lambda(tiny, span):
    text = config_to_ini(tiny).replace("[model]", "[model]\nposition_span = %g %g" % span)
    cfg = config_from_ini(text)
    g = derive_geometry(cfg, (40, 60))
    assert g.lam[:2] == pytest.approx((span[0] * g.delta[0], span[1] * g.delta[1]))
    assert g.lam[2:] == (1.0, 1.0)
    assert config_from_ini(config_to_ini(cfg)) == cfg
    with pytest.raises(ConfigError, match="position_span"):
        config_from_ini(text.replace("position_span = %g %g" % span, "position_span = 1 0"))


def test_decode_hand_example():
    geo = PredictorGeometry((0.2, 0.1, 1.0, 1.0), (0.1, 0.05))
    raw = np.zeros((10, 2, 3))
    raw[4, 0, 0] = math.log(3.0)  # confidence 0.75 at row 1, column 1, predictor 1
    raw[5:9, 1, 2] = [100.0, -100.0, 0.0, 0.0]  # predictor 2 at row 2, column 3
    d = decode_outputs(raw, geo)
    assert len(d) == 12
    assert d.confidence[0] == pytest.approx(0.75)
    np.testing.assert_allclose(d.boxes[0], [0.1, 0.05, 0.5, 0.5])
    m = (1 * 3 + 2) * 2 + 1
    assert d.site(m) == (3, 2, 2)
    # x = lam_x * 1 + (i - 1) * dx with i = 3; y = lam_y * 0 + (j - 1) * dy with j = 2
    np.testing.assert_allclose(d.boxes[m], [0.2 + 2 * 0.1, 0.05, 0.5, 0.5], atol=1e-12)
    items = d.to_list()
    assert items[m].site == (3, 2, 2) and items[m].x == pytest.approx(0.4)


def test_decode_confidence_is_clamped():
    raw = np.zeros((5, 1, 2))
    raw[4] = [1e4, -1e4]
    d = decode_outputs(raw, PredictorGeometry((1, 1, 1, 1), (1, 1)))
    assert d.confidence[0] == 1 - 1e-7 and d.confidence[1] == 1e-7


def test_encode_grads_match_finite_differences(rng):
    geo = PredictorGeometry((0.3, 0.2, 1.0, 1.0), (0.1, 0.05))
    raw = rng.standard_normal((10, 2, 3))
    wb = rng.standard_normal((12, 4))
    d = decode_outputs(raw, geo)
    gl = rng.standard_normal(12)
    g = encode_output_grads(d, wb, gl)

    def f():
        dd = decode_outputs(raw, geo)
        return float(np.sum(dd.boxes * wb) + np.sum(dd.logits * gl))

    (num,) = central_difference(f, [raw])
    assert max_rel_error(g, num, floor=1e-6) < 1e-6


def test_lambda_override_round_trip(tiny):
    text = config_to_ini(tiny).replace("[model]", "[model]\nlambda = 0.5 0.25 2 3")
    cfg = config_from_ini(text)
    assert cfg.lambda_override == (0.5, 0.25, 2.0, 3.0)
    assert derive_geometry(cfg).lam == (0.5, 0.25, 2.0, 3.0)
    again = config_from_ini(config_to_ini(cfg))
    assert again == cfg


def test_config_round_trip(reference, tiny):
    for cfg in (reference, tiny):
        assert config_from_ini(config_to_ini(cfg)) == cfg


@pytest.mark.parametrize("edit,message", [
    (lambda c: c.replace("out_channels = 10", "out_channels = 11"), "5\\*K"),
    (lambda c: c.replace("activation = none", "activation = tanh"), "activation"),
    (lambda c: c.replace("kernel_w = 1\n", "kernel_w = 2\n"), "1x1"),
    (lambda c: c.replace("type = mdlstm", "type = pooling"), "layer"),
    (lambda c: c.replace("kernel_h = 2\nkernel_w = 3", "kernel_w = 3"), "kernel_h"),
])
def test_config_errors(tiny, edit, message):
    with pytest.raises(ConfigError, match=message):
        config_from_ini(edit(config_to_ini(tiny)))


def test_head_error_names_layer():
    with pytest.raises(ConfigError, match="layer 2"):
        ArchitectureConfig([ConvSpec(3, 2, 2), ConvSpec(7, 1, 1, activation="none")], predictors=1)


def test_without_lstm_drops_lstm_and_dropout(reference):
    ab = reference.without_lstm()
    assert not any(isinstance(s, (MdLstmSpec, DropoutSpec)) for s in ab.layers)
    assert sum(parameter_counts(ab)) == 204 + 2320 + 6936 + 8670 + 6516 + 3700
    assert output_grid(ab, 838, 598) == output_grid(reference, 838, 598)


@pytest.mark.parametrize("dtype,size", [(np.float32, 571165), (np.float64, None)])
def test_serialization_round_trip(reference, tmp_path, dtype, size):
    model = build_model(reference, np.random.default_rng(3), dtype=dtype)
    path = tmp_path / "m.model"
    save_model(model, path)
    if size is not None:
        assert path.stat().st_size == size
    back = load_model(path)
    assert back.config == model.config
    for a, b in zip(model.parameters(), back.parameters()):
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()


def test_truncated_model_names_position_and_layer(tiny):
    data = serialize(build_model(tiny, np.random.default_rng(0)))
    with pytest.raises(ValueError, match=r"byte \d+.*layer 5"):
        deserialize(data[:-3])
    with pytest.raises(ValueError, match="magic"):
        deserialize(b"XXXXXXXX" + data[8:])
    with pytest.raises(ValueError, match="trailing"):
        deserialize(data + b"\0")


def test_float32_forward_matches_float64(tiny, rng):
    m64 = build_model(tiny, np.random.default_rng(4), init_scale=0.5, dtype=np.float64)
    img = rng.random((1, 9, 13))
    a, _ = forward(m64, img)
    b, _ = forward(m64.astype(np.float32), img.astype(np.float32))
    assert b.dtype == np.float32
    np.testing.assert_allclose(b, a, atol=1e-5)


def test_network_backward_finite_differences(tiny, rng):
    model = build_model(tiny, np.random.default_rng(5), init_scale=0.5, dtype=np.float64)
    img = rng.random((1, 8, 12))
    raw, caches = forward(model, img)
    proj = rng.standard_normal(raw.shape)
    grads = backward(model, caches, proj)
    numeric = central_difference(lambda: float(np.sum(forward(model, img)[0] * proj)), model.parameters())
    for a, n in zip(grads, numeric):
        assert max_rel_error(a, n, floor=1e-7) < 1e-5


def test_training_forward_needs_rng(tiny):
    model = build_model(tiny, np.random.default_rng(0))
    with pytest.raises(ValueError, match="rng"):
        forward(model, np.zeros((1, 8, 12), np.float32), training=True)
    with pytest.raises(ValueError, match="shaped"):
        forward(model, np.zeros((8, 12), np.float32))


@pytest.mark.parametrize("prior", [0.01, 0.3])
def test_confidence_prior_sets_initial_confidence(tiny, prior):
    model = build_model(tiny, np.random.default_rng(0), init_scale=0.0, confidence_prior=prior)
    raw, _ = forward(model, np.random.default_rng(1).random((1, 8, 12)).astype(np.float32))
    d = decode_outputs(raw, model.geometry((8, 12)))
    np.testing.assert_allclose(d.confidence, prior, rtol=1e-5)


@pytest.mark.parametrize("prior", [0.0, 1.0, -0.2])
def test_confidence_prior_must_be_a_probability(tiny, prior):
    with pytest.raises(ValueError):
        build_model(tiny, np.random.default_rng(0), confidence_prior=prior)


def test_fan_in_init_bounds(reference):
    model = build_model(reference, np.random.default_rng(0), init_scale=1.0, init="fan_in")
    c = reference.input_channels
    for spec, params in zip(reference.layers, model.layers):
        if isinstance(spec, ConvSpec):
            bound = math.sqrt(3.0 / (c * spec.kernel_h * spec.kernel_w))
            assert np.abs(params.weight).max() <= bound
            assert np.abs(params.weight).max() > 0.9 * bound
            c = spec.out_channels
        elif isinstance(spec, MdLstmSpec):
            for d in params.directions:
                assert np.abs(d.w).max() <= math.sqrt(1.0 / c)
    with pytest.raises(ValueError, match="init"):
        build_model(reference, np.random.default_rng(0), init="orthogonal")
