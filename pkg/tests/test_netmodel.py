import json

import numpy as np
import pytest
from helpers import SMALL_FILTERS, build_reference_cnn, direct_avgpool, direct_conv

from memse.errors import FormatError
from memse.netmodel import (
    ActivationSpec,
    AvgPoolSpec,
    ConvSpec,
    LinearSpec,
    LinearStage,
    NetworkSpec,
    PoolStage,
    lower,
    parse_inputs,
    parse_network,
    reference_forward,
    write_inputs,
    write_network,
)


def test_identity_linear_roundtrip(tmp_path):
    spec = NetworkSpec((2, 1, 1), (LinearSpec(np.eye(2)),))
    path = tmp_path / "net.json"
    write_network(spec, path)
    parsed = parse_network(path)
    assert isinstance(parsed.layers[0], LinearSpec)
    np.testing.assert_array_equal(parsed.layers[0].weights, np.eye(2))


def test_small_reference_cnn_manifest_roundtrip(tmp_path):
    spec = build_reference_cnn("small", seed=3)
    path = tmp_path / "net.json"
    write_network(spec, path)
    parsed = parse_network(path)
    convs = [l for l in parsed.layers if isinstance(l, ConvSpec)]
    pools = [l for l in parsed.layers if isinstance(l, AvgPoolSpec)]
    acts = [l for l in parsed.layers if isinstance(l, ActivationSpec)]
    linears = [l for l in parsed.layers if isinstance(l, LinearSpec)]
    assert [c.out_channels for c in convs] == SMALL_FILTERS
    assert (len(pools), len(acts), len(linears)) == (5, 5, 1)
    assert linears[0].weights.shape == (10, 16)


def test_wrong_blob_length_rejected(tmp_path):
    spec = NetworkSpec((2, 1, 1), (LinearSpec(np.eye(2)),))
    path = tmp_path / "net.json"
    write_network(spec, path)
    doc = json.loads(path.read_text())
    doc["layers"][0]["weights"]["count"] = 3
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        parse_network(path)


def test_blob_reference_outside_blob(tmp_path):
    spec = NetworkSpec((2, 1, 1), (LinearSpec(np.eye(2)),))
    path = tmp_path / "net.json"
    write_network(spec, path)
    doc = json.loads(path.read_text())
    doc["layers"][0]["weights"]["offset"] = 100
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        parse_network(path)


def test_unsupported_layer_kind(tmp_path):
    spec = NetworkSpec((2, 1, 1), (LinearSpec(np.eye(2)),))
    path = tmp_path / "net.json"
    write_network(spec, path)
    doc = json.loads(path.read_text())
    doc["layers"][0]["kind"] = "maxpool"
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        parse_network(path)


def test_pointwise_conv_is_scaled_identity():
    w = np.full((1, 1, 1, 1), 2.0)
    spec = NetworkSpec((1, 2, 2), (ConvSpec(1, 1, 1, 0, w),))
    net = lower(spec)
    stage = net.stages[0]
    np.testing.assert_allclose(stage.matrix.toarray(), 2.0 * np.eye(4))


@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 1)])
def test_conv_lowering_matches_direct_conv(stride, padding):
    rng = np.random.default_rng(11)
    c, h, w = 3, 6, 5
    weights = rng.normal(size=(4, c, 3, 3))
    spec = NetworkSpec((c, h, w), (ConvSpec(4, 3, stride, padding, weights),))
    net = lower(spec)
    for _ in range(5):
        x = rng.normal(size=(c, h, w))
        got = net.stages[0].matrix @ x.ravel()
        want = direct_conv(x, weights, stride, padding).ravel()
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_conv_lowering_property_20_random_inputs():
    rng = np.random.default_rng(5)
    weights = rng.normal(size=(2, 2, 3, 3))
    spec = NetworkSpec((2, 8, 8), (ConvSpec(2, 3, 1, 1, weights),))
    net = lower(spec)
    for _ in range(20):
        x = rng.normal(size=(2, 8, 8))
        got = net.stages[0].matrix @ x.ravel()
        want = direct_conv(x, weights, 1, 1).ravel()
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_single_window_pool_matrix():
    spec = NetworkSpec((1, 2, 2), (ConvSpec(1, 1, 1, 0, np.ones((1, 1, 1, 1))), AvgPoolSpec(2)))
    net = lower(spec)
    pool = net.stages[1]
    assert isinstance(pool, PoolStage)
    np.testing.assert_allclose(pool.matrix.toarray(), [[0.25, 0.25, 0.25, 0.25]])


def test_pool_matrix_row_stochastic_and_matches_direct():
    rng = np.random.default_rng(2)
    spec = NetworkSpec((3, 6, 6), (ConvSpec(3, 3, 1, 1, rng.normal(size=(3, 3, 3, 3))), AvgPoolSpec(3)))
    net = lower(spec)
    p = net.stages[1].matrix
    rows = p.toarray()
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((rows > 0).sum(axis=1) == 9)
    x = rng.normal(size=(3, 6, 6))
    np.testing.assert_allclose(p @ x.ravel(), direct_avgpool(x, 3).ravel(), atol=1e-12)


def test_reference_forward_identity_net():
    spec = NetworkSpec((2, 1, 1), (LinearSpec(np.eye(2)), ActivationSpec("identity")))
    net = lower(spec)
    outs = reference_forward(net, np.array([3.0, -1.0]))
    np.testing.assert_array_equal(outs[-1], [3.0, -1.0])


def test_reference_forward_hand_sum():
    spec = NetworkSpec((2, 1, 1), (LinearSpec(np.array([[1.0, 1.0]])),))
    net = lower(spec)
    assert reference_forward(net, np.array([2.0, 3.0]))[-1] == pytest.approx([5.0])


def test_reference_forward_full_cnn_matches_direct_evaluation():
    spec = build_reference_cnn("small", seed=9, bias=True)
    net = lower(spec)
    rng = np.random.default_rng(1)
    x = rng.random((3, 32, 32))
    got = reference_forward(net, x.ravel())[-1]
    v = x
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            v = direct_conv(v, layer.weights, layer.stride, layer.padding, layer.bias)
        elif isinstance(layer, AvgPoolSpec):
            v = direct_avgpool(v, layer.window)
        elif isinstance(layer, ActivationSpec):
            v = np.logaddexp(0, v)
        else:
            v = layer.weights @ v.ravel() + (layer.bias if layer.bias is not None else 0.0)
    np.testing.assert_allclose(got, np.asarray(v).ravel(), rtol=1e-10, atol=1e-10)


def test_lowering_deterministic(tmp_path):
    spec = build_reference_cnn("small", seed=4)
    path = tmp_path / "net.json"
    write_network(spec, path)
    net1 = lower(parse_network(path))
    net2 = lower(parse_network(path))
    for s1, s2 in zip(net1.stages, net2.stages):
        if isinstance(s1, LinearStage):
            m1, m2 = s1.matrix, s2.matrix
            if hasattr(m1, "toarray"):
                assert (m1 != m2).nnz == 0
            else:
                np.testing.assert_array_equal(m1, m2)
            assert s1.w_max == s2.w_max


def test_all_zero_layer_rejected():
    spec = NetworkSpec((2, 1, 1), (LinearSpec(np.zeros((2, 2))),))
    with pytest.raises(FormatError, match="all-zero"):
        lower(spec)


def test_pool_window_must_divide():
    with pytest.raises(FormatError, match="window"):
        NetworkSpec((1, 3, 3), (ConvSpec(1, 1, 1, 0, np.ones((1, 1, 1, 1))), AvgPoolSpec(2)))


def test_shape_chain_mismatch():
    with pytest.raises(FormatError):
        NetworkSpec((2, 1, 1), (LinearSpec(np.ones((2, 3))),))


def test_conv_channel_mismatch():
    with pytest.raises(FormatError):
        NetworkSpec((3, 4, 4), (ConvSpec(2, 3, 1, 1, np.ones((2, 2, 3, 3))),))


def test_no_linear_layer_rejected():
    with pytest.raises(FormatError):
        NetworkSpec((2, 2, 2), (ActivationSpec("identity"),))


def test_reference_forward_dimension_mismatch():
    net = lower(NetworkSpec((2, 1, 1), (LinearSpec(np.eye(2)),)))
    with pytest.raises(ValueError):
        reference_forward(net, np.ones(3))


def test_inputs_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    batch = rng.random((4, 3, 2, 2)).astype(np.float32)
    labels = np.array([0, 1, 2, 1])
    path = tmp_path / "inputs.json"
    write_inputs(batch, path, labels=labels)
    loaded, got_labels = parse_inputs(path)
    np.testing.assert_allclose(loaded, batch, rtol=1e-7)
    np.testing.assert_array_equal(got_labels, labels)


def test_inputs_bad_label_count(tmp_path):
    path = tmp_path / "inputs.json"
    write_inputs(np.zeros((2, 1, 1, 1)), path)
    doc = json.loads(path.read_text())
    doc["labels"] = [1, 2, 3]
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        parse_inputs(path)


def test_conv_bias_broadcast():
    w = np.ones((2, 1, 1, 1))
    spec = NetworkSpec((1, 2, 2), (ConvSpec(2, 1, 1, 0, w, bias=np.array([1.0, -1.0])),))
    net = lower(spec)
    out = reference_forward(net, np.zeros(4))[-1]
    np.testing.assert_array_equal(out, [1, 1, 1, 1, -1, -1, -1, -1])
