"""Weighted layer aggregation tests."""

import numpy as np
import pytest

from svkit.aggregator import aggregate, aggregate_graph, export_weights, normalized_weights, write_weights_csv
from svkit.autodiff import Tensor
from svkit.errors import DataError
from svkit.upstream import LayerStack


def stack_from(layers):
    return LayerStack(np.asarray(layers, dtype=np.float64), frame_rate_hz=50.0)


# ---------------------------------------------------------------------------
# normalized_weights
# ---------------------------------------------------------------------------


def test_uniform_logits_give_uniform_weights():
    np.testing.assert_allclose(normalized_weights([0.0, 0.0, 0.0]), np.full(3, 1 / 3), atol=1e-15)


def test_closed_form_softmax():
    w = normalized_weights([0.0, 0.0, np.log(2.0)])
    np.testing.assert_allclose(w, [0.25, 0.25, 0.5], atol=1e-12)


def test_non_finite_logits_rejected():
    with pytest.raises(DataError, match="non-finite"):
        normalized_weights([0.0, np.nan])
    with pytest.raises(DataError, match="non-finite"):
        normalized_weights([np.inf, 1.0])


def test_weights_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = normalized_weights(rng.standard_normal(13) * 5)
        assert abs(w.sum() - 1.0) < 1e-6
        assert np.all(w > 0) and np.all(w < 1)


def test_shift_invariance():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal(8)
    base = normalized_weights(logits)
    for c in (1.0, -3.5, 7.25):
        np.testing.assert_allclose(normalized_weights(logits + c), base, atol=1e-12)


# ---------------------------------------------------------------------------
# aggregate
# ---------------------------------------------------------------------------


def test_identical_layers_any_weights():
    rng = np.random.default_rng(2)
    h = rng.standard_normal((4, 3))
    stack = stack_from(np.stack([h, h, h]))
    w = normalized_weights(rng.standard_normal(3))
    np.testing.assert_allclose(aggregate(stack, w).frames, stack.layers[0], atol=1e-7)


def test_two_layer_symmetry():
    a = np.tile([1.0, 0.0], (5, 1))
    b = np.tile([0.0, 1.0], (5, 1))
    out = aggregate(stack_from(np.stack([a, b])), [0.5, 0.5])
    np.testing.assert_allclose(out.frames, np.full((5, 2), 0.5))


def test_one_hot_saturated_logits_select_layer():
    rng = np.random.default_rng(3)
    layers = rng.standard_normal((5, 6, 4))
    k = 2
    logits = np.zeros(5)
    logits[k] = 40.0
    out = aggregate(stack_from(layers), normalized_weights(logits))
    assert np.max(np.abs(out.frames - layers[k].astype(np.float32))) < 1e-6


def test_weight_length_mismatch():
    stack = stack_from(np.zeros((3, 2, 2)))
    with pytest.raises(DataError, match="3 layer weights"):
        aggregate(stack, [0.5, 0.5])


def test_aggregate_linear_in_stack():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((4, 5, 3))
    b = rng.standard_normal((4, 5, 3))
    w = normalized_weights(rng.standard_normal(4))
    lhs = aggregate(stack_from(2.0 * a + 0.5 * b), w).frames
    rhs = 2.0 * aggregate(stack_from(a), w).frames + 0.5 * aggregate(stack_from(b), w).frames
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_aggregate_graph_matches_numpy():
    rng = np.random.default_rng(5)
    layers = rng.standard_normal((6, 7, 3))
    logits = rng.standard_normal(6)
    out = aggregate_graph(layers, Tensor(logits))
    ref = np.tensordot(normalized_weights(logits), layers, axes=(0, 0))
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_aggregate_graph_gradient_flows_to_layers():
    rng = np.random.default_rng(6)
    layer_tensors = [Tensor(rng.standard_normal((4, 3)), requires_grad=True) for _ in range(3)]
    logits = Tensor(np.zeros(3), requires_grad=True)
    aggregate_graph(layer_tensors, logits).sum().backward()
    assert logits.grad is not None
    for h in layer_tensors:
        np.testing.assert_allclose(h.grad, np.full((4, 3), 1 / 3), atol=1e-12)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def test_export_uniform_formatting():
    rows = export_weights(np.full(3, 1 / 3))
    assert rows == [("layer_0", "0.333333"), ("layer_1", "0.333333"), ("layer_2", "0.333333")]


def test_export_rounded_rows_sum_near_one():
    rng = np.random.default_rng(7)
    for _ in range(50):
        w = normalized_weights(rng.standard_normal(13) * 3)
        rows = export_weights(w)
        assert abs(sum(float(v) for _, v in rows) - 1.0) <= 1e-5 + 13 * 5e-7


def test_export_custom_and_default_labels():
    rows = export_weights([0.5, 0.5], labels=["a", "b"])
    assert [r[0] for r in rows] == ["a", "b"]
    rows = export_weights([0.5, 0.5], labels=[])
    assert [r[0] for r in rows] == ["layer_0", "layer_1"]
    with pytest.raises(DataError):
        export_weights([0.5, 0.5], labels=["only_one"])


def test_csv_writer_layout(tmp_path):
    path = tmp_path / "w.csv"
    write_weights_csv(path, np.full(3, 1 / 3))
    text = path.read_text()
    lines = text.split("\n")
    assert lines[0] == "layer,weight"
    assert lines[1] == "layer_0,0.333333"
    assert text.endswith("\n") and "\r" not in text
