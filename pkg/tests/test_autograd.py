import numpy as np
import pytest

from msiresnet import layers as L
from msiresnet.autograd import (
    backward, forward_record, grad_check, projection_objective, relative_error, sum_objective,
)
from msiresnet.errors import ShapeError, StateError
from msiresnet.losses import bce_objective
from msiresnet.zoo import Model, build_baseline, build_modified_resnet


def small_cnn(rng):
    return Model([
        ("conv", L.Conv2d(L.Conv2dSpec(2, 3, 3, 1, 1), rng)),
        ("bn", L.BatchNorm2d(3)),
        ("relu", L.ReLU()),
        ("pool", L.MaxPool2d()),
        ("flat", L.Flatten()),
        ("fc", L.Linear(3 * 2 * 2, 2, rng=rng)),
    ])


def test_empty_model_is_identity(rng):
    x = rng.standard_normal((2, 3))
    out, tape = forward_record(Model([]), x, "train")
    np.testing.assert_array_equal(out, x)
    grads, dx = backward(tape, np.ones_like(x), return_input_grad=True)
    assert grads == {}
    np.testing.assert_array_equal(dx, 1.0)


def test_single_relu():
    out, _ = forward_record(Model([("r", L.ReLU())]), np.array([[-1.0, 2.0]]))
    assert out.tolist() == [[0.0, 2.0]]


def test_modified_resnet_output_shape():
    model = build_modified_resnet()
    out, _ = forward_record(model, np.zeros((1, 3, 224, 224)), "eval")
    assert out.shape == (1, 1)


def test_input_shape_mismatch_is_layer_indexed():
    model = build_baseline("cnn5", input_hw=32)
    with pytest.raises(ShapeError) as e:
        forward_record(model, np.zeros((1, 3, 64, 64)))
    assert e.value.layer_index == 0


def test_inner_layer_error_names_layer(rng):
    model = Model([("r", L.ReLU()), ("fc", L.Linear(3, 1, rng=rng))])
    with pytest.raises(ShapeError, match="layer 1 \\(fc\\)") as e:
        forward_record(model, np.zeros((2, 4)))
    assert e.value.layer_index == 1


def test_backward_twice_is_state_error(rng):
    model = small_cnn(rng)
    out, tape = forward_record(model, rng.standard_normal((2, 2, 4, 4)), "train")
    backward(tape, np.ones_like(out))
    with pytest.raises(StateError):
        backward(tape, np.ones_like(out))


def test_backward_needs_train_tape(rng):
    model = small_cnn(rng)
    out, tape = forward_record(model, rng.standard_normal((2, 2, 4, 4)), "eval")
    with pytest.raises(StateError):
        backward(tape, np.ones_like(out))


def test_gradient_shapes_match_parameters(rng):
    model = small_cnn(rng)
    out, tape = forward_record(model, rng.standard_normal((2, 2, 4, 4)), "train")
    grads = backward(tape, rng.standard_normal(out.shape))
    params = model.named_parameters()
    assert set(grads) == set(params)
    for k in params:
        assert grads[k].shape == params[k].shape


def test_zero_in_zero_out(rng):
    model = small_cnn(rng)
    out, tape = forward_record(model, rng.standard_normal((2, 2, 4, 4)), "train")
    grads, dx = backward(tape, np.zeros_like(out), return_input_grad=True)
    assert all(not g.any() for g in grads.values())
    assert not dx.any()


def test_linearity(rng):
    model = small_cnn(rng)
    x = rng.standard_normal((3, 2, 4, 4))
    g1, g2 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    a, b = 0.7, -1.3

    def grads_for(dy):
        _, tape = forward_record(model, x, "train")
        return backward(tape, dy)

    r1, r2, r12 = grads_for(g1), grads_for(g2), grads_for(a * g1 + b * g2)
    for k in r1:
        np.testing.assert_allclose(r12[k], a * r1[k] + b * r2[k], atol=1e-9)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-10, 0.0) == pytest.approx(1e-2)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_grad_check_logreg_8x8(rng):
    model = build_baseline("logreg", input_hw=8, seed=3)
    x = rng.standard_normal((4, 3, 8, 8))
    y = np.array([0, 1, 1, 0])
    report = grad_check(model, x, bce_objective(y), tolerance=1e-4)
    assert report.passed, report.table()
    assert report.checked["fc.linear.weight"] == 192


def test_grad_check_strided_conv_bce(rng):
    model = Model([
        ("conv", L.Conv2d(L.Conv2dSpec(1, 1, 3, 2, 1, bias=True), rng)),
        ("flat", L.Flatten()),
        ("fc", L.Linear(16, 1, rng=rng)),
        ("sig", L.Sigmoid()),
    ])
    x = rng.standard_normal((1, 1, 7, 7))
    report = grad_check(model, x, bce_objective([1]), tolerance=1e-4)
    assert report.passed, report.table()


def test_grad_check_batchnorm_batch_of_four(rng):
    model = Model([("bn", L.BatchNorm2d(2))])
    model.layers[0][1].params["gamma"][:] = [1.5, 0.7]
    x = rng.standard_normal((4, 2, 3, 3))
    report = grad_check(model, x, projection_objective((4, 2, 3, 3), seed=2), tolerance=1e-4)
    assert report.passed, report.table()


def test_grad_check_restores_buffers(rng):
    model = small_cnn(rng)
    before = {k: v.copy() for k, v in model.named_buffers().items()}
    grad_check(model, rng.standard_normal((2, 2, 4, 4)), sum_objective(), sample=5)
    for k, v in model.named_buffers().items():
        np.testing.assert_array_equal(v, before[k])


def test_grad_check_detects_wrong_backward(rng):
    class BadReLU(L.ReLU):
        def backward(self, dy, positive):
            return dy * positive * 1.01, {}

    model = Model([("fc", L.Linear(3, 3, rng=rng)), ("r", BadReLU())])
    report = grad_check(model, rng.standard_normal((2, 3)), sum_objective())
    assert not report.passed


def test_grad_check_reports_non_finite(rng):
    class NanLinear(L.Linear):
        def backward(self, dy, x):
            dx, g = super().backward(dy, x)
            g["weight"] = g["weight"] * np.nan
            return dx, g

    model = Model([("fc", NanLinear(2, 1, rng=rng))])
    report = grad_check(model, rng.standard_normal((2, 2)), sum_objective())
    assert not report.passed
    assert any(f.startswith("fc.weight[") for f in report.failures)


def test_grad_check_steps_around_kink():
    # 3e-6 sits inside the default step, so a plain central difference gives 0.65 instead of 1
    model = Model([("r", L.ReLU())])
    report = grad_check(model, np.array([[3e-6, -2.0]]), sum_objective())
    assert report.passed
    assert report.checked["input"] == 2 and not report.kinks


def test_grad_check_counts_unresolvable_kink():
    model = Model([("r", L.ReLU())])
    report = grad_check(model, np.array([[1e-12, 1.0]]), sum_objective())
    assert report.kinks == {"input": 1}
    assert report.checked["input"] == 1
    assert report.passed
