import numpy as np
import pytest
from pydantic import ValidationError

from app import cnn, container
from app import tensor as T
from app.errors import DataError, NonFiniteWeightsError, ShapeError, ShapeMismatchError
from app.gradcheck import check_gradient, finite_diff_grad
from app.tensor import Tensor
from tests.helpers import conv, conv_spec


def _single_conv(weights, bias, size=(5, 5, 3), pad=0, k=None):
    out = weights.shape[0]
    k = k or weights.shape[2]
    spec = conv_spec([conv("conv1", out, k=k, pad=pad)], ["conv1"], size)
    return cnn.CnnModel(spec=spec, weights={"conv1": (weights, bias)})


# ------------------------- Convolution -------------------------------

def test_one_by_one_identity_kernel(rng):
    model = _single_conv(np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
    image = rng.standard_normal((5, 5, 3))
    out = cnn.forward(model, Tensor(image))["conv1"]
    np.testing.assert_allclose(out.values.data, image, atol=1e-12)


def test_all_ones_kernel_on_constant_image():
    model = _single_conv(np.ones((1, 3, 3, 3)), np.zeros(1))
    out = cnn.forward(model, Tensor(np.full((5, 5, 3), 2.0)))["conv1"]
    assert out.values.shape == (3, 3, 1)
    np.testing.assert_allclose(out.values.data, 54.0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv2d_matches_direct_loops(rng, stride, pad):
    x = rng.standard_normal((3, 9, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    fast = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(fast, cnn.conv2d_reference(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_is_linear_without_bias(rng):
    w = rng.standard_normal((2, 3, 3, 3))
    model = _single_conv(w, np.zeros(2))
    a, b = rng.standard_normal((5, 5, 3)), rng.standard_normal((5, 5, 3))

    def phi(img):
        return cnn.forward(model, Tensor(img))["conv1"].values.data

    np.testing.assert_allclose(phi(2.0 * a + 3.0 * b), 2.0 * phi(a) + 3.0 * phi(b), atol=1e-10)


def test_maxpool_and_relu_properties(rng):
    x = rng.standard_normal((2, 6, 6))
    pooled = T.maxpool2d(Tensor(x), kernel=2, stride=2).data
    assert pooled.shape == (2, 3, 3)
    assert pooled[0, 0, 0] == x[0, :2, :2].max()
    assert np.all(T.relu(Tensor(x)).data >= 0)
    np.testing.assert_array_equal(T.relu(Tensor(np.abs(x))).data, np.abs(x))


# ------------------------- Input gradient -------------------------------

def test_zero_cotangents_give_zero_gradient(toy2, rng):
    cots = {tap: np.zeros(shape) for tap, shape in toy2.tap_shapes().items()}
    grad = cnn.input_gradient(toy2, Tensor(rng.standard_normal((8, 8, 3))), cots)
    np.testing.assert_array_equal(grad.data, np.zeros((8, 8, 3)))


def test_identity_kernel_passes_cotangent_through(rng):
    model = _single_conv(np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
    g = rng.standard_normal((5, 5, 3))
    grad = cnn.input_gradient(model, Tensor(rng.standard_normal((5, 5, 3))), {"conv1": g})
    np.testing.assert_allclose(grad.data, g, atol=1e-12)


def _check_input_gradient(model, rng, tap_weights=None):
    image = Tensor(rng.standard_normal(model.input_size))
    cots = {tap: rng.standard_normal(shape) for tap, shape in model.tap_shapes().items()}

    def f(x):
        grids = cnn.forward(model, x)
        return float(sum(np.sum(grids[t].values.data * c) for t, c in cots.items()))

    analytic = cnn.input_gradient(model, image, cots)
    numeric = finite_diff_grad(f, image, eps=1e-6)
    return check_gradient(analytic, numeric, rel_tol=1e-4, abs_tol=1e-8)


def test_input_gradient_two_conv_net(toy2, rng):
    assert _check_input_gradient(toy2, rng).passed


def test_input_gradient_over_seeded_tiny_nets():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        spec = conv_spec(
            [conv("conv1", 3, k=3, pad=1), {"kind": "relu", "name": "relu1"},
             {"kind": "maxpool", "name": "pool1", "kernel": 2, "stride": 2}, conv("conv2", 2, k=2)],
            ["conv1", "conv2"],
            (6, 6, 3),
        )
        model = cnn.init_random(spec, rng)
        report = _check_input_gradient(model, rng)
        assert report.passed, (seed, report.worst)


def test_input_gradient_errors(toy2, rng):
    image = Tensor(rng.standard_normal((8, 8, 3)))
    with pytest.raises(DataError):
        cnn.input_gradient(toy2, image, {"conv9": np.zeros((8, 8, 6))})
    with pytest.raises(ShapeError):
        cnn.input_gradient(toy2, image, {"conv1": np.zeros((8, 8, 5))})


# ------------------------- Architecture -------------------------------

def test_alexnet_geometry():
    spec = cnn.alexnet_like_spec()
    shapes = spec.output_shapes()
    assert shapes["conv1"] == (96, 55, 55)
    assert shapes["pool1"] == (96, 27, 27)
    assert shapes["conv2"] == (256, 27, 27)
    assert shapes["conv5"] == (256, 13, 13)


@pytest.mark.slow
def test_alexnet_first_layer_forward():
    spec = cnn.alexnet_like_spec(taps=["conv1"])
    model = cnn.init_random(spec, np.random.default_rng(0))
    # the full net still runs; only conv1 is exported
    grids = cnn.forward(model, Tensor(np.random.default_rng(1).uniform(0, 255, (227, 227, 3))))
    assert grids["conv1"].values.shape == (55, 55, 96)


def test_zero_image_exposes_biases(toy2):
    grids = cnn.forward(toy2, Tensor(np.zeros((8, 8, 3))))
    w1, b1 = toy2.weights["conv1"]
    w2, b2 = toy2.weights["conv2"]
    np.testing.assert_allclose(grids["conv1"].values.data, np.broadcast_to(b1, (8, 8, 6)), atol=1e-12)
    interior = b2 + np.einsum("ocyx,c->o", w2, np.maximum(b1, 0))
    np.testing.assert_allclose(grids["conv2"].values.data[1:-1, 1:-1], np.broadcast_to(interior, (6, 6, 8)), atol=1e-12)


def test_post_relu_taps(toy2, rng):
    image = Tensor(rng.standard_normal((8, 8, 3)))
    pre = cnn.forward(toy2, image)
    post = cnn.forward(toy2, image, post_relu=True)
    np.testing.assert_allclose(post["conv1"].values.data, np.maximum(pre["conv1"].values.data, 0))
    # conv2 has no following relu
    np.testing.assert_array_equal(post["conv2"].values.data, pre["conv2"].values.data)


def test_wrong_input_shape(toy2):
    with pytest.raises(ShapeError):
        cnn.forward(toy2, Tensor(np.zeros((7, 8, 3))))


def test_linear_head(rng):
    spec = conv_spec(
        [conv("conv1", 2, k=3), {"kind": "linear", "name": "fc", "out_features": 4}], ["conv1", "fc"], (5, 5, 1)
    )
    model = cnn.init_random(spec, rng)
    image = rng.standard_normal((5, 5, 1))
    grids = cnn.forward(model, Tensor(image))
    assert grids["fc"].values.shape == (1, 1, 4)
    kernel, bias = model.weights["fc"]
    flat = np.transpose(grids["conv1"].values.data, (2, 0, 1)).reshape(-1)
    np.testing.assert_allclose(grids["fc"].values.data.reshape(-1), flat @ kernel + bias, atol=1e-12)


def test_spec_validation():
    with pytest.raises(ValidationError):
        conv_spec([conv("conv1", 2), {"kind": "relu", "name": "conv1"}], ["conv1"], (5, 5, 3))
    with pytest.raises(ValidationError):
        conv_spec([conv("conv1", 2), {"kind": "relu", "name": "relu1"}], ["relu1"], (5, 5, 3))
    with pytest.raises(ValidationError):
        conv_spec([conv("conv1", 2, k=7)], ["conv1"], (5, 5, 3))


# ------------------------- Persistence -------------------------------

def test_save_load_is_bit_identical(toy2, tmp_path):
    path = tmp_path / "toy.vlmw"
    cnn.save_model(toy2, path)
    back = cnn.load_model(path)
    assert back.spec == toy2.spec
    for name, (kernel, bias) in toy2.weights.items():
        np.testing.assert_array_equal(back.weights[name][0], kernel)
        np.testing.assert_array_equal(back.weights[name][1], bias)
    cnn.save_model(back, tmp_path / "again.vlmw")
    assert (tmp_path / "again.vlmw").read_bytes() == path.read_bytes()


def test_load_rejects_bad_weights(toy2, tmp_path):
    meta = {"spec": toy2.spec.model_dump()}
    tensors = {f"{n}.{part}": arr for n, (k, b) in toy2.weights.items() for part, arr in (("kernel", k), ("bias", b))}

    short = dict(tensors, **{"conv1.bias": np.zeros(5)})
    container.write(tmp_path / "short.vlmw", container.MAGIC_WEIGHTS, short, meta)
    with pytest.raises(ShapeMismatchError):
        cnn.load_model(tmp_path / "short.vlmw")

    nan = dict(tensors, **{"conv2.bias": np.full(8, np.nan)})
    container.write(tmp_path / "nan.vlmw", container.MAGIC_WEIGHTS, nan, meta)
    with pytest.raises(NonFiniteWeightsError):
        cnn.load_model(tmp_path / "nan.vlmw")
