import numpy as np
import pytest
from scipy.special import expit

from app import cnn, preprocess, synthetic, vlm
from app import tensor as T
from app.errors import DataError, EmptyCorpusError, MissingWeightError, NonFiniteError, ShapeError
from app.gradcheck import check_gradient
from app.models import TrainHyperParams
from app.tensor import Tensor
from tests.helpers import identity_preprocess, random_model, zero_model


# ------------------------- numpy oracle -------------------------------

def _np_lstm(p, x, h, c):
    def gate(g, act):
        return act(x @ getattr(p, f"wx_{g}").data + h @ getattr(p, f"wh_{g}").data + getattr(p, f"b_{g}").data)

    i, f, o = gate("i", expit), gate("f", expit), gate("o", expit)
    c_t = i * gate("c", np.tanh) + f * c
    return o * np.tanh(c_t), c_t


def _np_predict(stack, seq):
    d1, d2 = stack.lstm1.d_hidden, stack.lstm2.d_hidden
    h1, c1, h2, c2 = np.zeros(d1), np.zeros(d1), np.zeros(d2), np.zeros(d2)
    out = []
    for t in range(seq.shape[0] - 1):
        h1, c1 = _np_lstm(stack.lstm1, seq[t], h1, c1)
        h2, c2 = _np_lstm(stack.lstm2, h1, h2, c2)
        out.append(h2 @ stack.out_w.data + stack.out_b.data)
    return np.array(out)


def _np_errors(stack, seq):
    """err[t] for t = 1..T-1 (0-based); entry 0 is unused."""
    mu = _np_predict(stack, seq)
    return np.concatenate([[np.nan], np.sum((seq[1:] - mu) ** 2, axis=1)])


def _oracle_map(model, x, symmetric=False):
    """Straight loops over the 1-based formula for each map entry."""
    h, w, _ = x.shape
    p = model.predictors
    right = [_np_errors(p["right"], x[r]) for r in range(h)]
    left = [_np_errors(p["left"], x[r, ::-1])[::-1] for r in range(h)]
    down = [_np_errors(p["down"], x[:, c]) for c in range(w)]
    up = [_np_errors(p["up"], x[::-1, c])[::-1] for c in range(w)]
    shift = 1 if symmetric else 0
    u = np.zeros((h - 1, w - 1))
    for i in range(1, h):
        for j in range(1, w):
            u[i - 1, j - 1] = (
                (j + 1) / w * right[i - 1][j]
                + (w - j + 1 - shift) / w * left[i - 1][j - 1]
                + (i + 1) / h * down[j - 1][i]
                + (h - i + 1 - shift) / h * up[j - 1][i - 1]
            )
    return u


# ------------------------- Cells -------------------------------

def test_rnn_step_basics(rng):
    x, h = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
    zero = vlm.rnn_step(T.zeros((3, 3)), T.zeros((3, 3)), T.zeros((3,)), x, h)
    np.testing.assert_array_equal(zero.data, np.zeros(3))
    ident = vlm.rnn_step(Tensor(np.eye(3)), T.zeros((3, 3)), T.zeros((3,)), x, h)
    np.testing.assert_allclose(ident.data, np.tanh(x.data), rtol=1e-14)

    wx, wh, b = (rng.standard_normal(s) for s in ((3, 2), (2, 2), (2,)))
    hp = rng.standard_normal(2)
    out = vlm.rnn_step(Tensor(wx), Tensor(wh), Tensor(b), x, Tensor(hp))
    np.testing.assert_allclose(out.data, np.tanh(x.data @ wx + hp @ wh + b), rtol=1e-13)


def test_lstm_step_with_zero_parameters(rng):
    model = random_model(4)
    zeros = {n: np.zeros(t.shape) for n, t in vlm.named_parameters(model).items()}
    zero = vlm.replace_parameters(model, zeros).predictors["right"].lstm1
    v = rng.standard_normal(2)
    h, c = vlm.lstm_step(zero, Tensor(rng.standard_normal(4)), T.zeros((2,)), Tensor(v))
    np.testing.assert_allclose(c.data, 0.5 * v, rtol=1e-14)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * v), rtol=1e-14)


def test_lstm_step_matches_direct_formula(rng):
    params = random_model(6, seed=3).predictors["down"].lstm1
    x, h, c = rng.standard_normal((5, 6)), rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    h_t, c_t = vlm.lstm_step(params, Tensor(x), Tensor(h), Tensor(c))
    h_ref, c_ref = _np_lstm(params, x, h, c)
    np.testing.assert_allclose(h_t.data, h_ref, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(c_t.data, c_ref, rtol=1e-13, atol=1e-15)


# ------------------------- Sequences -------------------------------

def test_predictions_are_causal(rng):
    stack = random_model(4, seed=1).predictors["right"]
    s = rng.standard_normal((8, 4))
    base = vlm.predict_sequence(stack, Tensor(s)).data
    for p in range(1, 8):
        bumped = s.copy()
        bumped[p:] += rng.standard_normal((8 - p, 4))
        out = vlm.predict_sequence(stack, Tensor(bumped)).data
        np.testing.assert_array_equal(out[:p], base[:p])


def test_zero_stack_predicts_output_bias(rng):
    out_b = rng.standard_normal(4)
    model = zero_model(4, out_b)
    mu = vlm.predict_sequence(model.predictors["up"], Tensor(rng.standard_normal((6, 4)))).data
    np.testing.assert_allclose(mu, np.broadcast_to(out_b, (5, 4)))


def test_sequence_prediction_matches_manual_unroll(rng):
    stack = random_model(4, seed=2).predictors["left"]
    s = rng.standard_normal((5, 4))
    mu = vlm.predict_sequence(stack, Tensor(s)).data
    h1 = c1 = T.zeros((1, stack.lstm1.d_hidden))
    h2 = c2 = T.zeros((1, stack.lstm2.d_hidden))
    for t in range(4):
        h1, c1 = vlm.lstm_step(stack.lstm1, Tensor(s[t:t + 1]), h1, c1)
        h2, c2 = vlm.lstm_step(stack.lstm2, h1, h2, c2)
        expected = h2.data @ stack.out_w.data + stack.out_b.data
        np.testing.assert_allclose(mu[t], expected[0], rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(mu, _np_predict(stack, s), rtol=1e-12, atol=1e-14)


def test_batched_prediction_matches_single(rng):
    stack = random_model(4, seed=5).predictors["down"]
    batch = rng.standard_normal((3, 6, 4))
    out = vlm.predict_sequence(stack, Tensor(batch)).data
    for n in range(3):
        np.testing.assert_allclose(out[n], vlm.predict_sequence(stack, Tensor(batch[n])).data, rtol=1e-13, atol=1e-15)


def test_sequence_errors(rng):
    stack = random_model(4).predictors["right"]
    with pytest.raises(ShapeError):
        vlm.predict_sequence(stack, Tensor(rng.standard_normal((1, 4))))
    with pytest.raises(ShapeError):
        vlm.predict_sequence(stack, Tensor(rng.standard_normal((5, 3))))


def test_sequence_nll_values():
    s = Tensor([[0.0], [1.0], [2.0]])
    assert vlm.sequence_nll(s, Tensor([[1.0], [2.0]])).item() == 0.0
    # (1/3) * (2/3 * 1 + 3/3 * 4)
    assert vlm.sequence_nll(s, Tensor([[0.0], [0.0]])).item() == pytest.approx(14 / 9)
    two = Tensor([[0.0, 0.0], [1.0, 1.0]])
    assert vlm.sequence_nll(two, Tensor([[0.0, 0.0]])).item() == pytest.approx(1.0)


def test_sequence_nll_weights_later_steps_more():
    s = Tensor([[0.0], [1.0], [2.0]])
    early = vlm.sequence_nll(s, Tensor([[0.0], [2.0]])).item()
    late = vlm.sequence_nll(s, Tensor([[1.0], [1.0]])).item()
    assert late > early
    with pytest.raises(ShapeError):
        vlm.sequence_nll(s, Tensor([[0.0]]))


def test_sequence_nll_literal_cases():
    assert vlm.sequence_nll(Tensor([[0.0], [2.0]]), Tensor([[0.0]])).item() == pytest.approx(2.0)
    s = Tensor([[0.0], [1.0], [3.0]])
    assert vlm.sequence_nll(s, Tensor([[0.0], [0.0]])).item() == pytest.approx(29 / 9)


def test_sequence_nll_matches_loop_oracle():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        steps, d = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        s = rng.standard_normal((steps, d))
        mu = rng.standard_normal((steps - 1, d))
        expected = 0.0
        for t in range(2, steps + 1):
            expected += t / steps * sum((s[t - 1, k] - mu[t - 2, k]) ** 2 for k in range(d))
        expected /= steps
        assert vlm.sequence_nll(Tensor(s), Tensor(mu)).item() == pytest.approx(expected, rel=1e-10, abs=1e-12)


# ------------------------- Maps -------------------------------

def test_constant_grid_with_matching_bias_is_natural(rng):
    c = rng.standard_normal(3)
    model = zero_model(3, c)
    grid = Tensor(np.broadcast_to(c, (4, 5, 3)))
    u = vlm.unnaturalness_map(model, grid, already_preprocessed=True)
    assert u.values.shape == (3, 4)
    np.testing.assert_allclose(u.values.data, 0.0, atol=1e-24)


def test_unit_residuals_on_smallest_grid():
    model = zero_model(2, np.array([1.0, 0.0]))
    grid = Tensor(np.zeros((2, 2, 2)))
    u = vlm.unnaturalness_map(model, grid, already_preprocessed=True)
    np.testing.assert_allclose(u.values.data, [[4.0]])
    sym = vlm.unnaturalness_map(model, grid, already_preprocessed=True, symmetric=True)
    np.testing.assert_allclose(sym.values.data, [[3.0]])


@pytest.mark.parametrize("symmetric", [False, True])
def test_map_matches_loop_oracle(symmetric):
    for seed in range(50):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(2, 6, size=2)
        k = int(rng.integers(2, 5))
        model = random_model(k, seed=seed)
        x = rng.standard_normal((h, w, k))
        u = vlm.unnaturalness_map(model, Tensor(x), already_preprocessed=True, symmetric=symmetric).values.data
        np.testing.assert_allclose(u, _oracle_map(model, x, symmetric), rtol=1e-10, atol=1e-12)


def test_map_runs_preprocessing(rng):
    params = preprocess.fit([rng.standard_normal((5, 5, 6)) for _ in range(4)])
    model = vlm.init_layer_model("conv1", params, seed=0)
    raw = rng.standard_normal((4, 4, 6))
    direct = vlm.unnaturalness_map(model, cnn.FeatureGrid("conv1", Tensor(raw))).values.data
    pre = preprocess.apply_values(params, Tensor(raw))
    via = vlm.unnaturalness_map(model, pre, already_preprocessed=True).values.data
    np.testing.assert_allclose(direct, via, rtol=1e-13)
    assert np.all(direct >= 0)


def test_map_errors(rng):
    model = random_model(3)
    with pytest.raises(ShapeError):
        vlm.unnaturalness_map(model, Tensor(rng.standard_normal((1, 5, 3))), already_preprocessed=True)
    with pytest.raises(ShapeError):
        vlm.unnaturalness_map(model, Tensor(rng.standard_normal((4, 4, 4))), already_preprocessed=True)
    with pytest.raises(ShapeError):
        vlm.unnaturalness_map(model, Tensor(rng.standard_normal((4, 4, 3))))


# ------------------------- Scores -------------------------------

def test_layer_score_is_map_mean():
    assert vlm.layer_unnaturalness(Tensor([[0.0]])).item() == 0.0
    assert vlm.layer_unnaturalness(Tensor(np.full((3, 2), 4.0))).item() == 4.0
    assert vlm.layer_unnaturalness(vlm.UnnaturalnessMap(Tensor([[1.0, 2.0], [3.0, 4.0]]))).item() == 2.5
    with pytest.raises(DataError):
        vlm.layer_unnaturalness(Tensor(np.zeros((0, 3))))


def test_image_score_with_default_weights():
    names = ["conv1", "conv2", "conv3"]
    lambdas = vlm.default_lambdas(names)
    assert lambdas == {"conv1": 1.0, "conv2": 0.1, "conv3": pytest.approx(0.01)}
    score = vlm.image_unnaturalness({n: 1.0 for n in names}, lambdas).item()
    assert score == pytest.approx(1.11)
    with pytest.raises(MissingWeightError):
        vlm.image_unnaturalness({"conv1": 1.0, "conv4": 2.0}, {"conv1": 1.0})


def test_default_weights_for_unnumbered_layers():
    assert vlm.default_lambdas(["a", "b"]) == {"a": 1.0, "b": 0.1}


def test_scores_match_loop_oracle():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        names = [f"conv{n}" for n in range(1, int(rng.integers(1, 5)) + 1)]
        lambdas = {n: float(rng.uniform(0, 2)) for n in names}
        maps = {n: rng.uniform(0, 5, tuple(rng.integers(1, 7, size=2))) for n in names}

        per_layer = {}
        for n, m in maps.items():
            total = 0.0
            for i in range(m.shape[0]):
                for j in range(m.shape[1]):
                    total += m[i, j]
            per_layer[n] = total / m.size
            assert vlm.layer_unnaturalness(Tensor(m)).item() == pytest.approx(per_layer[n], rel=1e-10, abs=1e-12)

        expected = 0.0
        for n in names:
            expected += lambdas[n] * per_layer[n]
        scores = {n: vlm.layer_unnaturalness(Tensor(m)) for n, m in maps.items()}
        assert vlm.image_unnaturalness(scores, lambdas).item() == pytest.approx(expected, rel=1e-10, abs=1e-12)


# ------------------------- Training -------------------------------

def _fd_parameter_gradients(model, batch, objective, names, eps=1e-6):
    params = vlm.named_parameters(model)
    out = {}
    for name in names:
        base = params[name].numpy()
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped[idx] += sign * eps
                m = vlm.replace_parameters(model, {name: bumped})
                vals.append(vlm.minibatch_loss(m, batch, objective, already_preprocessed=True).item())
            grad[idx] = (vals[0] - vals[1]) / (2 * eps)
        out[name] = grad
    return out


def test_bptt_matches_finite_differences_for_every_parameter(rng):
    model = random_model(4, seed=11)
    batch = [Tensor(rng.standard_normal((3, 3, 4))), Tensor(rng.standard_normal((3, 3, 4)))]
    _, grads = vlm.bptt_gradients(model, batch, already_preprocessed=True)
    numeric = _fd_parameter_gradients(model, batch, "joint", list(grads))
    for name, g in grads.items():
        report = check_gradient(g, numeric[name], rel_tol=1e-4, abs_tol=1e-8)
        assert report.passed, (name, report.worst)


def test_per_direction_objective_gradients(rng):
    model = random_model(2, seed=4)
    batch = [Tensor(rng.standard_normal((3, 4, 2)))]
    _, grads = vlm.bptt_gradients(model, batch, objective="per_direction", already_preprocessed=True)
    names = ["right.out_w", "up.lstm1.wx_f", "down.lstm2.b_i", "left.out_b"]
    numeric = _fd_parameter_gradients(model, batch, "per_direction", names)
    for name in names:
        assert check_gradient(grads[name], numeric[name], rel_tol=1e-4, abs_tol=1e-8).passed, name


def test_duplicated_minibatch_has_same_gradient(rng):
    model = random_model(3, seed=2)
    grid = Tensor(rng.standard_normal((4, 4, 3)))
    loss1, g1 = vlm.bptt_gradients(model, [grid], already_preprocessed=True)
    loss2, g2 = vlm.bptt_gradients(model, [grid, grid], already_preprocessed=True)
    assert loss1 == pytest.approx(loss2, rel=1e-12)
    for name in g1:
        np.testing.assert_allclose(g1[name], g2[name], rtol=1e-12, atol=1e-15)


def test_mixed_grid_shapes_in_one_minibatch(rng):
    model = random_model(2, seed=1)
    small, large = Tensor(rng.standard_normal((2, 3, 2))), Tensor(rng.standard_normal((4, 4, 2)))
    both = vlm.minibatch_loss(model, [small, large], already_preprocessed=True).item()
    each = [vlm.minibatch_loss(model, [g], already_preprocessed=True).item() for g in (small, large)]
    assert both == pytest.approx(np.mean(each), rel=1e-12)


def _grid_corpus(rng, count, k=2):
    return [cnn.FeatureGrid("conv1", Tensor(rng.standard_normal((3, 3, 2 * k)))) for _ in range(count)]


def test_zero_learning_rate_keeps_parameters(rng, caplog):
    model = random_model(2)
    hp = TrainHyperParams(lr=0.0, max_iters=3, batch=1, log_every=1)
    trained, history = vlm.train(model, _grid_corpus(rng, 1), hp)
    assert len(history) == 3
    assert history[0] == pytest.approx(history[2], rel=1e-14)
    for name, t in vlm.named_parameters(model).items():
        np.testing.assert_array_equal(vlm.named_parameters(trained)[name].data, t.data)
    assert trained.metadata["iterations"] == 3
    assert "lr=0" in caplog.text


def test_training_is_reproducible(rng):
    corpus = _grid_corpus(rng, 5)
    hp = TrainHyperParams(lr=0.05, max_iters=6, batch=2, seed=9)
    m1, h1 = vlm.train(random_model(2, seed=1), corpus, hp)
    m2, h2 = vlm.train(random_model(2, seed=1), corpus, hp)
    assert h1 == h2
    p1, p2 = vlm.named_parameters(m1), vlm.named_parameters(m2)
    assert p1.keys() == p2.keys()
    for name in p1:
        np.testing.assert_array_equal(p1[name].data, p2[name].data, err_msg=name)


def test_training_reduces_loss_on_constant_grids():
    corpus = [cnn.FeatureGrid("conv1", Tensor(np.full((3, 3, 4), 2.0)))]
    hp = TrainHyperParams(lr=0.05, momentum=0.5, max_iters=60, batch=1)
    _, history = vlm.train(random_model(2, seed=0), corpus, hp)
    assert history[-1] < 0.5 * history[0]


def test_non_finite_grid_stops_training(rng):
    bad = np.zeros((3, 3, 4))
    bad[1, 1, 0] = np.inf
    with pytest.raises(NonFiniteError) as exc:
        vlm.train(random_model(2), [cnn.FeatureGrid("conv1", Tensor(bad))], TrainHyperParams(max_iters=2, batch=1))
    assert exc.value.index == 0


def test_empty_corpus():
    with pytest.raises(EmptyCorpusError):
        vlm.train(random_model(2), [], TrainHyperParams(max_iters=1))


def test_smoothed_history():
    np.testing.assert_allclose(vlm.smoothed([4.0, 2.0, 0.0], window=2), [4.0, 3.0, 1.0])
    assert vlm.smoothed([]).size == 0


@pytest.mark.slow
def test_training_on_texture_features_makes_progress():
    model = synthetic.toy_cnn("3conv", seed=0)
    grids = [cnn.forward(model, Tensor(img))["conv3"] for img in synthetic.corpus_images(seed=0)]
    layer = vlm.init_layer_model("conv3", preprocess.fit(grids), seed=0)
    hp = TrainHyperParams.preset("desk")
    _, history = vlm.train(layer, grids, hp)
    curve = vlm.smoothed(history)
    assert curve[-1] < 0.7 * curve[0]


# ------------------------- Persistence -------------------------------

def test_save_load_round_trip(tmp_path, rng):
    params = preprocess.fit([rng.standard_normal((4, 4, 6)) for _ in range(3)], whiten=True)
    model = vlm.init_layer_model("conv2", params, seed=3, cell="rnn", metadata={"source": "test"})
    path = tmp_path / "conv2.vlmm"
    vlm.save_vlm(model, path)
    back = vlm.load_vlm(path)
    assert back.layer_name == "conv2"
    assert back.predictors["up"].cell == "rnn"
    assert back.preprocess.whiten is True
    assert back.metadata["source"] == "test"
    np.testing.assert_array_equal(back.preprocess.projection, params.projection)
    for name, t in vlm.named_parameters(model).items():
        np.testing.assert_array_equal(vlm.named_parameters(back)[name].data, t.data)


def test_identity_preprocess_helper_shape():
    assert identity_preprocess(8).k == 4
