import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrsepsis.evaluation import auroc
from ehrsepsis.features import SequenceMatrix
from ehrsepsis.nn import layers as L
from ehrsepsis.nn.gradcheck import CHECKS, grad_check
from ehrsepsis.nn.models import CnnLstm, CnnLstmSpec, Mlp, MlpSpec
from ehrsepsis.nn.serialize import ModelFormatError, dumps_model, load_model, loads_model, save_model
from ehrsepsis.nn.train import ArrayDataset, SequenceDataset, TrainConfig, TrainingDiverged, train


def _matrix(dense_events, context):
    r, c = np.nonzero(dense_events)
    return SequenceMatrix(dense_events.shape[0], dense_events.shape[1], r, c, dense_events[r, c],
                          np.asarray(context, float))


def _small_cnn(seed=0, k=6, c=2):
    spec = CnnLstmSpec(n_in=k + c, embed_dim=8, conv_depths=((6, 6),) + ((4, 4),) * 4, lstm_units=5)
    model = CnnLstm(spec, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for key in model.params:
        if key.endswith("_b"):
            model.params[key] = rng.normal(scale=0.1, size=model.params[key].shape)
    return model


def _random_matrix(rng, n, k=6, c=2, density=0.3):
    x = rng.normal(size=(n, k)) * (rng.random((n, k)) < density)
    return _matrix(x, rng.normal(size=c))


def _separable(seed, n=200):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    X += np.outer(2 * y - 1, [0.3, 0.15])  # open a margin
    return X, y


# -- gradient checks ----------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("layer", sorted(CHECKS))
def test_gradients_match_finite_differences(layer, seed):
    tol = 1e-5 if layer == "dense" else 1e-4
    assert grad_check(layer, seed) < tol


# -- layers ----------------------------------------------------------------------

def test_causal_conv_known_values():
    x = np.arange(1.0, 5.0)[:, None]
    W = np.array([1.0, 10.0, 100.0]).reshape(3, 1, 1)  # taps: t-2, t-1, t
    y, _ = L.causal_conv1d_forward(x, W, np.zeros(1))
    assert y[:, 0].tolist() == [100, 210, 321, 432]


def test_maxpool_keeps_trailing_odd_step():
    x = np.array([[1.0], [3.0], [2.0], [0.0], [5.0]])
    y, _ = L.maxpool1d_forward(x)
    assert y[:, 0].tolist() == [3, 2, 5]


def test_pooled_length_bookkeeping():
    spec = CnnLstmSpec(n_in=3)
    for n in range(1, 1441):
        m = n
        for k in range(1, 6):
            m = L.pooled_length(m)
            assert m == -(-n // 2 ** k)
        assert spec.output_length(n) == -(-n // 32)


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(0).normal(scale=30, size=(50, 2))
    assert np.all(np.abs(L.softmax(z).sum(axis=1) - 1) < 1e-12)


def test_shape_errors():
    with pytest.raises(L.ShapeError):
        L.causal_conv1d_forward(np.zeros((4, 2)), np.zeros((3, 3, 1)), np.zeros(1))
    with pytest.raises(L.ShapeError):
        L.causal_conv1d_forward(np.zeros((0, 2)), np.zeros((3, 2, 1)), np.zeros(1))


# -- CNN-LSTM ---------------------------------------------------------------------

def test_stride_is_32_rows():
    model = _small_cnn()
    assert model.spec.stride == 32
    risk, _ = model.forward(_random_matrix(np.random.default_rng(0), 1024))
    assert risk.shape == (32,)
    assert 32 * 5 == 160  # minutes between output steps at 5-minute rows


def test_zero_input_gives_constant_risk():
    spec = CnnLstmSpec(n_in=8, embed_dim=8, conv_depths=((6, 6),) + ((4, 4),) * 4, lstm_units=5)
    risk, _ = CnnLstm(spec, seed=0).forward(_matrix(np.zeros((200, 6)), np.zeros(2)))
    assert np.all(risk == risk[0])


def test_risks_are_probabilities():
    model = _small_cnn()
    risk, _ = model.forward(_random_matrix(np.random.default_rng(1), 300))
    assert np.all((risk > 0) & (risk < 1))


def test_future_rows_leave_earlier_steps_bitwise_unchanged():
    model = _small_cnn()
    rng = np.random.default_rng(3)
    n = 320
    base = rng.normal(size=(n, 6)) * (rng.random((n, 6)) < 0.3)
    ctx = rng.normal(size=2)
    ref, _ = model.forward(_matrix(base, ctx))
    for j in range(0, n // 32 - 1):
        last_in_cone = 32 * j + 31
        x = base.copy()
        x[last_in_cone + 1:] += rng.normal(size=(n - last_in_cone - 1, 6))
        out, _ = model.forward(_matrix(x, ctx))
        assert np.array_equal(out[:j + 1], ref[:j + 1])
        # the newest in-cone row reaches step j: some large kick survives the ReLUs and max-pools
        moved = False
        for _ in range(64):
            x = base.copy()
            x[last_in_cone] += 1e4 * rng.normal(size=6)
            out, _ = model.forward(_matrix(x, ctx))
            moved = moved or out[j] != ref[j]
        assert moved


def test_receptive_field_span_by_perturbation():
    # input rows that can move pooled conv output j; large kicks defeat ReLU and max-pool masking
    model = _small_cnn()
    rng = np.random.default_rng(4)
    n = 640
    base = rng.normal(size=(n, 6))
    ctx = np.zeros(2)
    j = 15
    ref, cache = model.forward(_matrix(base, ctx))
    pooled_ref = cache.blocks[-1][2][j].copy()
    reach = []
    for r in range(0, 32 * j + 32):
        for sign in (1.0, -1.0):
            x = base.copy()
            x[r] += sign * 1e4 * rng.normal(size=6)
            _, c2 = model.forward(_matrix(x, ctx))
            if not np.array_equal(c2.blocks[-1][2][j], pooled_ref):
                reach.append(r)
                break
    span = 32 * j + 31 - min(reach) + 1
    assert max(reach) == 32 * j + 31
    assert span == 156  # 13 h at 5-minute rows
    # nothing after the cone reaches it
    x = base.copy()
    x[32 * j + 32:] += 1e4
    _, c2 = model.forward(_matrix(x, ctx))
    assert np.array_equal(c2.blocks[-1][2][j], pooled_ref)


def test_prefix_risk_matches_full_forward():
    model = _small_cnn()
    rng = np.random.default_rng(5)
    m = _random_matrix(rng, 150)
    _, cache = model.forward(m)
    for n in (1, 2, 31, 32, 33, 64, 97, 150):
        head = m.head(n)
        want = model.predict_last(head)
        last = model.embed_row(head.event_csr().toarray()[-1], head.context)
        assert model.prefix_risk(cache, n, last) == pytest.approx(want, abs=1e-12)


def test_inference_is_deterministic_and_training_state_is_seeded():
    model = _small_cnn()
    m = _random_matrix(np.random.default_rng(6), 100)
    assert np.array_equal(model.forward(m)[0], model.forward(m)[0])
    a = model.loss_and_grads(m, 1, rng=np.random.default_rng(1))[0]
    b = model.loss_and_grads(m, 1, rng=np.random.default_rng(1))[0]
    assert a == b


# -- MLP ------------------------------------------------------------------------------

def test_zero_weights_give_one_half():
    model = Mlp(MlpSpec(n_in=5, hidden=(4, 3)))
    for k in model.params:
        model.params[k][...] = 0
    assert np.all(model.predict_proba(np.random.default_rng(0).normal(size=(7, 5))) == 0.5)


def test_dropout_off_is_deterministic_and_on_is_seeded():
    model = Mlp(MlpSpec(n_in=5, hidden=(8,), dropout=0.3), seed=1)
    X = np.random.default_rng(0).normal(size=(6, 5))
    assert np.array_equal(model.predict_proba(X), model.predict_proba(X))
    y = np.array([0, 1, 0, 1, 1, 0])
    g1 = model.loss_and_grads(X, y, rng=np.random.default_rng(9), train=True)[1]
    g2 = model.loss_and_grads(X, y, rng=np.random.default_rng(9), train=True)[1]
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)
    a, _ = L.dropout_forward(np.ones((100, 100)), 0.3, np.random.default_rng(0), True)
    assert 0.25 < np.mean(a == 0) < 0.35


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_separable_toy_set_is_fit(seed):
    X, y = _separable(seed)
    model = Mlp(MlpSpec(n_in=2, hidden=(16,), dropout=0.0), seed=seed)
    before = model.loss_and_grads(X, y, train=False)[0]
    train(model, ArrayDataset(X, y), None, TrainConfig(batch_size=50, lr=1e-2, epochs=1, seed=seed))
    assert model.loss_and_grads(X, y, train=False)[0] < before
    train(model, ArrayDataset(X, y), None, TrainConfig(batch_size=50, lr=1e-2, epochs=49, seed=seed))
    assert auroc(model.predict_proba(X), y) >= 0.99


def test_zero_learning_rate_leaves_parameters():
    X, y = _separable(0)
    model = Mlp(MlpSpec(n_in=2, hidden=(8,)), seed=0)
    before = {k: v.copy() for k, v in model.params.items()}
    train(model, ArrayDataset(X, y), None, TrainConfig(lr=0.0, epochs=1))
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_training_is_reproducible():
    X, y = _separable(1)
    runs = []
    for _ in range(2):
        model = Mlp(MlpSpec(n_in=2, hidden=(8,)), seed=3)
        params, hist = train(model, ArrayDataset(X, y), ArrayDataset(X[:50], y[:50]),
                             TrainConfig(lr=1e-2, epochs=3, seed=4))
        runs.append((params, [{k: v for k, v in h.items() if k != "seconds"} for h in hist]))
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0])
    assert {"epoch", "train_loss", "val_loss", "val_auroc"} <= set(runs[0][1][0])


def test_sequence_training_is_reproducible():
    rng = np.random.default_rng(0)
    mats = [_random_matrix(rng, int(n)) for n in rng.integers(40, 120, 8)]
    y = np.array([0, 1] * 4)
    outs = []
    for _ in range(2):
        model = _small_cnn(1)
        params, _ = train(model, SequenceDataset(mats, y, (0, 6)), None,
                          TrainConfig(batch_size=4, lr=1e-3, epochs=2, seed=2))
        outs.append(params)
    assert all(np.array_equal(outs[0][k], outs[1][k]) for k in outs[0])


def test_divergence_is_reported():
    X = np.ones((10, 2))
    X[3, 1] = np.inf
    y = np.array([0, 1] * 5)
    with pytest.raises(TrainingDiverged), np.errstate(all="ignore"):
        train(Mlp(MlpSpec(n_in=2, hidden=(4,)), seed=0), ArrayDataset(X, y), None, TrainConfig(epochs=1))


def test_empty_training_set_is_an_error():
    with pytest.raises(ValueError):
        train(Mlp(MlpSpec(n_in=2, hidden=(4,))), ArrayDataset(np.zeros((0, 2)), np.zeros(0)), None)


# -- serialization --------------------------------------------------------------

def test_model_files_round_trip(tmp_path):
    mlp = Mlp(MlpSpec(n_in=4, hidden=(3,)), seed=2)
    cnn = _small_cnn(2)
    X = np.random.default_rng(0).normal(size=(3, 4))
    m = _random_matrix(np.random.default_rng(1), 70)
    save_model(tmp_path / "mlp.bin", mlp, {"note": "x"})
    back, header = load_model(tmp_path / "mlp.bin")
    assert header["meta"] == {"note": "x"}
    assert np.array_equal(back.predict_proba(X), mlp.predict_proba(X))
    back, _ = loads_model(dumps_model(cnn))
    assert back.spec == cnn.spec
    assert np.array_equal(back.forward(m)[0], cnn.forward(m)[0])
    assert dumps_model(cnn) == dumps_model(back)


def test_model_format_errors():
    with pytest.raises(ModelFormatError):
        loads_model(b"garbage")
    data = dumps_model(Mlp(MlpSpec(n_in=2, hidden=(2,))))
    with pytest.raises(ModelFormatError):
        loads_model(data + b"\0")


# -- properties ------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2 ** 31))
def test_causality_property(n, seed):
    model = _small_cnn()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 6))
    ref, _ = model.forward(_matrix(x, np.ones(2)))
    assert len(ref) == -(-n // 32)
    cut = int(rng.integers(0, n))
    y = x.copy()
    y[cut:] = rng.normal(size=(n - cut, 6))
    out, _ = model.forward(_matrix(y, np.ones(2)))
    safe = cut // 32  # steps whose cone ends before the cut
    assert np.array_equal(out[:safe], ref[:safe])
