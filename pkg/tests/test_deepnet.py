import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmrac.deepnet import (
    DeepFeatureNetwork,
    SgdConfig,
    TrainBatch,
    batch_gradient,
    batch_loss,
    forward_features,
    forward_output,
    init_network,
    load_network,
    save_network,
    sgd_step,
    swap_features,
    train,
    with_output,
)
from dmrac.errors import DimensionMismatch, EmptyBatch
from dmrac.numerics import make_rng
from dmrac.verify import finite_difference_gradient


def scalar_net(w):
    return DeepFeatureNetwork((), np.array([[w]]))


def one_layer(row, out=1.0):
    return DeepFeatureNetwork((np.array([row + [0.0]]),), np.array([[out]]))


def random_net(rng, depth=None, m=None):
    depth = int(rng.integers(1, 4)) if depth is None else depth
    n = int(rng.integers(1, 4))
    widths = [int(rng.integers(1, 9)) for _ in range(depth)]
    m = int(rng.integers(1, 3)) if m is None else m
    return init_network([n] + widths, m, rng, output=rng.normal(size=(widths[-1], m)))


# ------------------------------------------------------------------ forward


def test_zero_network_features():
    net = DeepFeatureNetwork((np.zeros((3, 3)), np.zeros((2, 4))), np.ones((2, 1)))
    for x in ([0.0, 0.0], [5.0, -3.0]):
        assert np.array_equal(forward_features(net, x), [0.0, 0.0])


def test_single_tanh_feature():
    net = one_layer([1.0, 0.0])
    assert forward_features(net, [0.5, 9.0])[0] == pytest.approx(0.46211716, abs=1e-8)


def test_forward_output_example():
    net = one_layer([1.0, 0.0], out=2.0)
    assert forward_output(net, [0.5, 9.0])[0] == pytest.approx(0.92423432, abs=1e-8)


def test_zero_output_layer():
    net = init_network([2, 5, 3], 1, make_rng(0))
    assert np.array_equal(forward_output(net, [1.0, 2.0]), [0.0])


def test_output_decomposition():
    rng = make_rng(1)
    net = random_net(rng)
    x = rng.normal(size=net.n)
    assert np.array_equal(forward_output(net, x), net.output.T @ forward_features(net, x))


def test_features_strictly_inside_unit_box():
    rng = make_rng(2)
    for _ in range(10):
        net = random_net(rng)
        X = rng.normal(scale=3.0, size=(100, net.n))
        assert np.all(np.abs(np.array([forward_features(net, x) for x in X])) < 1)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 1e3))
def test_feature_norm_bound(seed, scale):
    rng = make_rng(seed)
    net = random_net(rng)
    x = rng.normal(scale=scale, size=net.n)
    assert np.linalg.norm(forward_features(net, x)) <= np.sqrt(net.k) + 1e-12


def test_init_network_layout():
    net = init_network([2, 20, 10], 1, make_rng(0))
    assert net.layer_dims == [2, 20, 10, 1]
    assert [w.shape for w in net.inner] == [(20, 3), (10, 21)]
    assert net.n_weights() == 20 * 3 + 10 * 21 + 10
    assert np.all(net.inner[0][:, -1] == 0) and np.all(np.abs(net.inner[0][:, :-1]) <= 1 / np.sqrt(2))


def test_init_network_seeded():
    a, b = init_network([2, 4], 1, make_rng(5)), init_network([2, 4], 1, make_rng(5))
    assert np.array_equal(a.inner[0], b.inner[0])


def test_shape_mismatch_rejected():
    with pytest.raises(DimensionMismatch):
        DeepFeatureNetwork((np.zeros((3, 3)), np.zeros((2, 3))), np.zeros((2, 1)))
    with pytest.raises(DimensionMismatch):
        DeepFeatureNetwork((np.zeros((3, 3)),), np.zeros((2, 1)))


# --------------------------------------------------------------------- loss


def test_loss_perfect_fit():
    rng = make_rng(3)
    net = random_net(rng)
    X = rng.normal(size=(4, net.n))
    Y = np.array([forward_output(net, x) for x in X])
    assert batch_loss(net, TrainBatch(X, Y)) == pytest.approx(0.0, abs=1e-30)


def test_loss_unit_residual():
    net = DeepFeatureNetwork((), np.zeros((1, 1)))
    assert batch_loss(net, TrainBatch([[3.0]], [[1.0]])) == 1.0


def test_loss_average():
    net = DeepFeatureNetwork((), np.zeros((1, 1)))
    assert batch_loss(net, TrainBatch([[0.0], [0.0]], [[1.0], [2.0]])) == 2.5


def test_empty_batch():
    with pytest.raises(EmptyBatch):
        TrainBatch(np.zeros((0, 2)), np.zeros((0, 1)))


# ----------------------------------------------------------------- gradient


def test_gradient_scalar_hand_value():
    _, g_out = batch_gradient(scalar_net(1.0), TrainBatch([[2.0]], [[0.0]]))
    assert g_out[0, 0] == 8.0


def test_gradient_zero_residual():
    rng = make_rng(4)
    net = random_net(rng)
    X = rng.normal(size=(3, net.n))
    Y = np.array([forward_output(net, x) for x in X])
    g_inner, g_out = batch_gradient(net, TrainBatch(X, Y))
    assert all(np.allclose(g, 0.0, atol=1e-15) for g in g_inner + (g_out,))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(seed):
    rng = make_rng(seed)
    net = random_net(rng)
    M = int(rng.integers(1, 5))
    batch = TrainBatch(rng.normal(size=(M, net.n)), rng.normal(size=(M, net.m)))
    g_inner, g_out = batch_gradient(net, batch)
    f_inner, f_out = finite_difference_gradient(net, batch)
    for g, f in zip(g_inner + (g_out,), f_inner + (f_out,)):
        assert np.all(np.abs(g - f) / np.maximum(1.0, np.abs(f)) <= 1e-5)


def test_gradient_deterministic():
    rng = make_rng(6)
    net = random_net(rng)
    batch = TrainBatch(rng.normal(size=(3, net.n)), rng.normal(size=(3, net.m)))
    a, b = batch_gradient(net, batch), batch_gradient(net, batch)
    assert all(np.array_equal(x, y) for x, y in zip(a[0] + (a[1],), b[0] + (b[1],)))


# ---------------------------------------------------------------------- sgd


def test_sgd_scalar_hand_update():
    net = sgd_step(scalar_net(1.0), TrainBatch([[2.0]], [[0.0]]), 0.1)
    assert net.output[0, 0] == pytest.approx(0.2, abs=1e-15)


def test_sgd_zero_gradient_is_identity():
    rng = make_rng(7)
    net = random_net(rng)
    X = rng.normal(size=(2, net.n))
    Y = np.array([forward_output(net, x) for x in X])
    batch = TrainBatch(X, Y)
    zero = lambda n, b: (tuple(np.zeros_like(w) for w in n.inner), np.zeros_like(n.output))
    stepped = sgd_step(net, batch, 0.5, gradient=zero)
    assert all(np.array_equal(a, b) for a, b in zip(net.inner + (net.output,), stepped.inner + (stepped.output,)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_small_step_descends(seed):
    rng = make_rng(seed)
    net = random_net(rng)
    batch = TrainBatch(rng.normal(size=(3, net.n)), rng.normal(size=(3, net.m)))
    g_inner, g_out = batch_gradient(net, batch)
    if np.sqrt(sum(np.sum(g * g) for g in g_inner + (g_out,))) > 1e-6:
        assert batch_loss(sgd_step(net, batch, 1e-4), batch) <= batch_loss(net, batch) + 1e-12


def test_overfit_small_dataset():
    rng = make_rng(8)
    net = init_network([2, 16, 8], 1, rng, output=rng.normal(scale=0.1, size=(8, 1)))
    batch = TrainBatch(rng.uniform(-1, 1, size=(10, 2)), rng.uniform(-1, 1, size=(10, 1)))
    trained, loss = train(net, lambda: batch, SgdConfig(0.1, 20000, 10))
    assert loss <= 1e-3
    assert batch_loss(trained, batch) == loss


def test_train_runs_requested_batches():
    calls = []
    batch = TrainBatch([[1.0]], [[1.0]])

    def sample():
        calls.append(1)
        return batch

    train(scalar_net(0.0), sample, SgdConfig(0.1, 3, 1), batches_per_epoch=4)
    assert len(calls) == 12


# --------------------------------------------------------------------- swap


def test_swap_identity():
    rng = make_rng(9)
    net = random_net(rng)
    x = rng.normal(size=net.n)
    assert np.array_equal(forward_features(swap_features(net, net.inner), x), forward_features(net, x))


def test_swap_keeps_output_and_matches_fresh():
    rng = make_rng(10)
    net = init_network([2, 5, 3], 1, rng, output=np.ones((3, 1)))
    other = init_network([2, 5, 3], 1, rng)
    swapped = swap_features(net, other.inner)
    x = rng.normal(size=2)
    assert np.array_equal(swapped.output, net.output)
    assert np.array_equal(forward_features(swapped, x), forward_features(DeepFeatureNetwork(other.inner, net.output), x))


def test_swap_rejects_width_change():
    rng = make_rng(11)
    net = init_network([2, 5, 3], 1, rng)
    with pytest.raises(DimensionMismatch):
        swap_features(net, init_network([2, 5, 4], 1, rng).inner)


def test_with_output():
    net = init_network([2, 3], 1, make_rng(0))
    assert np.array_equal(with_output(net, np.full((3, 1), 2.0)).output, np.full((3, 1), 2.0))


# -------------------------------------------------------------- persistence


def test_save_load_roundtrip(tmp_path):
    rng = make_rng(12)
    net = init_network([2, 7, 4], 2, rng, output=rng.normal(size=(4, 2)))
    path = tmp_path / "w.dmrn"
    save_network(net, path)
    back = load_network(path)
    assert back.layer_dims == net.layer_dims
    assert all(np.array_equal(a, b) for a, b in zip(net.inner + (net.output,), back.inner + (back.output,)))


def test_file_layout(tmp_path):
    net = DeepFeatureNetwork((np.array([[1.0, 2.0, 3.0]]),), np.array([[4.0]]))
    path = tmp_path / "w.dmrn"
    save_network(net, path)
    data = path.read_bytes()
    header = b"DMRN" + np.array([1, 2, 2, 1, 1], dtype="<u4").tobytes()
    assert data == header + np.array([1.0, 2.0, 3.0, 4.0], dtype="<f8").tobytes()


def test_load_rejects_corrupt(tmp_path):
    net = init_network([2, 3], 1, make_rng(0))
    path = tmp_path / "w.dmrn"
    save_network(net, path)
    data = path.read_bytes()
    for bad in (b"XXXX" + data[4:], data[:-3], data + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(ValueError):
            load_network(path)
