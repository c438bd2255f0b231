"""Network engine: shapes, gradients against finite differences, training, recurrent variants, search, JSON."""
from __future__ import annotations

import numpy as np
import pytest

from errors import DivergenceError, ModeError, RangeError, ShapeError, StateError
from nnet import (
    Network,
    Topology,
    TrainConfig,
    backprop_gradients,
    dumps,
    fisher_prune,
    forward,
    init,
    je_gradients,
    je_loss,
    je_output,
    je_predict,
    je_session,
    je_step,
    je_train,
    loads,
    loss,
    narx_dataset,
    narx_free_run,
    narx_predict,
    topology_search,
    train,
)

XOR_X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
XOR_Y = np.array([[0.0], [1.0], [1.0], [0.0]])


def _linear_net(weight: list[list[float]], bias: list[float], **topology) -> Network:
    w = np.array(weight, dtype=float)
    return Network(
        topology=Topology((w.shape[1], w.shape[0]), **topology),
        weights=[w],
        biases=[np.array(bias, dtype=float)],
    )


def _finite_difference(f, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            saved = a[idx]
            a[idx] = saved + h
            up = f()
            a[idx] = saved - h
            down = f()
            a[idx] = saved
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def test_init_shapes_for_9_21_2():
    net = init(Topology((9, 21, 2)), seed=1)
    assert [w.shape for w in net.weights] == [(21, 9), (2, 21)]
    assert [b.shape for b in net.biases] == [(21,), (2,)]
    assert net.recurrent is None
    assert np.all(np.abs(net.weights[0]) <= 1 / 3)


def test_init_is_deterministic_per_seed():
    topo = Topology((1, 10, 10, 1))
    a, b, c = init(topo, 5), init(topo, 5), init(topo, 6)
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
    assert not np.array_equal(a.weights[0], c.weights[0])


@pytest.mark.parametrize(
    "sizes, kwargs",
    [
        ((3,), {}),
        ((3, 0, 1), {}),
        ((2, 1), {"recurrence": "jordan_elman"}),
        ((2, 4, 1), {"recurrence": "jordan_elman", "context_decay": 1.0}),
        ((5, 2), {"recurrence": "narx", "input_lags": 2, "output_lags": 1}),
        ((2, 3, 1), {"activation": "relu"}),
    ],
)
def test_invalid_topologies(sizes, kwargs):
    with pytest.raises(ShapeError):
        Topology(sizes, **kwargs)


def test_zero_net_outputs_zero():
    net = init(Topology((3, 4, 2)))
    for w in net.weights:
        w[:] = 0.0
    for b in net.biases:
        b[:] = 0.0
    assert np.array_equal(forward(net, np.array([1.0, -2.0, 7.0])), np.zeros(2))


def test_linear_1_1_net_arithmetic():
    net = _linear_net([[2.0]], [1.0])
    assert forward(net, np.array([3.0])) == pytest.approx([7.0])


def test_forward_is_pure_and_checks_width():
    net = init(Topology((2, 5, 1)), seed=2)
    before = [p.copy() for p in net.params()]
    x = np.array([0.3, -0.4])
    assert np.array_equal(forward(net, x), forward(net, x))
    assert all(np.array_equal(p, q) for p, q in zip(before, net.params()))
    with pytest.raises(ShapeError):
        forward(net, np.ones(3))


def test_normalization_round_trip():
    rng = np.random.default_rng(0)
    net = init(Topology((3, 2, 2)))
    net.x_mean, net.x_scale = rng.normal(size=3) * 100, rng.uniform(0.1, 50, size=3)
    x = rng.normal(size=(20, 3)) * 300
    assert np.allclose(net.denormalize_inputs(net.normalize_inputs(x)), x, rtol=0, atol=1e-12 * np.abs(x).max())


def test_gradients_match_finite_differences_on_100_random_cases():
    rng = np.random.default_rng(123)
    for case in range(100):
        depth = int(rng.integers(0, 3))
        sizes = (int(rng.integers(1, 5)), *[int(rng.integers(1, 6)) for _ in range(depth)], int(rng.integers(1, 4)))
        net = init(Topology(sizes, activation="tanh" if case % 2 else "logistic"), seed=case)
        x = rng.normal(size=(int(rng.integers(1, 8)), sizes[0]))
        y = rng.normal(size=(len(x), sizes[-1]))
        analytic = backprop_gradients(net, x, y).arrays()
        numeric = _finite_difference(lambda: loss(net, x, y), net.params())
        for a, n in zip(analytic, numeric):
            assert _relative_error(a, n) < 1e-6, f"case {case}, sizes {sizes}"


def test_jordan_elman_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    for case in range(10):
        topo = Topology((2, 4, 1), recurrence="jordan_elman", context_decay=0.3, context_mix=0.6)
        net = init(topo, seed=case)
        seqs = rng.normal(size=(5, 6, 2))
        targets = rng.normal(size=(5, 1))
        analytic = je_gradients(net, seqs, targets).arrays()
        numeric = _finite_difference(lambda: je_loss(net, seqs, targets), net.params())
        for a, n in zip(analytic, numeric):
            assert _relative_error(a, n) < 1e-6


@pytest.mark.parametrize("steps", [1, 2])
def test_short_je_sequences_backprop_through_the_output_step(steps):
    rng = np.random.default_rng(17 + steps)
    topo = Topology((3, 5, 2), recurrence="jordan_elman", context_decay=0.45, context_mix=0.25)
    net = init(topo, seed=steps)
    seqs = rng.normal(size=(4, steps, 3))
    targets = rng.normal(size=(4, 2))
    analytic = je_gradients(net, seqs, targets).arrays()
    numeric = _finite_difference(lambda: je_loss(net, seqs, targets), net.params())
    for a, n in zip(analytic, numeric):
        assert _relative_error(a, n) < 1e-6
    assert np.linalg.norm(je_gradients(net, seqs, targets).recurrent) > 0.0


def test_gradient_is_zero_at_an_exact_fit():
    net = _linear_net([[2.0]], [1.0])
    x = np.linspace(-1, 1, 12)[:, None]
    assert backprop_gradients(net, x, 2 * x + 1).norm() < 1e-8


def test_duplicated_batch_leaves_gradients_unchanged():
    rng = np.random.default_rng(4)
    net = init(Topology((3, 4, 2)), seed=4)
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    once = backprop_gradients(net, x, y).arrays()
    twice = backprop_gradients(net, np.vstack([x, x]), np.vstack([y, y])).arrays()
    assert all(np.allclose(a, b, rtol=1e-12, atol=1e-15) for a, b in zip(once, twice))


def test_empty_batch_is_a_range_error():
    net = init(Topology((2, 3, 1)))
    with pytest.raises(RangeError):
        backprop_gradients(net, np.zeros((0, 2)), np.zeros((0, 1)))


def _train_xor(seed: int):
    x, y = np.tile(XOR_X, (3, 1)), np.tile(XOR_Y, (3, 1))
    config = TrainConfig(learning_rate=0.5, momentum=0.0, epochs=2000, validation_fraction=0.0, seed=seed, patience=2000)
    return train(init(Topology((2, 2, 1)), seed), x, y, config)


def test_xor_is_learned_by_a_2_2_1_net():
    net, history = min((_train_xor(seed) for seed in range(5)), key=lambda r: min(r[1].train_mse))
    assert min(history.train_mse) < 0.01
    assert np.all(np.abs(forward(net, XOR_X) - XOR_Y) < 0.1)


def test_zero_epochs_returns_the_initial_net():
    net = init(Topology((2, 3, 1)), seed=1)
    x = np.random.default_rng(0).normal(size=(20, 2))
    same, history = train(net, x, x[:, :1], TrainConfig(epochs=0))
    assert history.train_mse == [] and history.validation_mse == []
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), same.params()))


def test_training_is_deterministic_per_seed():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 3))
    y = np.column_stack([np.sin(x[:, 0]), x[:, 1] * x[:, 2]])
    config = TrainConfig(epochs=100, seed=9)
    a, _ = train(init(Topology((3, 5, 2)), 9), x, y, config)
    b, _ = train(init(Topology((3, 5, 2)), 9), x, y, config)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
    assert a.trained and np.array_equal(a.x_mean, b.x_mean)


def test_training_reduces_error_on_noiseless_linear_data():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(50, 2))
    y = (x @ np.array([1.5, -0.5]) + 0.2)[:, None]
    for seed in range(20):
        _, history = train(init(Topology((2, 4, 1)), seed), x, y, TrainConfig(epochs=200, seed=seed))
        assert history.train_mse[-1] < history.train_mse[0]


def test_divergence_names_the_epoch():
    x = np.linspace(-1, 1, 20)[:, None]
    net = init(Topology((1, 1)), seed=0)
    with pytest.raises(DivergenceError) as info:
        train(net, x, 3 * x, TrainConfig(learning_rate=1e6, momentum=0.0, epochs=1000, validation_fraction=0.0))
    assert info.value.epoch >= 1
    assert f"epoch {info.value.epoch}" in str(info.value)


@pytest.mark.parametrize("n", [5, 9])
def test_datasets_below_ten_samples_are_rejected(n):
    with pytest.raises(RangeError):
        train(init(Topology((1, 2, 1))), np.zeros((n, 1)), np.zeros((n, 1)))


def test_non_finite_dataset_is_rejected():
    x = np.zeros((12, 1))
    x[3] = np.nan
    with pytest.raises(RangeError):
        train(init(Topology((1, 2, 1))), x, np.zeros((12, 1)))


def test_recurrence_kinds_are_enforced():
    je = init(Topology((2, 3, 1), recurrence="jordan_elman"))
    ff = init(Topology((2, 3, 1)))
    with pytest.raises(ModeError):
        forward(je, np.zeros(2))
    with pytest.raises(ModeError):
        train(je, np.zeros((12, 2)), np.zeros((12, 1)))
    with pytest.raises(ModeError):
        je_train(ff, np.zeros((12, 3, 2)), np.zeros((12, 1)))
    with pytest.raises(ModeError):
        narx_predict(ff, np.zeros((1, 2)), np.zeros((1, 1)))


def test_decay_zero_single_step_je_is_a_two_layer_feed_forward_map():
    net = init(Topology((2, 4, 1), recurrence="jordan_elman", context_decay=0.0, context_mix=0.6), seed=3)
    u = np.array([0.4, -0.8])
    h1 = np.tanh(net.weights[0] @ u + net.biases[0])
    y1 = net.weights[1] @ h1 + net.biases[1]
    h2 = np.tanh(net.biases[0] + net.recurrent @ np.concatenate([0.6 * h1, 0.4 * y1]))
    expected = net.weights[1] @ h2 + net.biases[1]
    assert np.allclose(je_predict(net, u[None, :]), expected, rtol=1e-12, atol=1e-14)


def test_je_prediction_includes_the_null_input_output_step():
    net = init(Topology((1, 4, 1), recurrence="jordan_elman", context_decay=0.3), seed=3)
    sequence = np.array([[0.5], [-0.2], [0.9]])
    session = je_session(net)
    for u in sequence:
        conditioned, session = je_step(net, session, u)
    after_zero_input, _ = je_step(net, session, np.zeros(1))
    output_phase, _ = je_output(net, session)
    assert np.allclose(je_predict(net, sequence), output_phase)
    assert np.allclose(output_phase, after_zero_input)
    assert not np.allclose(je_predict(net, sequence), conditioned)


def test_constant_input_drives_the_context_to_a_fixed_point():
    net = init(Topology((1, 5, 1), recurrence="jordan_elman", context_decay=0.5), seed=2)
    net.recurrent *= 0.3
    session = je_session(net)
    contexts = []
    for _ in range(200):
        _, session = je_step(net, session, np.array([0.7]))
        contexts.append(session.context)
    assert np.max(np.abs(contexts[-1] - contexts[-2])) < 1e-9
    assert np.array_equal(je_session(net).context, np.zeros(5))


def test_je_learns_a_map_of_constant_sequences():
    levels = np.linspace(-1, 1, 30)
    seqs = np.repeat(levels[:, None, None], 8, axis=1)
    targets = (0.5 * levels + 0.2)[:, None]
    topo = Topology((1, 6, 1), recurrence="jordan_elman", context_decay=0.5)
    config = TrainConfig(epochs=2000, validation_fraction=0.0, seed=1, patience=2000)
    net, _ = je_train(init(topo, 1), seqs, targets, config)
    predictions = np.array([je_predict(net, s) for s in seqs])
    assert np.max(np.abs(predictions - targets)) < 0.05


def test_je_step_does_not_mutate_its_session():
    net = init(Topology((2, 3, 2), recurrence="jordan_elman", context_decay=0.2), seed=0)
    start = je_session(net)
    _, after = je_step(net, start, np.array([1.0, -1.0]))
    assert np.array_equal(start.context, np.zeros(3))
    assert not np.array_equal(after.context, start.context)


def test_je_rejects_a_wrong_input_width():
    net = init(Topology((1, 3, 1), recurrence="jordan_elman"))
    with pytest.raises(ShapeError):
        je_train(net, np.zeros((12, 4, 2)), np.zeros((12, 1)))


def test_narx_prediction_equals_the_arx_formula():
    a0, a1, b1, b2, c = 0.4, -0.3, 0.5, 0.2, 0.1
    net = _linear_net([[a0, a1, b1, b2]], [c], recurrence="narx", input_lags=2, output_lags=2)
    u_hist = np.array([[1.5], [2.0]])
    y_hist = np.array([[0.7], [-0.2]])
    expected = a0 * 2.0 + a1 * 1.5 + b1 * -0.2 + b2 * 0.7 + c
    assert narx_predict(net, u_hist, y_hist) == pytest.approx([expected])


def test_narx_free_run_reproduces_the_linear_recursion():
    net = _linear_net([[0.4, -0.3, 0.5, 0.2]], [0.1], recurrence="narx", input_lags=2, output_lags=2)
    rng = np.random.default_rng(5)
    u = rng.normal(size=(40, 1))
    y = np.zeros((40, 1))
    for t in range(2, 40):
        y[t] = 0.4 * u[t] - 0.3 * u[t - 1] + 0.5 * y[t - 1] + 0.2 * y[t - 2] + 0.1
    assert np.allclose(narx_free_run(net, u, y[:2]), y[2:], atol=1e-12)
    rows, targets = narx_dataset(net.topology, u, y)
    assert rows.shape == (38, 4)
    assert np.allclose(forward(net, rows), targets, atol=1e-12)


def test_narx_short_history_and_zero_net():
    net = _linear_net([[0.0, 0.0, 0.0]], [0.0], recurrence="narx", input_lags=2, output_lags=1)
    assert narx_predict(net, np.zeros((2, 1)), np.zeros((1, 1))) == pytest.approx([0.0])
    with pytest.raises(RangeError):
        narx_predict(net, np.zeros((1, 1)), np.zeros((1, 1)))


def test_two_signal_narx_topology_is_accepted():
    topo = Topology((4, 6, 6, 2), recurrence="narx")
    assert topo.n_exogenous == 2
    assert init(topo).weights[0].shape == (6, 4)


def test_topology_search_rejects_zero_width():
    with pytest.raises(RangeError):
        topology_search(np.zeros((20, 1)), np.zeros((20, 1)), 0)


def test_search_on_linear_data_settles_small_and_selects_the_minimum():
    rng = np.random.default_rng(8)
    x = rng.uniform(-1, 1, size=(100, 2))
    y = (x @ np.array([1.0, -2.0]) + 0.5 + rng.normal(0.0, 0.1, size=100))[:, None]
    topo, report = topology_search(x, y, 6, TrainConfig(epochs=300, seed=8), compare_depth=False)
    assert 1 <= topo.hidden[0] <= 2
    assert report.selected_validation_mse == min(report.validation_mse)
    assert report.hidden_sizes[0] == 1
    assert report.depth_comparison == {}


@pytest.mark.slow
def test_pure_noise_is_pruned_to_the_minimal_network():
    minimal = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(80, 3)), rng.normal(size=(80, 1))
        topo, _ = topology_search(x, y, 5, TrainConfig(epochs=200, seed=seed), compare_depth=False)
        minimal += topo.hidden == (1,)
    assert minimal >= 18


def test_fisher_prune_keeps_at_least_one_unit():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(40, 2)), rng.normal(size=(40, 1))
    active, steps = fisher_prune(init(Topology((2, 4, 1)), 0), x, y, alpha=0.0)
    assert len(active) == 1
    assert [s["remaining"] for s in steps] == [3, 2, 1]
    with pytest.raises(ShapeError):
        fisher_prune(init(Topology((2, 3, 3, 1))), x, y)


def test_json_round_trip_is_bit_exact():
    net = init(Topology((2, 3, 1), recurrence="jordan_elman", context_decay=0.25), seed=3)
    net.x_mean = np.array([1 / 3, 2 / 7])
    back = loads(dumps(net))
    assert back.topology == net.topology
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), back.params()))
    assert np.array_equal(back.x_mean, net.x_mean)


def test_unknown_document_format_is_rejected():
    with pytest.raises(StateError):
        loads('{"format": "other", "version": 1}')
