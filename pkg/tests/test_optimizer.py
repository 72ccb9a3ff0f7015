import numpy as np
import pytest

from container import FormatError
from lstm_q_model import init_params
from optimizer import adam_step, adam_update, init_adam, load_state, save_state
from tensor_core import Rng


def _scalar_step(theta, g, m, v, t, lr=1e-3):
    arrays = [np.array([x], dtype=np.float64) for x in (theta, g, m, v)]
    delta = adam_update(*arrays, t=t, lr=lr, beta1=0.9, beta2=0.999, eps=1e-8)
    return float(arrays[0][0]), float(delta[0]), float(arrays[2][0]), float(arrays[3][0])


def test_first_step_moves_by_learning_rate():
    theta, delta, m, v = _scalar_step(0.0, 1.0, 0.0, 0.0, 1)
    assert m == pytest.approx(0.1)
    assert v == pytest.approx(0.001)
    assert abs(delta - (-0.000999999990)) < 1e-12
    assert theta == delta


def test_zero_gradient_leaves_parameters_unchanged():
    theta, delta, m, v = _scalar_step(0.7, 0.0, 0.0, 0.0, 1)
    assert theta == 0.7 and delta == 0.0 and m == 0.0 and v == 0.0


def test_update_is_nearly_invariant_to_gradient_scale():
    grads = Rng(3).normal(1.0, (20,))
    deltas = []
    for scale in (1.0, 1000.0):
        theta, m, v = np.zeros(20), np.zeros(20), np.zeros(20)
        deltas.append(adam_update(theta, scale * grads, m, v, 1, 1e-3, 0.9, 0.999, 1e-8))
    assert np.max(np.abs(deltas[0] - deltas[1])) < 1e-6


def test_minimises_a_parabola():
    theta, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
    for t in range(1, 5001):
        adam_update(theta, 2.0 * theta, m, v, t, 1e-2, 0.9, 0.999, 1e-8)
        if abs(theta[0]) < 0.01:
            break
    assert abs(theta[0]) < 0.01


def test_step_size_stays_within_a_few_learning_rates():
    rng = Rng(5)
    theta, m, v = np.zeros(50), np.zeros(50), np.zeros(50)
    for t in range(1, 200):
        delta = adam_update(theta, rng.normal(10.0, (50,)), m, v, t, 1e-3, 0.9, 0.999, 1e-8)
        assert np.max(np.abs(delta)) <= 2.5 * 1e-3 + 1e-12


def test_adam_step_advances_every_block_and_counter():
    params = init_params(Rng(1), 3, 4, 2)
    before = params.copy()
    state = init_adam(params)
    grads = params.zeros_like()
    for _, g in grads.blocks():
        g += 1.0
    adam_step(params, grads, state)
    assert state.t == 1
    for (name, after), (_, orig) in zip(params.blocks(), before.blocks()):
        assert np.allclose(after - orig, -0.000999999990, atol=1e-12), name


def test_state_roundtrip_is_bit_exact(tmp_path):
    params = init_params(Rng(2), 3, 4, 2)
    state = init_adam(params, lr=5e-4)
    grads = params.copy()
    adam_step(params, grads, state)
    first, second = tmp_path / "adam.bin", tmp_path / "adam2.bin"
    save_state(state, first)
    loaded = load_state(first)
    save_state(loaded, second)
    assert loaded.t == 1 and loaded.lr == 5e-4
    assert first.read_bytes() == second.read_bytes()
    assert np.array_equal(loaded.v.w_rec, state.v.w_rec)


def test_state_file_rejects_params_magic(tmp_path):
    from lstm_q_model import save_params

    path = tmp_path / "w.bin"
    save_params(init_params(Rng(0), 2, 2, 2), path)
    with pytest.raises(FormatError):
        load_state(path)
