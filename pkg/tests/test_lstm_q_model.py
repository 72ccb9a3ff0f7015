import math

import numpy as np
import pytest

from container import FormatError
from lstm_q_model import (
    LstmState,
    QNetParams,
    backward_episode,
    clip_global_norm,
    forward_episode,
    init_params,
    load_params,
    lstm_step,
    param_count,
    save_params,
)
from tensor_core import DimensionError, Rng


def _zero_params(h, d, a, forget_bias=0.0):
    p = init_params(Rng(0), h, d, a, scale=0.0)
    p.b_gates[:h] = forget_bias
    return p


def _reference_q(p, observations):
    """Straight-line scalar loops over the LSTM equations, no matrix ops."""
    H, D, A = p.hidden_size, p.input_size, p.action_count
    h = [0.0] * H
    c = [0.0] * H
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))  # noqa: E731
    out = []
    for o in observations:
        pre = []
        for r in range(4 * H):
            s = p.b_gates[r]
            for j in range(D):
                s += p.w_in[r, j] * o[j]
            for j in range(H):
                s += p.w_rec[r, j] * h[j]
            pre.append(s)
        new_h, new_c = [], []
        for u in range(H):
            f, i, og = sig(pre[u]), sig(pre[H + u]), sig(pre[2 * H + u])
            cu = f * c[u] + i * math.tanh(pre[3 * H + u])
            new_c.append(cu)
            new_h.append(og * math.tanh(cu))
        h, c = new_h, new_c
        out.append([p.b_head[k] + sum(p.w_head[k, u] * h[u] for u in range(H)) for k in range(A)])
    return np.array(out)


def test_param_count_formula():
    p = init_params(Rng(1), 200, 787, 4)
    assert p.count() == param_count(200, 787, 4) == 791_204
    for h, d, a in [(3, 5, 2), (8, 10, 4), (16, 1, 7)]:
        assert init_params(Rng(0), h, d, a).count() == 4 * h * (d + h) + 4 * h + a * h + a


def test_init_scale_zero_and_forget_bias():
    p = init_params(Rng(1), 5, 7, 3, scale=0.0)
    assert not p.w_in.any() and not p.w_rec.any() and not p.w_head.any() and not p.b_head.any()
    assert np.array_equal(p.b_gates[:5], np.ones(5))
    assert not p.b_gates[5:].any()


def test_init_is_bitwise_reproducible_and_bounded():
    a = init_params(Rng(12), 6, 9, 4)
    b = init_params(Rng(12), 6, 9, 4)
    for (_, x), (_, y) in zip(a.blocks(), b.blocks()):
        assert np.array_equal(x, y)
    assert np.max(np.abs(a.w_in)) <= 0.08


def test_zero_params_give_half_gates_and_zero_outputs():
    p = _zero_params(4, 6, 3)
    state, q, rec = lstm_step(p, LstmState.zeros(4), np.ones(6))
    assert np.array_equal(rec.forget, np.full(4, 0.5))
    assert np.array_equal(rec.input, np.full(4, 0.5))
    assert np.array_equal(rec.output, np.full(4, 0.5))
    assert not state.c.any() and not state.h.any() and not q.any()


def test_forget_bias_one_scales_previous_cell():
    p = _zero_params(3, 2, 2, forget_bias=1.0)
    v = np.array([1.0, -2.0, 0.5])
    state, _, _ = lstm_step(p, LstmState(h=np.zeros(3), c=v), np.zeros(2))
    assert np.allclose(state.c, v / (1.0 + math.exp(-1.0)), atol=1e-15)
    assert abs(state.c[0] - 0.7310585786) < 1e-9


def test_forward_matches_scalar_reference():
    rng = Rng(21)
    p = init_params(rng, 5, 6, 3, scale=0.4)
    obs = rng.normal(1.0, (4, 6))
    trace = forward_episode(p, obs)
    assert np.max(np.abs(trace.q - _reference_q(p, obs))) < 1e-12


def test_forward_single_step_and_order_sensitivity():
    rng = Rng(4)
    p = init_params(rng, 6, 5, 3, scale=0.3)
    obs = rng.normal(1.0, (3, 5))
    one = forward_episode(p, obs[:1])
    _, q, _ = lstm_step(p, LstmState.zeros(6), obs[0])
    assert len(one) == 1
    assert np.array_equal(one.q[0], q)
    permuted = forward_episode(p, obs[[2, 0, 1]])
    assert not np.allclose(forward_episode(p, obs).q[-1], permuted.q[-1])


def test_forward_is_deterministic_and_gates_bounded():
    rng = Rng(8)
    p = init_params(rng, 7, 5, 4, scale=1.0)
    obs = rng.normal(3.0, (6, 5))
    a, b = forward_episode(p, obs), forward_episode(p, obs)
    assert np.array_equal(a.q, b.q)
    for r in a.records:
        for gate in (r.forget, r.input, r.output):
            assert np.all((gate > 0) & (gate < 1))
        assert np.all(np.abs(r.cand) < 1) and np.all(np.abs(r.tanh_c) < 1)


def test_zero_params_give_zero_q_for_any_input():
    p = _zero_params(4, 3, 2, forget_bias=1.0)
    assert not forward_episode(p, Rng(0).normal(10.0, (5, 3))).q.any()


def test_forward_rejects_bad_lengths():
    p = init_params(Rng(0), 3, 4, 2)
    with pytest.raises(DimensionError):
        lstm_step(p, LstmState.zeros(3), np.zeros(5))
    with pytest.raises(DimensionError):
        forward_episode(p, np.zeros((0, 4)))


def test_backward_zero_dq_gives_zero_grads():
    rng = Rng(2)
    p = init_params(rng, 4, 3, 2)
    trace = forward_episode(p, rng.normal(1.0, (3, 3)))
    g = backward_episode(p, trace, np.zeros((3, 2)))
    assert all(not arr.any() for _, arr in g.blocks())


def test_backward_head_bias_single_step_equals_dq():
    rng = Rng(2)
    p = init_params(rng, 4, 3, 3)
    trace = forward_episode(p, rng.normal(1.0, (1, 3)))
    dq = np.array([[0.3, -1.2, 2.0]])
    assert np.array_equal(backward_episode(p, trace, dq).b_head, dq[0])


def test_backward_rejects_misaligned_dq():
    p = init_params(Rng(0), 3, 4, 2)
    trace = forward_episode(p, np.zeros((3, 4)))
    with pytest.raises(DimensionError):
        backward_episode(p, trace, np.zeros((2, 2)))


@pytest.mark.parametrize("hidden,seed", [(4, 1), (8, 2), (16, 3)])
def test_backward_matches_central_differences(hidden, seed):
    rng = Rng(seed)
    p = init_params(rng, hidden, 10, 4, scale=0.5)
    obs = rng.normal(1.0, (5, 10))
    dq = rng.normal(1.0, (5, 4))

    def objective(params: QNetParams) -> float:
        return float(np.sum(dq * forward_episode(params, obs).q))

    analytic = backward_episode(p, forward_episode(p, obs), dq)
    step = 1e-5
    for name, theta in p.blocks():
        flat = theta.reshape(-1)
        numeric = np.zeros(flat.size)
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + step
            up = objective(p)
            flat[j] = saved - step
            down = objective(p)
            flat[j] = saved
            numeric[j] = (up - down) / (2 * step)
        a = getattr(analytic, name).reshape(-1)
        rel = np.linalg.norm(a - numeric) / max(np.linalg.norm(a) + np.linalg.norm(numeric), 1e-12)
        assert rel < 1e-6, name


def test_batched_backward_sums_episode_gradients():
    rng = Rng(31)
    p = init_params(rng, 5, 4, 3, scale=0.3)
    obs = rng.normal(1.0, (4, 2, 4))  # (T, N, D)
    dq = rng.normal(1.0, (4, 2, 3))
    batched = forward_episode(p, obs)
    g = backward_episode(p, batched, dq)
    g0 = backward_episode(p, forward_episode(p, obs[:, 0]), dq[:, 0])
    g1 = backward_episode(p, forward_episode(p, obs[:, 1]), dq[:, 1])
    for name, arr in g.blocks():
        assert np.allclose(arr, getattr(g0, name) + getattr(g1, name), atol=1e-12)
    assert np.allclose(batched.episode(1).q, forward_episode(p, obs[:, 1]).q, atol=1e-14)


def test_clip_global_norm_scales_in_place():
    p = init_params(Rng(0), 2, 2, 2, scale=0.0)
    p.b_head[:] = [3.0, 4.0]
    assert clip_global_norm(p, None) == pytest.approx(math.sqrt(25 + 2))
    clip_global_norm(p, 1.0)
    assert math.sqrt(sum(float(np.sum(a**2)) for _, a in p.blocks())) == pytest.approx(1.0)


def test_params_roundtrip_is_bit_exact(tmp_path):
    p = init_params(Rng(5), 6, 11, 4)
    first, second = tmp_path / "a.bin", tmp_path / "b.bin"
    save_params(p, first)
    loaded = load_params(first)
    save_params(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes()[:8] == b"AOSLW001"
    obs = Rng(6).normal(1.0, (3, 11))
    assert np.array_equal(forward_episode(p, obs).q, forward_episode(loaded, obs).q)


def test_truncated_or_foreign_params_file_is_a_format_error(tmp_path):
    path = tmp_path / "w.bin"
    save_params(init_params(Rng(5), 3, 4, 2), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError):
        load_params(path)
    path.write_bytes(b"NOTMAGIC" + data[8:])
    with pytest.raises(FormatError):
        load_params(path)
    path.write_bytes(b"")
    with pytest.raises(FormatError):
        load_params(path)
