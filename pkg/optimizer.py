from __future__ import annotations

# optimizer.py
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from container import FormatError, Reader, Writer, read_bytes, write_bytes
from lstm_q_model import QNetGrads, QNetParams, params_from_reader, params_to_writer
from tensor_core import DimensionError, Matrix

OPTIMIZER_MAGIC = b"AOSLO001"


@dataclass
class AdamState:
    m: QNetParams
    v: QNetParams
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: QNetParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(m=params.zeros_like(), v=params.zeros_like(), t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_update(
    theta: Matrix, g: Matrix, m: Matrix, v: Matrix, t: int, lr: float, beta1: float, beta2: float, eps: float
) -> Matrix:
    """
    Bias-corrected Adam on one array, in place. ``t`` is the 1-based step count.
    Returns the applied update.
    """
    if not theta.shape == g.shape == m.shape == v.shape:
        raise DimensionError(f"adam shapes differ: theta {theta.shape}, g {g.shape}, m {m.shape}, v {v.shape}")
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    delta = -lr * m_hat / (np.sqrt(v_hat) + eps)
    theta += delta
    return delta


def adam_step(params: QNetParams, grads: QNetGrads, state: AdamState) -> tuple[QNetParams, AdamState]:
    """One optimizer step over every parameter block. Updates ``params`` and ``state`` in place."""
    state.t += 1
    for (name, theta), (_, g) in zip(params.blocks(), grads.blocks()):
        adam_update(
            theta, g, getattr(state.m, name), getattr(state.v, name),
            state.t, state.lr, state.beta1, state.beta2, state.eps,
        )
    return params, state


def save_state(state: AdamState, path: Path) -> None:
    w = Writer(OPTIMIZER_MAGIC)
    w.u64(state.t)
    for value in (state.lr, state.beta1, state.beta2, state.eps):
        w.f64(value)
    params_to_writer(w, state.m)
    params_to_writer(w, state.v)
    write_bytes(path, w.seal())


def load_state(path: Path) -> AdamState:
    r = Reader(read_bytes(path), OPTIMIZER_MAGIC)
    t = r.u64()
    lr, beta1, beta2, eps = r.f64(), r.f64(), r.f64(), r.f64()
    m = params_from_reader(r)
    v = params_from_reader(r)
    r.finish()
    if m.w_in.shape != v.w_in.shape or m.w_head.shape != v.w_head.shape:
        raise FormatError("first and second moment shapes differ")
    return AdamState(m=m, v=v, t=t, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
