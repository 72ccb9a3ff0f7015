from __future__ import annotations

# lstm_q_model.py
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from container import FormatError, Reader, Writer, read_bytes, write_bytes
from tensor_core import DimensionError, Matrix, Rng, sigmoid

# Gate blocks are stacked along the first axis of w_in / w_rec / b_gates in this order.
GATE_ORDER = ("forget", "input", "output", "candidate")
PARAMS_MAGIC = b"AOSLW001"
BLOCK_ORDER = ("w_in", "w_rec", "b_gates", "w_head", "b_head")


@dataclass
class QNetParams:
    """
    Single-layer LSTM with a linear action-value head.

    Shapes: w_in (4H, D), w_rec (4H, H), b_gates (4H,), w_head (A, H), b_head (A,).
    The same container holds gradients and Adam moments (see ``QNetGrads``).
    """

    w_in: Matrix
    w_rec: Matrix
    b_gates: Matrix
    w_head: Matrix
    b_head: Matrix

    def __post_init__(self) -> None:
        h4, d = self.w_in.shape
        if h4 % 4:
            raise DimensionError(f"w_in rows must be a multiple of 4, got {self.w_in.shape}")
        h = h4 // 4
        a = self.w_head.shape[0]
        expected = {
            "w_in": (4 * h, d),
            "w_rec": (4 * h, h),
            "b_gates": (4 * h,),
            "w_head": (a, h),
            "b_head": (a,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def hidden_size(self) -> int:
        return self.w_rec.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_in.shape[1]

    @property
    def action_count(self) -> int:
        return self.w_head.shape[0]

    def blocks(self) -> Iterator[tuple[str, Matrix]]:
        for name in BLOCK_ORDER:
            yield name, getattr(self, name)

    def count(self) -> int:
        return sum(arr.size for _, arr in self.blocks())

    def copy(self) -> "QNetParams":
        return type(self)(**{name: arr.copy() for name, arr in self.blocks()})

    def zeros_like(self) -> "QNetParams":
        return type(self)(**{name: np.zeros_like(arr) for name, arr in self.blocks()})

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(arr))) for _, arr in self.blocks())

    def norms(self) -> dict[str, float]:
        return {name: float(np.linalg.norm(arr)) for name, arr in self.blocks()}


# Gradients are shape-parallel to the parameters; one container type serves both.
QNetGrads = QNetParams


def param_count(hidden: int, input_size: int, actions: int) -> int:
    return 4 * hidden * (input_size + hidden) + 4 * hidden + actions * hidden + actions


@dataclass
class LstmState:
    h: Matrix
    c: Matrix

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(h=np.zeros(shape), c=np.zeros(shape))


@dataclass
class StepRecord:
    """Everything one timestep needs for the backward pass."""

    obs: Matrix
    h_prev: Matrix
    c_prev: Matrix
    pre: Matrix  # [ĝ^f | ĝ^i | ĝ^o | ĉ] before activation
    forget: Matrix
    input: Matrix
    output: Matrix
    cand: Matrix  # tanh(ĉ)
    c: Matrix
    tanh_c: Matrix
    h: Matrix
    q: Matrix


@dataclass
class ForwardTrace:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, t: int) -> StepRecord:
        return self.records[t]

    @property
    def q(self) -> Matrix:
        """Q-vectors stacked over time: (T, A) or (T, N, A)."""
        return np.stack([r.q for r in self.records])

    @property
    def batched(self) -> bool:
        return bool(self.records) and self.records[0].q.ndim == 2

    def episode(self, i: int) -> "ForwardTrace":
        if not self.batched:
            raise DimensionError("episode() needs a batched trace")
        return ForwardTrace(
            [StepRecord(**{f.name: getattr(r, f.name)[i] for f in fields(StepRecord)}) for r in self.records]
        )

    @classmethod
    def concat(cls, traces: Sequence["ForwardTrace"]) -> "ForwardTrace":
        """Join batched traces of equal length along the batch axis."""
        lengths = {len(t) for t in traces}
        if len(lengths) != 1:
            raise DimensionError(f"cannot concatenate traces of lengths {sorted(lengths)}")
        steps = lengths.pop()
        return cls(
            [
                StepRecord(
                    **{
                        f.name: np.concatenate([getattr(t[s], f.name) for t in traces], axis=0)
                        for f in fields(StepRecord)
                    }
                )
                for s in range(steps)
            ]
        )


def init_params(rng: Rng, hidden: int, input_size: int, actions: int, scale: float = 0.08) -> QNetParams:
    if min(hidden, input_size, actions) < 1:
        raise ValueError(f"H, D, A must be >= 1, got H={hidden}, D={input_size}, A={actions}")

    def draw(*shape: int) -> Matrix:
        if scale == 0:
            return np.zeros(shape)
        return rng.uniform_array(-scale, scale, shape)

    b_gates = np.zeros(4 * hidden)
    b_gates[:hidden] = 1.0
    return QNetParams(
        w_in=draw(4 * hidden, input_size),
        w_rec=draw(4 * hidden, hidden),
        b_gates=b_gates,
        w_head=draw(actions, hidden),
        b_head=np.zeros(actions),
    )


def lstm_step(p: QNetParams, s: LstmState, o: Matrix) -> tuple[LstmState, Matrix, StepRecord]:
    """
    One recurrence step. ``o`` is (D,) for a single episode or (N, D) for a batch;
    the state must have the matching leading shape.
    """
    o = np.asarray(o, dtype=np.float64)
    if o.shape[-1] != p.input_size:
        raise DimensionError(f"observation length {o.shape[-1]} != input size {p.input_size}")
    if s.h.shape[:-1] != o.shape[:-1]:
        raise DimensionError(f"state batch shape {s.h.shape} does not match observation shape {o.shape}")

    h = p.hidden_size
    pre = o @ p.w_in.T + s.h @ p.w_rec.T + p.b_gates
    forget = sigmoid(pre[..., :h])
    inp = sigmoid(pre[..., h : 2 * h])
    out = sigmoid(pre[..., 2 * h : 3 * h])
    cand = np.tanh(pre[..., 3 * h :])
    c = forget * s.c + inp * cand
    tanh_c = np.tanh(c)
    h_t = out * tanh_c
    q = h_t @ p.w_head.T + p.b_head

    record = StepRecord(
        obs=o, h_prev=s.h, c_prev=s.c, pre=pre, forget=forget, input=inp, output=out,
        cand=cand, c=c, tanh_c=tanh_c, h=h_t, q=q,
    )
    return LstmState(h=h_t, c=c), q, record


def forward_episode(p: QNetParams, observations: Sequence[Matrix] | Matrix) -> ForwardTrace:
    """Run from a zero state over (T, D) observations, or (T, N, D) for a batch."""
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim not in (2, 3) or obs.shape[0] == 0:
        raise DimensionError(f"expected a nonempty (T, D) or (T, N, D) sequence, got shape {obs.shape}")
    state = LstmState.zeros(p.hidden_size, batch=obs.shape[1] if obs.ndim == 3 else None)
    trace = ForwardTrace()
    for o in obs:
        state, _, record = lstm_step(p, state, o)
        trace.records.append(record)
    return trace


def backward_episode(p: QNetParams, trace: ForwardTrace, dq: Sequence[Matrix] | Matrix) -> QNetGrads:
    """
    Reverse-mode gradient of sum_t <dq_t, q_t> with respect to every parameter.
    Batched traces accumulate the per-episode gradients by summation.
    """
    dq = np.asarray(dq, dtype=np.float64)
    if len(dq) != len(trace):
        raise DimensionError(f"dq has {len(dq)} steps, trace has {len(trace)}")
    if len(trace) and dq.shape[1:] != trace[0].q.shape:
        raise DimensionError(f"dq step shape {dq.shape[1:]} != q shape {trace[0].q.shape}")

    hdim, a, d = p.hidden_size, p.action_count, p.input_size
    g = p.zeros_like()
    dh_next = None
    dc_next = None
    for t in range(len(trace) - 1, -1, -1):
        r = trace[t]
        dq_t = dq[t].reshape(-1, a)
        h_t = r.h.reshape(-1, hdim)
        if dh_next is None:
            dh_next = np.zeros_like(h_t)
            dc_next = np.zeros_like(h_t)

        g.w_head += dq_t.T @ h_t
        g.b_head += dq_t.sum(axis=0)

        f, i, o = r.forget.reshape(-1, hdim), r.input.reshape(-1, hdim), r.output.reshape(-1, hdim)
        cand, tanh_c = r.cand.reshape(-1, hdim), r.tanh_c.reshape(-1, hdim)

        dh = dq_t @ p.w_head + dh_next
        do = dh * tanh_c
        dc = dc_next + dh * o * (1.0 - tanh_c**2)
        df = dc * r.c_prev.reshape(-1, hdim)
        di = dc * cand
        dcand = dc * i
        dc_next = dc * f

        dz = np.concatenate(
            [df * f * (1.0 - f), di * i * (1.0 - i), do * o * (1.0 - o), dcand * (1.0 - cand**2)], axis=1
        )
        g.w_in += dz.T @ r.obs.reshape(-1, d)
        g.w_rec += dz.T @ r.h_prev.reshape(-1, hdim)
        g.b_gates += dz.sum(axis=0)
        dh_next = dz @ p.w_rec
    return g


def clip_global_norm(grads: QNetGrads, max_norm: float | None) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(arr**2)) for _, arr in grads.blocks())))
    if max_norm is not None and total > max_norm > 0:
        scale = max_norm / total
        for _, arr in grads.blocks():
            arr *= scale
    return total


def params_to_writer(w: Writer, p: QNetParams) -> None:
    w.u32(p.hidden_size)
    w.u32(p.input_size)
    w.u32(p.action_count)
    for _, arr in p.blocks():
        w.f64_block(arr)


def params_from_reader(r: Reader) -> QNetParams:
    h, d, a = r.u32(), r.u32(), r.u32()
    if min(h, d, a) < 1:
        raise FormatError(f"invalid shape header H={h}, D={d}, A={a}")
    shapes = {
        "w_in": (4 * h, d),
        "w_rec": (4 * h, h),
        "b_gates": (4 * h,),
        "w_head": (a, h),
        "b_head": (a,),
    }
    return QNetParams(**{name: r.f64_block(shapes[name]) for name in BLOCK_ORDER})


def save_params(p: QNetParams, path: Path) -> None:
    w = Writer(PARAMS_MAGIC)
    params_to_writer(w, p)
    write_bytes(path, w.seal())


def load_params(path: Path) -> QNetParams:
    r = Reader(read_bytes(path), PARAMS_MAGIC)
    p = params_from_reader(r)
    r.finish()
    return p
