"""Small float64 tensor engine: reverse-mode gradients, activations, Adam.

Ops are plain functions over :class:`Tensor`. A tensor created through a
:class:`Tape` is tracked; any op with a tracked input records itself on that
tape, and ``tape.backward(out)`` fills ``.grad`` on every tracked tensor.
Untracked inputs (constants) run the same code forward-only.

Subgradient conventions at kinks: ``relu'(0) = 0``, ``d|z|/dz (0) = 0`` and
``min`` routes the gradient to the strictly smaller argument only (ties get 0).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping

import numpy as np


class NumericalError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "tape", "_backward")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """Execution record for one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self.kink_distance = math.inf

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, self)
        if not np.all(np.isfinite(t.data)):
            raise NumericalError(f"parameter {name} has non-finite entries")
        self.params[name] = t
        return t

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.param(name, value) for name, value in params.items()}

    def note_kink(self, distance: float) -> None:
        if distance < self.kink_distance:
            self.kink_distance = distance

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> Tensor:
        out.tape = self
        out._backward = backward
        self.nodes.append(out)
        return out

    def backward(self, out: Tensor) -> dict[str, np.ndarray]:
        if out.tape is not self:
            raise ValueError("output was not produced on this tape")
        out.grad = np.ones_like(out.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
        return self.gradients()

    def gradients(self) -> dict[str, np.ndarray]:
        return {
            name: t.grad if t.grad is not None else np.zeros_like(t.data)
            for name, t in self.params.items()
        }


def _tape_of(*tensors: Tensor) -> "Tape | None":
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.tape is None:
        return
    t.grad = g if t.grad is None else t.grad + g


def constant(value) -> Tensor:
    return Tensor(value)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear shape mismatch: x{x.shape} W{w.shape} b{b.shape}")
    out = Tensor(x.data @ w.data + b.data)
    tape = _tape_of(x, w, b)
    if tape is None:
        return out

    def backward(g):
        x2, g2 = np.atleast_2d(x.data), np.atleast_2d(g)
        _acc(x, g @ w.data.T)
        _acc(w, x2.T @ g2)
        _acc(b, g2.sum(axis=0))

    return tape.record(out, backward)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    tape = _tape_of(x)
    if tape is None:
        return out
    tape.note_kink(float(np.min(np.abs(x.data))))
    mask = x.data > 0

    def backward(g):
        _acc(x, g * mask)

    return tape.record(out, backward)


def tanh_act(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g):
        _acc(x, g * (1.0 - y * y))

    return tape.record(out, backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def softplus(x: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, x.data))
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g):
        _acc(x, g * _sigmoid(x.data))

    return tape.record(out, backward)


def normalize_l1(x: Tensor) -> Tensor:
    """Divide each row (last axis) by its sum; rows must have positive sums."""
    s = x.data.sum(axis=-1, keepdims=True)
    if np.any(s <= 1e-30):
        raise NumericalError("normalize_l1: row sum is not strictly positive")
    y = x.data / s
    out = Tensor(y)
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g):
        _acc(x, (g - (g * y).sum(axis=-1, keepdims=True)) / s)

    return tape.record(out, backward)


def sum_pool(rows: Tensor, weights=None) -> Tensor:
    """Weighted sum of the rows of an ``[n, k]`` tensor; weights are constants (multiplicities)."""
    n = rows.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"sum_pool: {w.shape[0]} weights for {n} rows")
    out = Tensor(w @ rows.data)
    tape = _tape_of(rows)
    if tape is None:
        return out

    def backward(g):
        _acc(rows, np.outer(w, g))

    return tape.record(out, backward)


def add(u: Tensor, v: Tensor) -> Tensor:
    if u.shape != v.shape:
        raise ValueError(f"add shape mismatch: {u.shape} vs {v.shape}")
    out = Tensor(u.data + v.data)
    tape = _tape_of(u, v)
    if tape is None:
        return out

    def backward(g):
        _acc(u, g)
        _acc(v, g)

    return tape.record(out, backward)


def l1_distance(u: Tensor, v: Tensor) -> Tensor:
    if u.shape != v.shape:
        raise ValueError(f"l1_distance shape mismatch: {u.shape} vs {v.shape}")
    diff = u.data - v.data
    out = Tensor(np.abs(diff).sum())
    tape = _tape_of(u, v)
    if tape is None:
        return out
    tape.note_kink(float(np.min(np.abs(diff))))
    sign = np.sign(diff)

    def backward(g):
        _acc(u, g * sign)
        _acc(v, -g * sign)

    return tape.record(out, backward)


def min_pool_sum(u: Tensor, v: Tensor) -> Tensor:
    if u.shape != v.shape:
        raise ValueError(f"min_pool_sum shape mismatch: {u.shape} vs {v.shape}")
    out = Tensor(np.minimum(u.data, v.data).sum())
    tape = _tape_of(u, v)
    if tape is None:
        return out
    tape.note_kink(float(np.min(np.abs(u.data - v.data))))
    u_wins = u.data < v.data
    v_wins = v.data < u.data

    def backward(g):
        _acc(u, g * u_wins)
        _acc(v, g * v_wins)

    return tape.record(out, backward)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar."""
    out = Tensor(x.data.sum())
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g):
        _acc(x, np.full(x.shape, float(g)))

    return tape.record(out, backward)


def squared_error(pred: Tensor, target: float) -> Tensor:
    resid = pred.data - target
    out = Tensor(resid * resid)
    tape = _tape_of(pred)
    if tape is None:
        return out

    def backward(g):
        _acc(pred, 2.0 * resid * g)

    return tape.record(out, backward)


def mlp(x: Tensor, layers: list[tuple[Tensor, Tensor]], activation, final_activation=None) -> Tensor:
    """Stack of ``linear`` layers with ``activation`` between them."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = linear(h, w, b)
        if i < len(layers) - 1:
            h = activation(h)
        elif final_activation is not None:
            h = final_activation(h)
    return h


# -- parameters and optimizer -------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParameterStore:
    """Named parameter tensors plus Adam state, packed into one flat buffer.

    Immutable: the buffers are read-only and :func:`adam_step` returns a new
    store. ``params``, ``m`` and ``v`` expose per-name views.
    """

    flat: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]
    m_flat: np.ndarray
    v_flat: np.ndarray
    step: int = 0
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_arrays(cls, params: Mapping[str, np.ndarray], m=None, v=None, **hyper) -> "ParameterStore":
        layout = tuple((name, tuple(np.shape(arr))) for name, arr in params.items())

        def pack(arrays):
            if not arrays:
                return np.zeros(sum(int(np.prod(s, dtype=np.int64)) for _, s in layout))
            parts = []
            for name, shape in layout:
                arr = np.asarray(arrays[name], dtype=np.float64)
                if arr.shape != shape:
                    raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {shape}")
                parts.append(arr.reshape(-1))
            return np.concatenate(parts) if parts else np.zeros(0)

        return cls(pack(params), layout, pack(m), pack(v), **hyper)

    def __post_init__(self):
        n = sum(int(np.prod(s, dtype=np.int64)) for _, s in self.layout)
        for buf in (self.flat, self.m_flat, self.v_flat):
            if buf.shape != (n,):
                raise ValueError(f"buffer of shape {buf.shape} does not match layout size {n}")
            buf.setflags(write=False)
        if self.step < 0:
            raise ValueError("step must be >= 0")

    def _views(self, buf: np.ndarray) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = buf[pos : pos + size].reshape(shape)
            pos += size
        return out

    @cached_property
    def params(self) -> dict[str, np.ndarray]:
        return self._views(self.flat)

    @property
    def m(self) -> dict[str, np.ndarray]:
        return self._views(self.m_flat)

    @property
    def v(self) -> dict[str, np.ndarray]:
        return self._views(self.v_flat)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def num_parameters(self) -> int:
        return self.flat.size

    def flatten(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        parts = []
        for name, shape in self.layout:
            g = grads[name]
            if g.shape != shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {shape}")
            parts.append(g.reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)


def adam_step(store: ParameterStore, grads: Mapping[str, np.ndarray]) -> ParameterStore:
    """One bias-corrected Adam update."""
    g = store.flatten(grads)
    if not np.all(np.isfinite(g)):
        bad = [name for name, _ in store.layout if not np.all(np.isfinite(grads[name]))]
        raise NumericalError(f"non-finite gradient for {', '.join(bad)}")
    t = store.step + 1
    b1, b2 = store.beta1, store.beta2
    m = b1 * store.m_flat + (1.0 - b1) * g
    v = b2 * store.v_flat + (1.0 - b2) * (g * g)
    update = (store.lr / (1.0 - b1**t)) * m / (np.sqrt(v / (1.0 - b2**t)) + store.eps)
    return replace(store, flat=store.flat - update, m_flat=m, v_flat=v, step=t)


def finite_difference_gradient(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference estimate of d loss / d param for every entry."""
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(work)
            flat[i] = orig - h
            down = loss_fn(work)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def gradient_relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    """``|a - b| / max(|a|, |b|)`` over all tensors concatenated; 0 when both vanish.

    Taken over the whole vector rather than per tensor: a tensor whose exact
    gradient is zero (a bias that cancels between A and B) would otherwise be
    scored on pure finite-difference roundoff.
    """
    va = np.concatenate([np.ravel(a[name]) for name in a])
    vb = np.concatenate([np.ravel(b[name]) for name in a])
    scale = max(np.linalg.norm(va), np.linalg.norm(vb))
    return float(np.linalg.norm(va - vb) / scale) if scale > 0 else 0.0


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- binary checkpoint format --------------------------------------------------

MAGIC = b"MSLB"
VERSION = 1


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """``MSLB`` | version u32 | count u32 | per tensor: name len u32, name, rank u32, dims u64[], f64[]."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated at offset {pos} (need {n} bytes)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def save_store(store: ParameterStore, path) -> None:
    tensors = dict(store.params)
    tensors.update({f"adam.m/{k}": v for k, v in store.m.items()})
    tensors.update({f"adam.v/{k}": v for k, v in store.v.items()})
    tensors["adam.step"] = np.array(float(store.step))
    write_tensors(path, tensors)


def load_store(path, **hyper) -> ParameterStore:
    tensors = read_tensors(path)
    step = int(tensors.pop("adam.step", np.array(0.0)))
    m = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam.m/")}
    v = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam.v/")}
    params = {k: t for k, t in tensors.items() if not k.startswith("adam.")}
    return ParameterStore.from_arrays(params, m or None, v or None, step=step, **hyper)
