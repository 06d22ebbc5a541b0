"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Forward operations record a dynamic graph of `Node` objects; `backward` on a
scalar node accumulates gradients into every reachable node that owns a grad
slot. A stop-gradient marker cuts the graph so the marked subtree is treated
as a constant. Gradients accumulate across backward calls until explicitly
reset (`ParamSet.zero_grads` or an optimizer step).
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from typing import Callable

import numpy as np

_NORM_FLOOR = 1e-30  # safe denominator for norm/normalize backward


class GradError(Exception):
    pass


class Node:
    """One value in the computation record.

    values  : float64 ndarray
    grad    : same-shape ndarray, allocated lazily (always for parameters)
    stop    : gradient barrier flag; backward never crosses a stopped node
    """

    __slots__ = ("values", "grad", "stop", "_parents", "_backward")

    def __init__(self, values, parents=(), backward=None, stop=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.stop = stop
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Node(shape={self.values.shape}, stop={self.stop})"


def constant(values, shape=None) -> Node:
    """Leaf node without a grad slot."""
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise GradError(
                f"value count {arr.size} does not match shape {tuple(shape)}"
            )
        arr = arr.reshape(shape)
    return Node(arr)


def parameter(values, shape=None) -> Node:
    """Leaf node with an allocated, zeroed grad slot."""
    node = constant(values, shape)
    node.grad = np.zeros_like(node.values)
    return node


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(node: Node, grad: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.values)
    node.grad += grad


def add(a: Node, b: Node) -> Node:
    out_vals = a.values + b.values

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    return Node(out_vals, (a, b), bwd)


def sub(a: Node, b: Node) -> Node:
    out_vals = a.values - b.values

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(-g, b.values.shape))

    return Node(out_vals, (a, b), bwd)


def mul(a: Node, b: Node) -> Node:
    out_vals = a.values * b.values

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return Node(out_vals, (a, b), bwd)


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def bwd(g):
        _accumulate(a, c * g)

    return Node(c * a.values, (a,), bwd)


def neg(a: Node) -> Node:
    return scale(a, -1.0)


def matmul(a: Node, b: Node) -> Node:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise GradError("matmul expects 2-D operands")
    if a.values.shape[1] != b.values.shape[0]:
        raise GradError(
            f"matmul shape mismatch {a.values.shape} x {b.values.shape}"
        )
    out_vals = a.values @ b.values

    def bwd(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return Node(out_vals, (a, b), bwd)


def transpose(a: Node) -> Node:
    def bwd(g):
        _accumulate(a, g.T)

    return Node(a.values.T, (a,), bwd)


def relu(a: Node) -> Node:
    mask = a.values > 0.0

    def bwd(g):
        _accumulate(a, g * mask)

    return Node(a.values * mask, (a,), bwd)


def exp(a: Node) -> Node:
    out_vals = np.exp(a.values)

    def bwd(g):
        _accumulate(a, g * out_vals)

    return Node(out_vals, (a,), bwd)


def log(a: Node) -> Node:
    if np.any(a.values <= 0.0):
        raise GradError("log requires strictly positive inputs")
    out_vals = np.log(a.values)

    def bwd(g):
        _accumulate(a, g / a.values)

    return Node(out_vals, (a,), bwd)


def clamp_min(a: Node, floor: float) -> Node:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    mask = a.values > floor
    out_vals = np.where(mask, a.values, floor)

    def bwd(g):
        _accumulate(a, g * mask)

    return Node(out_vals, (a,), bwd)


def sum_(a: Node, axis=None) -> Node:
    out_vals = a.values.sum(axis=axis)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.values.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.values.shape).copy())

    return Node(out_vals, (a,), bwd)


def mean(a: Node, axis=None) -> Node:
    n = a.values.size if axis is None else a.values.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def l2_norm(a: Node, axis=None) -> Node:
    """Euclidean norm, of the whole array or per row/column along `axis`."""
    out_vals = np.sqrt(np.sum(a.values * a.values, axis=axis))

    def bwd(g):
        denom = np.maximum(out_vals, _NORM_FLOOR)
        if axis is None:
            _accumulate(a, (g / denom) * a.values)
        else:
            _accumulate(
                a,
                np.expand_dims(g / denom, axis) * a.values,
            )

    return Node(out_vals, (a,), bwd)


def normalize(a: Node, axis=None) -> Node:
    """a / ||a||_2 along `axis`; errors on a zero vector."""
    norms = np.sqrt(np.sum(a.values * a.values, axis=axis, keepdims=axis is not None))
    if np.any(norms == 0.0):
        raise GradError("normalize: zero vector")
    out_vals = a.values / norms

    def bwd(g):
        if axis is None:
            dotted = np.sum(g * a.values)
        else:
            dotted = np.sum(g * a.values, axis=axis, keepdims=True)
        _accumulate(a, g / norms - a.values * dotted / norms**3)

    return Node(out_vals, (a,), bwd)


def dot(a: Node, b: Node) -> Node:
    """1-D: scalar inner product. 2-D: row-wise inner products -> (n,)."""
    if a.values.shape != b.values.shape:
        raise GradError(f"dot shape mismatch {a.values.shape} vs {b.values.shape}")
    if a.values.ndim == 1:
        out_vals = np.dot(a.values, b.values)

        def bwd(g):
            _accumulate(a, g * b.values)
            _accumulate(b, g * a.values)

    elif a.values.ndim == 2:
        out_vals = np.sum(a.values * b.values, axis=1)

        def bwd(g):
            _accumulate(a, g[:, None] * b.values)
            _accumulate(b, g[:, None] * a.values)

    else:
        raise GradError("dot expects 1-D or 2-D operands")
    return Node(out_vals, (a, b), bwd)


def softmax(a: Node, axis=-1) -> Node:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_vals = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = np.sum(g * out_vals, axis=axis, keepdims=True)
        _accumulate(a, out_vals * (g - inner))

    return Node(out_vals, (a,), bwd)


class _StopTape:
    """Freezes stop-gradient values across repeated evaluations of one loss.

    A stopped subexpression is a constant of the objective; a finite
    difference must therefore hold it at its recorded value while parameters
    are perturbed, or it would differentiate a different function.
    """

    __slots__ = ("values", "cursor", "mode")

    def __init__(self, mode: str):
        self.values = []
        self.cursor = 0
        self.mode = mode


_active_stop_tape: _StopTape | None = None


def stop_gradient(a: Node) -> Node:
    """Identical values, but backward deposits nothing into a's subtree."""
    tape = _active_stop_tape
    if tape is not None:
        if tape.mode == "record":
            tape.values.append(a.values)
        else:
            if tape.cursor >= len(tape.values):
                raise GradError("stop-gradient call structure changed between evaluations")
            frozen = tape.values[tape.cursor]
            tape.cursor += 1
            if frozen.shape != a.values.shape:
                raise GradError("stop-gradient call structure changed between evaluations")
            return Node(frozen, (), None, stop=True)
    return Node(a.values, (), None, stop=True)


def _topo_order(root: Node) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if not node.stop:
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into grads of all reachable nodes."""
    if loss.values.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    order = _topo_order(loss)
    _accumulate(loss, np.ones_like(loss.values))
    for node in reversed(order):
        if node.stop or node._backward is None:
            continue
        node._backward(node.grad)


class ParamSet:
    """Named collection of parameter nodes (each with a grad slot)."""

    def __init__(self):
        self._params: "OrderedDict[str, Node]" = OrderedDict()

    def add(self, name: str, values) -> Node:
        if name in self._params:
            raise GradError(f"duplicate parameter name {name!r}")
        node = parameter(values)
        self._params[name] = node
        return node

    def adopt(self, name: str, node: Node) -> Node:
        if name in self._params:
            raise GradError(f"duplicate parameter name {name!r}")
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def nodes(self):
        return list(self._params.values())

    def zero_grads(self) -> None:
        for node in self._params.values():
            node.grad = np.zeros_like(node.values)

    def copy_values(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.values.copy()) for k, v in self._params.items())

    def load_values(self, values: "OrderedDict[str, np.ndarray]") -> None:
        for name, arr in values.items():
            self._params[name].values[...] = arr

    def merged_with(self, other: "ParamSet", prefix_self: str, prefix_other: str) -> "ParamSet":
        out = ParamSet()
        for k, v in self._params.items():
            out.adopt(f"{prefix_self}.{k}", v)
        for k, v in other._params.items():
            out.adopt(f"{prefix_other}.{k}", v)
        return out


def sgd_step(params: ParamSet, lr: float, weight_decay: float = 0.0) -> None:
    """p <- p - lr * (grad + weight_decay * p); grads cleared afterwards."""
    for name, node in params.items():
        if node.grad is None:
            raise GradError(f"parameter {name!r} has no gradient")
    for node in params.nodes():
        node.values -= lr * (node.grad + weight_decay * node.values)
        node.grad = np.zeros_like(node.values)


class AdamState:
    """First/second moment buffers for the optional Adam optimizer."""

    def __init__(self, params: ParamSet):
        self.m = {k: np.zeros_like(v.values) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.values) for k, v in params.items()}
        self.t = 0


def adam_step(
    params: ParamSet,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    for name, node in params.items():
        if node.grad is None:
            raise GradError(f"parameter {name!r} has no gradient")
    state.t += 1
    t = state.t
    for name, node in params.items():
        g = node.grad + weight_decay * node.values
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        mhat = state.m[name] / (1.0 - beta1**t)
        vhat = state.v[name] / (1.0 - beta2**t)
        node.values -= lr * mhat / (np.sqrt(vhat) + eps)
        node.grad = np.zeros_like(node.values)


def cosine_lr(epoch: int, base_lr: float, min_lr: float, horizon: int) -> float:
    """Cosine-annealed learning rate as a pure function of the epoch index."""
    if horizon <= 0 or epoch >= horizon:
        return min_lr
    if epoch <= 0:
        return base_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * epoch / horizon))


def finite_diff_check(
    f: Callable[[ParamSet], Node],
    params: ParamSet,
    eps: float = 1e-5,
) -> float:
    """Max relative error between backward() and central differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    global _active_stop_tape
    if eps <= 0:
        raise GradError("finite_diff_check requires eps > 0")
    params.zero_grads()
    tape = _StopTape("record")
    _active_stop_tape = tape
    try:
        loss = f(params)
    finally:
        _active_stop_tape = None
    if not np.isfinite(loss.values).all():
        raise GradError("finite_diff_check: non-finite loss value")
    backward(loss)
    analytic = {k: v.grad.copy() for k, v in params.items()}

    tape.mode = "replay"

    def eval_loss() -> float:
        global _active_stop_tape
        tape.cursor = 0
        _active_stop_tape = tape
        try:
            val = f(params).values
        finally:
            _active_stop_tape = None
        out = float(val.reshape(()))
        if not math.isfinite(out):
            raise GradError("finite_diff_check: non-finite loss value")
        return out

    worst = 0.0
    for name, node in params.items():
        flat = node.values.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = eval_loss()
            flat[i] = orig - eps
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    params.zero_grads()
    return worst


_CKPT_MAGIC = b"HUTDPRMS"
_CKPT_VERSION = 1


def save_params(params: ParamSet, path) -> None:
    """Self-describing binary: magic, version, count, then per parameter
    name length / name bytes / rank / extents / little-endian doubles."""
    with open(path, "wb") as fh:
        fh.write(serialize_params(params))


def load_params(path) -> ParamSet:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_params(data)


def parse_params(data: bytes, offset: int = 0) -> ParamSet:
    params, _ = parse_params_at(data, offset)
    return params


def parse_params_at(data: bytes, offset: int) -> tuple:
    """Parse one serialized ParamSet; returns (params, next offset)."""
    if data[offset : offset + 8] != _CKPT_MAGIC:
        raise GradError("bad parameter file magic")
    offset += 8
    version, count = struct.unpack_from("<II", data, offset)
    offset += 8
    if version != _CKPT_VERSION:
        raise GradError(f"unsupported parameter file version {version}")
    params = ParamSet()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + nlen].decode("utf-8")
        offset += nlen
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}Q", data, offset) if rank else ()
        offset += 8 * rank
        n_vals = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n_vals, offset=offset).reshape(shape)
        offset += 8 * n_vals
        params.add(name, arr.copy())
    return params, offset


def serialize_params(params: ParamSet) -> bytes:
    out = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(params))]
    for name, node in params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        shape = node.values.shape
        out.append(struct.pack("<I", len(shape)))
        for extent in shape:
            out.append(struct.pack("<Q", extent))
        out.append(node.values.astype("<f8").tobytes())
    return b"".join(out)
