"""Dense float64 tensors with reverse-mode autodiff, Adam, and checkpoints.

Only the handful of ops the attention/MLP models need are provided. Shapes
are strict: elementwise ops require equal shapes (or a Python scalar), and
broadcasting must be requested explicitly with :func:`broadcast_to`.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

_ids = itertools.count()
_tape: list | None = None


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class DomainError(ValueError):
    """Raised when an op receives values outside its domain (e.g. log(0))."""

    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


def _next_node_id() -> int:
    # Inside a traced graph, errors name the graph-local node index.
    return len(_tape) if _tape is not None else -1


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "id")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.op = op
        self.id = next(_ids)
        if _tape is not None:
            _tape.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add_scalar(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def __getitem__(self, index):
        return slice_(self, index)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple, op: str, backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, op=op, parents=parents, backward=backward)
    return Tensor(data, False, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(_next_node_id(), f"{op} shape mismatch {a.shape} vs {b.shape}")


# --- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _make(a.data * b.data, (a, b), "mul", bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(a, g * c)
    return _make(a.data * c, (a,), "scalar_mul", bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g)
    return _make(a.data + float(c), (a,), "scalar_add", bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        _accum(a, g * out * (1.0 - out))
    return _make(out, (a,), "sigmoid", bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(_next_node_id(), "log of non-positive value")
    x = a.data

    def bw(g):
        _accum(a, g / x)
    return _make(np.log(x), (a,), "log", bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)
    return _make(out, (a,), "exp", bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * inside)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", bw)


# --- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes of ``a`` and ``b`` must match exactly, except that a
    2-D ``b`` is applied to every leading index of ``a`` (a shared weight).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(_next_node_id(), f"matmul needs >=2-D operands, got {a.shape}, {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(_next_node_id(), f"matmul inner dims {a.shape} @ {b.shape}")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(_next_node_id(), f"matmul batch dims {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared:
                a2 = a.data.reshape(-1, a.shape[-1])
                _accum(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)
    return _make(out, (a, b), "matmul", bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.swapaxes(g, -1, -2))
    return _make(np.swapaxes(a.data, -1, -2), (a,), "transpose", bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))
    return _make(out, (a,), "softmax", bw)


# --- structural -----------------------------------------------------------

def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    tensors = [as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(_next_node_id(), f"concat leading dims {lead} vs {t.shape[:-1]}")
    sizes = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _accum(t, g[..., lo:hi])
    return _make(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), "concat", bw)


def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        _accum(a, full)
    return _make(np.array(out), (a,), "slice", bw)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        _accum(a, full)
    return _make(a.data[indices], (a,), "take", bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(_next_node_id(), f"cannot reshape {a.shape} to {shape}") from None

    def bw(g):
        _accum(a, g.reshape(a.shape))
    return _make(out, (a,), "reshape", bw)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; gradients are summed back over the expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(_next_node_id(), f"cannot broadcast {a.shape} to {shape}") from None
    extra = len(shape) - a.data.ndim
    kept = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape[extra:])) if s == 1 and t != 1)

    def bw(g):
        r = g.sum(axis=tuple(range(extra))) if extra else g
        _accum(a, r.sum(axis=kept, keepdims=True) if kept else r)
    return _make(out, (a,), "broadcast", bw)


# --- reductions -----------------------------------------------------------

def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum() if axis is None else a.data.sum(axis=axis)

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())
    return _make(out, (a,), "sum", bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out = sum_(a, axis)
    return scale(out, 1.0 / n) if n else out


def max_(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; ties route the gradient to the first maximiser."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accum(a, full)
    return _make(out, (a,), "max", bw)


# --- composite helpers ----------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, broadcast_to(b, y.shape))


# --- backward -------------------------------------------------------------

def backward(out: Tensor, grad: np.ndarray | None = None) -> None:
    if grad is None:
        if out.data.size != 1:
            raise ShapeError(-1, f"backward needs a scalar output, got shape {out.shape}")
        grad = np.ones_like(out.data)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [out]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen.add(t.id)
        order.append(t)
        stack.extend(t._parents)
    # creation order is a valid topological order
    order.sort(key=lambda t: t.id, reverse=True)
    out.grad = grad
    for t in order:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
            if t is not out and t._parents:
                t.grad = None  # free interior buffers


# --- graphs ---------------------------------------------------------------

class Node(NamedTuple):
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class Graph:
    """A traced computation: ``fn`` maps named input Tensors to a Tensor
    (or a dict of Tensors). ``nodes`` holds the op records of the last trace,
    in topological order."""

    fn: Callable[..., Tensor | Mapping[str, Tensor]]
    nodes: list[Node] = field(default_factory=list)

    def trace(self, inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
        global _tape
        prev, _tape = _tape, []
        try:
            leaves = {k: Tensor(np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64),
                                requires_grad=True)
                      for k, v in inputs.items()}
            out = self.fn(**leaves)
            tape = _tape
        finally:
            _tape = prev
        index = {t.id: i for i, t in enumerate(tape)}
        self.nodes = [Node(t.op, tuple(index[p.id] for p in t._parents if p.id in index), i)
                      for i, t in enumerate(tape)]
        outputs = dict(out) if isinstance(out, Mapping) else {"out": out}
        return {**outputs, **{f"__input__{k}": v for k, v in leaves.items()}}


def evaluate(graph: Graph, inputs: Mapping[str, np.ndarray | Tensor]) -> dict[str, Tensor]:
    """Run the graph forward and return its named outputs."""
    traced = graph.trace(inputs)
    return {k: v for k, v in traced.items() if not k.startswith("__input__")}


def gradient(graph: Graph, inputs: Mapping[str, np.ndarray | Tensor],
             wrt: Iterable[str]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the scalar graph output w.r.t. named inputs.

    Inputs that do not influence the output get zero gradients.
    """
    traced = graph.trace(inputs)
    outs = [v for k, v in traced.items() if not k.startswith("__input__")]
    if len(outs) != 1 or outs[0].data.size != 1:
        raise ShapeError(len(graph.nodes) - 1, "gradient needs a single scalar output")
    backward(outs[0])
    result = {}
    for name in wrt:
        leaf = traced[f"__input__{name}"]
        result[name] = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
    return result


def finite_diff_check(graph: Graph, inputs: Mapping[str, np.ndarray], eps: float = 1e-5,
                      wrt: Iterable[str] | None = None, max_probes: int | None = None,
                      seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per entry is ``|a - n| / max(floor, |a| + |n|)``. The
    floor (1e-6) sits above the resolution of a central difference on O(1)
    outputs, so entries whose true gradient is ~1e-10 (saturated softmax,
    negligible attention weight) are judged on absolute error instead of
    amplified round-off. With ``max_probes`` set, only that many seeded
    entries per input are probed.
    """
    names = list(inputs) if wrt is None else list(wrt)
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    analytic = gradient(graph, base, names)
    rng = np.random.default_rng(seed)

    def f(vals) -> float:
        outs = evaluate(graph, vals)
        return float(next(iter(outs.values())).data)

    worst = 0.0
    for name in names:
        flat = base[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(base)
            flat[i] = orig - eps
            fm = f(base)
            flat[i] = orig
            n = (fp - fm) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - n) / max(floor, abs(a) + abs(n)))
    return worst


# --- parameters & Adam ----------------------------------------------------

class ParamStore:
    """Named parameters backed by one contiguous float64 buffer.

    Each entry of ``arrays`` is a view into ``flat`` so optimiser updates act
    on every parameter with a single vector operation.
    """

    def __init__(self, shapes: Mapping[str, Sequence[int]]):
        self.shapes = {k: tuple(int(d) for d in v) for k, v in shapes.items()}
        sizes = [int(np.prod(s)) for s in self.shapes.values()]
        self.flat = np.zeros(sum(sizes))
        self.arrays: dict[str, np.ndarray] = {}
        off = 0
        for (name, shape), n in zip(self.shapes.items(), sizes):
            self.arrays[name] = self.flat[off:off + n].reshape(shape)
            off += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self) -> list[str]:
        return list(self.arrays)

    def leaves(self, names: Iterable[str] | None = None) -> dict[str, Tensor]:
        """Fresh gradient-tracking leaves that share memory with the store."""
        names = self.arrays if names is None else names
        return {k: Tensor(self.arrays[k], requires_grad=True) for k in names}

    def flat_grad(self, leaves: Mapping[str, Tensor]) -> np.ndarray:
        g = np.zeros_like(self.flat)
        off = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            leaf = leaves.get(name)
            if leaf is not None and leaf.grad is not None:
                g[off:off + n] = leaf.grad.reshape(-1)
            off += n
        return g

    def copy(self) -> "ParamStore":
        other = ParamStore(self.shapes)
        other.flat[:] = self.flat
        return other

    def subset(self, prefixes: Sequence[str]) -> "ParamStore":
        keep = {k: v for k, v in self.shapes.items() if k.startswith(tuple(prefixes))}
        other = ParamStore(keep)
        for k in keep:
            other.arrays[k][...] = self.arrays[k]
        return other


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays.

    ``state`` moment buffers are updated in place and its step incremented.
    """
    state.step += 1
    b1t = 1.0 - state.beta1 ** state.step
    b2t = 1.0 - state.beta2 ** state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ShapeError(-1, f"grad for {name!r} has shape {g.shape}, param {np.shape(p)}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / b1t) / (np.sqrt(v / b2t) + state.epsilon)
    return out, state


class Adam:
    """Adam over a :class:`ParamStore`'s flat buffer (in-place)."""

    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.store = store
        self.state = AdamState(lr, beta1, beta2, epsilon)
        self.m = np.zeros_like(store.flat)
        self.v = np.zeros_like(store.flat)

    def step(self, flat_grad: np.ndarray) -> None:
        s = self.state
        s.step += 1
        if s.lr == 0.0:
            return
        self.m *= s.beta1
        self.m += (1 - s.beta1) * flat_grad
        self.v *= s.beta2
        self.v += (1 - s.beta2) * flat_grad * flat_grad
        b1t = 1.0 - s.beta1 ** s.step
        b2t = 1.0 - s.beta2 ** s.step
        self.store.flat -= s.lr * (self.m / b1t) / (np.sqrt(self.v / b2t) + s.epsilon)


# --- checkpoint -----------------------------------------------------------

def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray],
                    meta: Mapping | None = None) -> None:
    """Write ``manifest.json`` (name -> shape, byte offset) and ``weights.bin``
    (little-endian float32, manifest order) into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    chunks = []
    offset = 0
    for name in params:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"tensors": entries, "meta": dict(meta or {})}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (path / "weights.bin").write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    blob = (path / "weights.bin").read_bytes()
    params = {}
    for name, e in manifest["tensors"].items():
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"])
        params[name] = arr.astype(np.float64).reshape(e["shape"])
    return params, manifest.get("meta", {})
