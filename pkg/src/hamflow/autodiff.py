"""Scalar/vector computation graphs with nested differentiation.

The engine serves two needs that rule out a plain numeric tape:

* input-gradients must come back as new graphs (so the Poisson bracket and
  the leapfrog updates, which are built from gradients, can be differentiated
  again during training), and
* parameter-gradients of any such nested graph must be cheap, so the reverse
  pass is numeric and vectorized over a leading batch axis.

Every derivative rule therefore exists twice: once emitting graph nodes
(`_sym_vjp`) and once as a numpy kernel inside `Program`. A property test
pins the two against finite differences.

There are two evaluators. `evaluate`/`grad_params` walk the graph directly,
checking every node for NaN/Inf (slow, used in tests and to name the
offending node on numeric failure). `Program` pre-plans one batch shape:
buffers are allocated once, views are taken at bind time and kernels write
with ``out=``, because on this numpy build allocation churn and accidental
in-place transcendental ufuncs dominate the step time otherwise.

Node values are float64; per-sample shapes are scalars ``()`` or vectors
``(n,)``. The only fused op is the matrix-vector affine layer, whose
weights live in a `ParamStore`.
"""

from __future__ import annotations

import json
import struct
from typing import Iterable, Mapping, Sequence

import numpy as np


class ConfigError(Exception):
    """Unbound input/parameter or invalid configuration."""


class ContractError(Exception):
    """Caller violated an operation's precondition (shape/kind mismatch)."""


class NumericError(Exception):
    """NaN/Inf encountered; message names the offending node."""


_SCALAR = ()


def _kind(shape: tuple) -> str:
    return "S" if shape == _SCALAR else "V"


class Expr:
    """One node of an immutable acyclic computation graph."""

    __slots__ = ("op", "args", "meta", "shape", "_id")
    _counter = 0

    def __init__(self, op: str, args: tuple, meta, shape: tuple):
        self.op = op
        self.args = args
        self.meta = meta
        self.shape = shape
        Expr._counter += 1
        self._id = Expr._counter

    def __repr__(self):
        tag = f"{self.op}#{self._id}"
        if self.op in ("input", "param"):
            return f"{tag}({self.meta})"
        return tag

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def _as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return const(x)


def const(value) -> Expr:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 1:
        raise ContractError(f"const must be scalar or vector, got shape {arr.shape}")
    return Expr("const", (), arr, arr.shape)


def scalar_input(name: str) -> Expr:
    return Expr("input", (), name, _SCALAR)


def vector_input(name: str, n: int) -> Expr:
    return Expr("input", (), name, (int(n),))


def param(name: str, shape) -> Expr:
    """Leaf bound by name to a ParamStore entry at evaluation time."""
    shape = tuple(int(s) for s in shape)
    if len(shape) > 1:
        raise ContractError("param leaves are scalars or vectors; matrices enter via affine()")
    return Expr("param", (), name, shape)


def _is_zero_const(e: Expr) -> bool:
    return e.op == "const" and not np.any(e.meta)


def _is_one_const(e: Expr) -> bool:
    return e.op == "const" and e.meta.shape == _SCALAR and e.meta == 1.0


def _zeros(shape: tuple) -> Expr:
    return const(np.zeros(shape))


def _broadcast_shape(a: Expr, b: Expr, op: str) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if a.shape == _SCALAR:
        return b.shape
    if b.shape == _SCALAR:
        return a.shape
    raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# fast float64 kernels; np.logaddexp / scipy expit take slow scalar loops
# on this numpy build, these stay on the SIMD paths and agree to 1 ulp


def _sigmoid_val(x):
    t = np.multiply(x, 0.5)
    t = np.tanh(t)  # named operand: keeps numpy off the slow in-place path
    t = t * 0.5
    t = t + 0.5
    return t


def _softplus_val(x):
    t = np.abs(x)
    t = np.negative(t)
    u = np.exp(t)
    v = np.log1p(u)
    m = np.maximum(x, 0.0)
    return m + v


def _num_forward(node: Expr, store, *vals):
    """Reference kernel for one node (interpreter path)."""
    op = node.op
    if op == "add":
        return _ged(node, 0, vals[0]) + _ged(node, 1, vals[1])
    if op == "sub":
        return _ged(node, 0, vals[0]) - _ged(node, 1, vals[1])
    if op == "mul":
        return _ged(node, 0, vals[0]) * _ged(node, 1, vals[1])
    if op == "div":
        return _ged(node, 0, vals[0]) / _ged(node, 1, vals[1])
    if op == "neg":
        return -vals[0]
    if op == "exp":
        return np.exp(vals[0])
    if op == "log":
        return np.log(vals[0])
    if op == "sqrt":
        return np.sqrt(vals[0])
    if op == "square":
        return vals[0] * vals[0]
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "sigmoid":
        return _sigmoid_val(vals[0])
    if op == "softplus":
        return _softplus_val(vals[0])
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "step":
        return (vals[0] > 0.0).astype(np.float64)
    if op == "dot":
        return np.sum(vals[0] * vals[1], axis=-1)
    if op == "vsum":
        return np.sum(vals[0], axis=-1)
    if op == "broadcast":
        a = vals[0]
        return np.broadcast_to(np.expand_dims(a, -1), np.shape(a) + (node.meta,))
    if op == "stack":
        ref = max(vals, key=np.ndim)
        return np.stack([np.broadcast_to(v, np.shape(ref)) for v in vals], axis=-1)
    if op == "index":
        return vals[0][..., node.meta]
    if op == "scatter":
        i, n = node.meta
        out = np.zeros(np.shape(vals[0]) + (n,))
        out[..., i] = vals[0]
        return out
    if op == "concat":
        a, b = vals
        if np.ndim(a) != np.ndim(b):
            batch = a.shape[:-1] if np.ndim(a) > np.ndim(b) else b.shape[:-1]
            a = np.broadcast_to(a, batch + a.shape[-1:])
            b = np.broadcast_to(b, batch + b.shape[-1:])
        return np.concatenate([a, b], axis=-1)
    if op == "vslice":
        return vals[0][..., node.meta[0]:node.meta[1]]
    if op == "affine":
        w = _resolve(node.meta[0], store)
        out = vals[0] @ w.T
        if node.meta[1] is not None:
            out = out + _resolve(node.meta[1], store)
        return out
    if op == "matvec_t":
        return vals[0] @ _resolve(node.meta[0], store)
    raise ContractError(f"unknown op '{op}'")  # pragma: no cover


def _ged(node: Expr, k: int, v):
    """Lift a scalar operand of a vector elementwise op for broadcasting."""
    if node.shape != _SCALAR and node.args[k].shape == _SCALAR and np.ndim(v) > 0:
        return np.expand_dims(v, -1)
    return v


def _resolve(ref, store):
    if ref[0] == "const":
        return ref[1]
    if store is None or not store.has(ref[1]):
        raise ConfigError(f"unbound parameter '{ref[1]}'")
    return store.get(ref[1])


def _fold(op: str, args: tuple, meta, shape: tuple) -> Expr | None:
    """Constant-fold when every operand (and weight ref) is constant."""
    if any(a.op != "const" for a in args):
        return None
    if op in ("affine", "matvec_t"):
        wref, bref = meta
        if wref[0] != "const" or (bref is not None and bref[0] != "const"):
            return None
    node = Expr(op, args, meta, shape)
    return const(np.array(_num_forward(node, None, *(a.meta for a in args))))


def _make(op: str, args: tuple, meta, shape: tuple) -> Expr:
    folded = _fold(op, args, meta, shape)
    if folded is not None:
        return folded
    return Expr(op, args, meta, shape)


# ---------------------------------------------------------------------------
# primitive constructors (with cheap algebraic folds to keep gradient graphs
# emitted by the symbolic reverse pass lean)


def add(a, b) -> Expr:
    a, b = _as_expr(a), _as_expr(b)
    shape = _broadcast_shape(a, b, "add")
    if _is_zero_const(a) and b.shape == shape:
        return b
    if _is_zero_const(b) and a.shape == shape:
        return a
    return _make("add", (a, b), None, shape)


def sub(a, b) -> Expr:
    a, b = _as_expr(a), _as_expr(b)
    shape = _broadcast_shape(a, b, "sub")
    if _is_zero_const(b) and a.shape == shape:
        return a
    return _make("sub", (a, b), None, shape)


def mul(a, b) -> Expr:
    a, b = _as_expr(a), _as_expr(b)
    shape = _broadcast_shape(a, b, "mul")
    if _is_zero_const(a) or _is_zero_const(b):
        return _zeros(shape)
    if _is_one_const(a) and b.shape == shape:
        return b
    if _is_one_const(b) and a.shape == shape:
        return a
    return _make("mul", (a, b), None, shape)


def div(a, b) -> Expr:
    a, b = _as_expr(a), _as_expr(b)
    shape = _broadcast_shape(a, b, "div")
    if _is_zero_const(a):
        return _zeros(shape)
    if _is_one_const(b) and a.shape == shape:
        return a
    return _make("div", (a, b), None, shape)


def neg(a) -> Expr:
    a = _as_expr(a)
    if a.op == "neg":
        return a.args[0]
    return _make("neg", (a,), None, a.shape)


def _unary(op: str, a) -> Expr:
    a = _as_expr(a)
    return _make(op, (a,), None, a.shape)


def exp(a) -> Expr:
    return _unary("exp", a)


def log(a) -> Expr:
    return _unary("log", a)


def sqrt(a) -> Expr:
    return _unary("sqrt", a)


def square(a) -> Expr:
    return _unary("square", a)


def tanh(a) -> Expr:
    return _unary("tanh", a)


def sigmoid(a) -> Expr:
    return _unary("sigmoid", a)


def softplus(a) -> Expr:
    return _unary("softplus", a)


def relu(a) -> Expr:
    return _unary("relu", a)


def step(a) -> Expr:
    """Heaviside step; derivative of relu, its own derivative is zero a.e."""
    return _unary("step", a)


def dot(a: Expr, b: Expr) -> Expr:
    if a.shape == _SCALAR or b.shape == _SCALAR or a.shape != b.shape:
        raise ContractError(f"dot expects equal-length vectors, got {a.shape}, {b.shape}")
    return _make("dot", (a, b), None, _SCALAR)


def vsum(a: Expr) -> Expr:
    if a.shape == _SCALAR:
        raise ContractError("vsum expects a vector")
    return _make("vsum", (a,), None, _SCALAR)


def broadcast(a: Expr, n: int) -> Expr:
    if a.shape != _SCALAR:
        raise ContractError("broadcast expects a scalar")
    return _make("broadcast", (a,), int(n), (int(n),))


def stack(parts: Sequence[Expr]) -> Expr:
    parts = tuple(_as_expr(p) for p in parts)
    if not parts or any(p.shape != _SCALAR for p in parts):
        raise ContractError("stack expects one or more scalars")
    return _make("stack", parts, None, (len(parts),))


def index(a: Expr, i: int) -> Expr:
    if a.shape == _SCALAR:
        raise ContractError("index expects a vector")
    if not 0 <= i < a.shape[0]:
        raise ContractError(f"index {i} out of range for shape {a.shape}")
    if a.op == "stack":
        return a.args[i]
    return _make("index", (a,), int(i), _SCALAR)


def scatter(a: Expr, i: int, n: int) -> Expr:
    if a.shape != _SCALAR:
        raise ContractError("scatter expects a scalar")
    return _make("scatter", (a,), (int(i), int(n)), (int(n),))


def concat(a: Expr, b: Expr) -> Expr:
    if a.shape == _SCALAR or b.shape == _SCALAR:
        raise ContractError("concat expects vectors")
    return _make("concat", (a, b), a.shape[0], (a.shape[0] + b.shape[0],))


def vslice(a: Expr, start: int, stop: int) -> Expr:
    if a.shape == _SCALAR or not (0 <= start < stop <= a.shape[0]):
        raise ContractError(f"bad slice [{start}:{stop}] of shape {a.shape}")
    return _make("vslice", (a,), (int(start), int(stop), a.shape[0]), (stop - start,))


def affine(x: Expr, weight, bias=None) -> Expr:
    """Fused y = W @ x + b.

    `weight`/`bias` are ("param", name, shape) references into a ParamStore
    or raw ndarrays; they are never graph nodes, so differentiation w.r.t.
    inputs stays closed while parameter gradients ride the numeric reverse
    pass.
    """
    wref = _tensor_ref(weight, 2)
    m, n = wref[2] if wref[0] == "param" else wref[1].shape
    if x.shape != (n,):
        raise ContractError(f"affine expects input of shape ({n},), got {x.shape}")
    bref = None if bias is None else _tensor_ref(bias, 1)
    if bref is not None:
        bshape = bref[2] if bref[0] == "param" else bref[1].shape
        if tuple(bshape) != (m,):
            raise ContractError(f"affine bias must have shape ({m},)")
    return _make("affine", (x,), (wref, bref), (m,))


def matvec_t(weight, y: Expr) -> Expr:
    """Transposed companion of affine: W^T @ y (no bias)."""
    wref = _tensor_ref(weight, 2)
    m, n = wref[2] if wref[0] == "param" else wref[1].shape
    if y.shape != (m,):
        raise ContractError(f"matvec_t expects input of shape ({m},), got {y.shape}")
    return _make("matvec_t", (y,), (wref, None), (n,))


def _tensor_ref(t, ndim: int):
    if isinstance(t, tuple) and t and t[0] in ("param", "const"):
        return t
    if isinstance(t, Expr):
        raise ContractError("affine weights are param refs or ndarrays, not graph nodes")
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim != ndim:
        raise ContractError(f"expected {ndim}-d tensor, got shape {arr.shape}")
    return ("const", arr)


def param_ref(name: str, shape) -> tuple:
    return ("param", name, tuple(int(s) for s in shape))


# ---------------------------------------------------------------------------
# symbolic reverse mode (closure under differentiation)


def _sym_vjp(node: Expr, c: Expr) -> list[tuple[Expr, Expr]]:
    """Cotangent contributions (operand, grad-expr) for one node."""
    op = node.op
    a = node.args[0] if node.args else None
    if op == "add":
        b = node.args[1]
        return [(a, _shrink(c, a)), (b, _shrink(c, b))]
    if op == "sub":
        b = node.args[1]
        return [(a, _shrink(c, a)), (b, _shrink(neg(c), b))]
    if op == "mul":
        b = node.args[1]
        return [(a, _shrink(mul(c, b), a)), (b, _shrink(mul(c, a), b))]
    if op == "div":
        b = node.args[1]
        return [
            (a, _shrink(div(c, b), a)),
            (b, _shrink(neg(div(mul(c, a), square(b))), b)),
        ]
    if op == "neg":
        return [(a, neg(c))]
    if op == "exp":
        return [(a, mul(c, node))]
    if op == "log":
        return [(a, div(c, a))]
    if op == "sqrt":
        return [(a, div(c, mul(const(2.0), node)))]
    if op == "square":
        return [(a, mul(mul(const(2.0), c), a))]
    if op == "tanh":
        return [(a, mul(c, sub(const(1.0), square(node))))]
    if op == "sigmoid":
        return [(a, mul(c, mul(node, sub(const(1.0), node))))]
    if op == "softplus":
        return [(a, mul(c, sigmoid(a)))]
    if op == "relu":
        return [(a, mul(c, step(a)))]
    if op == "step":
        return []
    if op == "dot":
        b = node.args[1]
        return [(a, mul(c, b)), (b, mul(c, a))]
    if op == "vsum":
        return [(a, broadcast(c, a.shape[0]))]
    if op == "broadcast":
        return [(a, vsum(c))]
    if op == "stack":
        return [(p, index(c, k)) for k, p in enumerate(node.args)]
    if op == "index":
        return [(a, scatter(c, node.meta, a.shape[0]))]
    if op == "scatter":
        return [(a, index(c, node.meta[0]))]
    if op == "concat":
        b = node.args[1]
        n = node.meta
        return [(a, vslice(c, 0, n)), (b, vslice(c, n, node.shape[0]))]
    if op == "vslice":
        start, stop, n = node.meta
        pieces = []
        if start > 0:
            pieces.append(_zeros((start,)))
        pieces.append(c)
        if stop < n:
            pieces.append(_zeros((n - stop,)))
        padded = pieces[0]
        for p in pieces[1:]:
            padded = concat(padded, p)
        return [(a, padded)]
    if op == "affine":
        return [(a, matvec_t(node.meta[0], c))]
    if op == "matvec_t":
        return [(a, affine(c, node.meta[0]))]
    raise ContractError(f"no derivative rule for op '{op}'")


def _shrink(c: Expr, operand: Expr) -> Expr:
    """Reduce a broadcast cotangent back to the operand's shape."""
    if c.shape == operand.shape:
        return c
    if operand.shape == _SCALAR:
        return vsum(c)
    raise ContractError("cannot reduce cotangent")  # pragma: no cover


def topo_order(roots: Iterable[Expr]) -> list[Expr]:
    """Iterative post-order over the DAG."""
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for a in node.args:
            if id(a) not in seen:
                stack.append((a, False))
    return order


def grad_inputs(expr: Expr, wrt) -> Expr | list[Expr]:
    """Symbolic gradient of a scalar expr w.r.t. input leaves.

    Returns graphs built from the same primitives, so they can be evaluated
    and differentiated again.
    """
    single = isinstance(wrt, Expr)
    leaves = [wrt] if single else list(wrt)
    for leaf in leaves:
        if leaf.op != "input":
            raise ContractError("grad_inputs differentiates w.r.t. input leaves")
    if expr.shape != _SCALAR:
        raise ContractError("grad_inputs expects a scalar-valued expression")

    order = topo_order([expr])
    cots: dict[int, Expr] = {id(expr): const(1.0)}
    for node in reversed(order):
        c = cots.get(id(node))
        if c is None or node.op in ("const", "input", "param"):
            continue
        for operand, contrib in _sym_vjp(node, c):
            prev = cots.get(id(operand))
            cots[id(operand)] = contrib if prev is None else add(prev, contrib)
    grads = [cots.get(id(leaf), _zeros(leaf.shape)) for leaf in leaves]
    return grads[0] if single else grads


def substitute(expr: Expr, mapping: Mapping[Expr, Expr]) -> Expr:
    """Rebuild a graph with some leaves (or subgraphs) replaced."""
    repl: dict[int, Expr] = {id(k): v for k, v in mapping.items()}
    for old, new in mapping.items():
        if old.shape != new.shape:
            raise ContractError(f"substitute shape mismatch: {old.shape} vs {new.shape}")
    out: dict[int, Expr] = {}
    for node in topo_order([expr]):
        if id(node) in repl:
            out[id(node)] = repl[id(node)]
            continue
        new_args = tuple(out[id(a)] for a in node.args)
        if all(n is o for n, o in zip(new_args, node.args)):
            out[id(node)] = node
        else:
            out[id(node)] = _make(node.op, new_args, node.meta, node.shape)
    return out[id(expr)]


def input_leaves(expr: Expr) -> set[str]:
    return {n.meta for n in topo_order([expr]) if n.op == "input"}


# ---------------------------------------------------------------------------
# parameter storage


class ParamStore:
    """Named views into one flat float64 array, frozen after model build."""

    MAGIC = b"HFPS"
    VERSION = 1

    def __init__(self):
        self._entries: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._chunks: list[np.ndarray] = []
        self._flat: np.ndarray | None = None
        self.slots: dict[str, np.ndarray] = {}

    def register(self, name: str, value) -> None:
        if self._flat is not None:
            raise ConfigError("parameter count is fixed after freeze()")
        if name in self._entries:
            raise ConfigError(f"duplicate parameter '{name}'")
        # np.array, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.array(value, dtype=np.float64, order="C")
        offset = sum(c.size for c in self._chunks)
        self._entries[name] = (offset, arr.shape)
        self._chunks.append(arr.ravel())

    def freeze(self) -> None:
        if self._flat is None:
            self._flat = np.concatenate(self._chunks) if self._chunks else np.zeros(0)
            self._chunks = []

    @property
    def flat(self) -> np.ndarray:
        if self._flat is None:
            self.freeze()
        return self._flat

    @property
    def size(self) -> int:
        return self.flat.size

    def has(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def get(self, name: str) -> np.ndarray:
        if name not in self._entries:
            raise ConfigError(f"unbound parameter '{name}'")
        offset, shape = self._entries[name]
        n = int(np.prod(shape, dtype=int)) if shape else 1
        return self.flat[offset:offset + n].reshape(shape)

    def set(self, name: str, value) -> None:
        self.get(name)[...] = np.asarray(value, dtype=np.float64)

    def offset_of(self, name: str) -> tuple[int, tuple[int, ...]]:
        if name not in self._entries:
            raise ConfigError(f"unbound parameter '{name}'")
        return self._entries[name]

    def ref(self, name: str) -> tuple:
        offset, shape = self.offset_of(name)
        return ("param", name, shape)

    def zeros_like_flat(self) -> np.ndarray:
        return np.zeros(self.size)

    # checkpoint layout documented in FORMATS.md: magic, version, JSON
    # header, then raw little-endian float64 values; round-trip is bit-exact
    def save(self, path) -> None:
        header = json.dumps(
            {"names": [[n, list(s[1]), s[0]] for n, s in self._entries.items()],
             "total": self.size}
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<II", self.VERSION, len(header)))
            fh.write(header)
            fh.write(self.flat.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != cls.MAGIC:
                raise ConfigError(f"not a parameter checkpoint: bad magic {magic!r}")
            version, hlen = struct.unpack("<II", fh.read(8))
            if version != cls.VERSION:
                raise ConfigError(f"unsupported checkpoint version {version}")
            header = json.loads(fh.read(hlen).decode("utf-8"))
            raw = fh.read(header["total"] * 8)
        if len(raw) != header["total"] * 8:
            raise ConfigError("truncated checkpoint")
        flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        store = cls()
        store._entries = {n: (off, tuple(shape)) for n, shape, off in header["names"]}
        store._flat = flat.copy()
        return store

    def load_values_from(self, other: "ParamStore") -> None:
        if other.names() != self.names():
            raise ConfigError("checkpoint parameter names do not match model")
        for name in self.names():
            if other.offset_of(name)[1] != self.offset_of(name)[1]:
                raise ConfigError(f"checkpoint shape mismatch for '{name}'")
        self.flat[...] = other.flat


# ---------------------------------------------------------------------------
# interpreter path: reference semantics, per-node finite checks


def _interp_values(order, arrays: Mapping[str, np.ndarray], store,
                   check_finite: bool) -> dict[int, np.ndarray]:
    vals: dict[int, np.ndarray] = {}
    for node in order:
        if node.op == "const":
            v = node.meta
        elif node.op == "input":
            if node.meta not in arrays:
                raise ConfigError(f"unbound input '{node.meta}'")
            v = arrays[node.meta]
        elif node.op == "param":
            if store is None or not store.has(node.meta):
                raise ConfigError(f"unbound parameter '{node.meta}'")
            v = store.get(node.meta)
        else:
            with np.errstate(all="ignore"):
                v = _num_forward(node, store, *(vals[id(a)] for a in node.args))
        if check_finite and not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite value produced by node {node!r}")
        vals[id(node)] = v
    return vals


def _check_input(leaf: Expr, value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim not in (len(leaf.shape), len(leaf.shape) + 1):
        raise ContractError(
            f"input '{leaf.meta}' has shape {arr.shape}, leaf expects {leaf.shape}")
    if leaf.shape and arr.shape[-1] != leaf.shape[0]:
        raise ContractError(
            f"input '{leaf.meta}' has shape {arr.shape}, leaf expects {leaf.shape}")
    return arr


def evaluate(expr: Expr, inputs: Mapping[str, object] | None = None,
             store: ParamStore | None = None):
    """Evaluate one expression; returns float for scalar unbatched results.

    Pure: identical inputs give bit-identical outputs. Raises NumericError
    naming the first node that produces a non-finite value.
    """
    order = topo_order([expr])
    arrays = {}
    batched = False
    for node in order:
        if node.op == "input":
            if inputs is None or node.meta not in inputs:
                raise ConfigError(f"unbound input '{node.meta}'")
            arr = _check_input(node, inputs[node.meta])
            batched = batched or arr.ndim == len(node.shape) + 1
            arrays[node.meta] = arr
    vals = _interp_values(order, arrays, store, check_finite=True)
    out = vals[id(expr)]
    if not batched and expr.shape == _SCALAR:
        return float(out)
    return np.asarray(out, dtype=np.float64)


def grad_params(expr: Expr, inputs: Mapping[str, object] | None,
                store: ParamStore) -> np.ndarray:
    """Numeric gradient w.r.t. every parameter (flat; zeros where unused).

    With batched inputs this is the gradient of the per-sample sum.
    """
    if expr.shape != _SCALAR:
        raise ContractError("grad_params expects a scalar-valued expression")
    order = topo_order([expr])
    arrays = {}
    for node in order:
        if node.op == "input":
            if inputs is None or node.meta not in inputs:
                raise ConfigError(f"unbound input '{node.meta}'")
            arrays[node.meta] = _check_input(node, inputs[node.meta])
    vals = _interp_values(order, arrays, store, check_finite=True)
    grad = store.zeros_like_flat()

    cots: dict[int, np.ndarray] = {id(expr): np.ones(np.shape(vals[id(expr)]))}
    for node in reversed(order):
        c = cots.get(id(node))
        if c is None:
            continue
        op = node.op
        if op in ("const", "input"):
            continue
        if op == "param":
            off, shape = store.offset_of(node.meta)
            size = int(np.prod(shape, dtype=int)) if shape else 1
            g = c
            while np.ndim(g) > len(shape):
                g = g.sum(axis=0)
            grad[off:off + size] += np.asarray(g).ravel()
            continue
        if op in ("affine", "matvec_t"):
            _interp_matmul_vjp(node, c, vals, grad, cots, store)
            continue
        for k, arg in enumerate(node.args):
            if arg.op == "const":
                continue
            g = _interp_op_vjp(node, k, c, vals)
            if g is None:
                continue
            target = vals[id(arg)]
            trail = (op in ("add", "sub", "mul", "div")
                     and node.shape != _SCALAR and arg.shape == _SCALAR)
            if trail:
                g = np.asarray(g).sum(axis=-1)
            while np.ndim(g) > np.ndim(target):
                g = g.sum(axis=0)
            prev = cots.get(id(arg))
            cots[id(arg)] = g if prev is None else prev + g
    return grad


def _interp_matmul_vjp(node, c, vals, grad, cots, store):
    wref, bref = node.meta
    w = _resolve(wref, store)
    x = vals[id(node.args[0])]
    if node.op == "affine":
        gx = c @ w
    else:
        gx = c @ w.T
    prev = cots.get(id(node.args[0]))
    cots[id(node.args[0])] = gx if prev is None else prev + gx
    if wref[0] == "param":
        off, shape = store.offset_of(wref[1])
        if np.ndim(c) == 1:
            gw = np.outer(c, x) if node.op == "affine" else np.outer(x, c)
        else:
            xb = x if np.ndim(x) == 2 else np.broadcast_to(x, (c.shape[0], x.shape[-1]))
            gw = c.T @ xb if node.op == "affine" else xb.T @ c
        grad[off:off + gw.size] += gw.ravel()
    if bref is not None and bref[0] == "param":
        off, shape = store.offset_of(bref[1])
        gb = c if np.ndim(c) == 1 else c.sum(axis=0)
        grad[off:off + gb.size] += gb


def _interp_op_vjp(node, k, c, vals):
    """Cotangent contribution of `node` to operand k (interpreter path)."""
    op = node.op
    v = [vals[id(a)] for a in node.args]
    out = vals[id(node)]
    if op == "add":
        return c
    if op == "sub":
        return c if k == 0 else -c
    if op == "mul":
        other = _ged(node, 1 - k, v[1 - k])
        return c * other
    if op == "div":
        a, b = _ged(node, 0, v[0]), _ged(node, 1, v[1])
        return c / b if k == 0 else -c * a / (b * b)
    if op == "neg":
        return -c
    if op == "exp":
        return c * out
    if op == "log":
        return c / v[0]
    if op == "sqrt":
        return c / (2.0 * out)
    if op == "square":
        return 2.0 * c * v[0]
    if op == "tanh":
        return c * (1.0 - out * out)
    if op == "sigmoid":
        return c * out * (1.0 - out)
    if op == "softplus":
        return c * _sigmoid_val(v[0])
    if op == "relu":
        return c * (v[0] > 0.0)
    if op == "step":
        return None
    if op == "dot":
        return np.expand_dims(c, -1) * v[1 - k]
    if op == "vsum":
        n = node.args[0].shape[0]
        return np.broadcast_to(np.expand_dims(c, -1), np.shape(c) + (n,))
    if op == "broadcast":
        return c.sum(axis=-1)
    if op == "stack":
        return c[..., k]
    if op == "index":
        outg = np.zeros(np.shape(c) + (node.args[0].shape[0],))
        outg[..., node.meta] = c
        return outg
    if op == "scatter":
        return c[..., node.meta[0]]
    if op == "concat":
        n = node.meta
        return c[..., :n] if k == 0 else c[..., n:]
    if op == "vslice":
        start, stop, n = node.meta
        outg = np.zeros(np.shape(c)[:-1] + (n,))
        outg[..., start:stop] = c
        return outg
    raise ContractError(f"no numeric vjp for op '{op}'")  # pragma: no cover


# ---------------------------------------------------------------------------
# compiled programs: one batch shape, preallocated buffers, out= kernels


class Program:
    """Pre-planned evaluator and numeric reverse pass for fixed roots.

    Buffers are bound to one batch size (rebinding happens automatically if
    the batch changes); parameter views are taken once, so in-place optimizer
    updates are picked up without recompiling. Returned arrays are copies.
    """

    def __init__(self, roots: Sequence[Expr], inputs: Sequence[Expr],
                 store: ParamStore | None = None, check_finite: bool = True):
        self.roots = list(roots)
        self.inputs = list(inputs)
        self.store = store
        self.check_finite = check_finite
        self.order = topo_order(self.roots)
        reachable = {id(n) for n in self.order}
        for leaf in self.inputs:  # inputs the graph never touches still bind
            if id(leaf) not in reachable:
                self.order.insert(0, leaf)
                reachable.add(id(leaf))
        self._slot = {id(n): i for i, n in enumerate(self.order)}
        self.n_slots = len(self.order)
        if store is not None:
            store.freeze()

        bound = {leaf.meta for leaf in self.inputs}
        for n in self.order:
            if n.op == "input" and n.meta not in bound:
                raise ConfigError(f"unbound input '{n.meta}'")
            if n.op == "param" and (store is None or not store.has(n.meta)):
                raise ConfigError(f"unbound parameter '{n.meta}'")
            if n.op in ("affine", "matvec_t") and n.meta[0][0] == "param":
                if store is None or not store.has(n.meta[0][1]):
                    raise ConfigError(f"unbound parameter '{n.meta[0][1]}'")

        # batched-ness is static per node given whether the call is batched
        self._needs = self._mark_needed()
        self._bound_batch: int | None | str = "unbound"

    def _mark_needed(self) -> set[int]:
        """Nodes whose subtree touches a parameter (targets of the reverse pass)."""
        needs: set[int] = set()
        for node in self.order:
            hit = node.op == "param" or (
                node.op in ("affine", "matvec_t") and node.meta[0][0] == "param")
            if hit or any(id(a) in needs for a in node.args):
                needs.add(id(node))
        return needs

    # -- binding --------------------------------------------------------------

    def _bind(self, batch: int | None):
        self._bound_batch = batch
        batched = [False] * self.n_slots
        for i, node in enumerate(self.order):
            if node.op == "input":
                batched[i] = batch is not None
            elif node.args:
                batched[i] = any(batched[self._slot[id(a)]] for a in node.args)
        self._batched = batched

        def vshape(i, node):
            prefix = (batch,) if batched[i] else ()
            return prefix + node.shape

        vals: list = [None] * self.n_slots
        self._input_slots = [self._slot[id(leaf)] for leaf in self.inputs]
        self._root_slots = [self._slot[id(r)] for r in self.roots]

        # fixed input buffers first (the caller's arrays are copied in), so
        # kernels and views bound below capture live storage
        self._in_bufs = []
        for leaf, islot in zip(self.inputs, self._input_slots):
            buf = np.empty(vshape(islot, self.order[islot]), dtype=np.float64)
            vals[islot] = buf
            self._in_bufs.append(buf)

        fwd = []
        store = self.store
        for i, node in enumerate(self.order):
            op = node.op
            if op == "input":
                continue
            if op == "const":
                vals[i] = node.meta
                continue
            if op == "param":
                vals[i] = store.get(node.meta)  # live view, stable after freeze
                continue
            shape = vshape(i, node)
            abufs = [vals[self._slot[id(a)]] for a in node.args]
            if op == "index":
                vals[i] = abufs[0][..., node.meta]
                continue
            if op == "vslice":
                vals[i] = abufs[0][..., node.meta[0]:node.meta[1]]
                continue
            if op == "broadcast":
                vals[i] = np.broadcast_to(np.expand_dims(abufs[0], -1), shape)
                continue
            out = np.empty(shape)
            vals[i] = out
            fwd.append(self._fwd_kernel(node, abufs, out))

        self._vals = vals
        self._fwd_instrs = fwd
        self._bind_backward(vshape)

    def _fwd_kernel(self, node, abufs, out):
        op = node.op
        store = self.store

        def ged(k):
            # scalar operand of a vector elementwise op, lifted once
            a = abufs[k]
            if node.shape != _SCALAR and node.args[k].shape == _SCALAR and np.ndim(a) > 0:
                return np.expand_dims(a, -1)
            return a

        if op == "add":
            a, b = ged(0), ged(1)
            return lambda: np.add(a, b, out=out)
        if op == "sub":
            a, b = ged(0), ged(1)
            return lambda: np.subtract(a, b, out=out)
        if op == "mul":
            a, b = ged(0), ged(1)
            return lambda: np.multiply(a, b, out=out)
        if op == "div":
            a, b = ged(0), ged(1)
            return lambda: np.divide(a, b, out=out)
        if op == "neg":
            a = abufs[0]
            return lambda: np.negative(a, out=out)
        if op == "exp":
            a = abufs[0]
            return lambda: np.exp(a, out=out)
        if op == "log":
            a = abufs[0]
            return lambda: np.log(a, out=out)
        if op == "sqrt":
            a = abufs[0]
            return lambda: np.sqrt(a, out=out)
        if op == "square":
            a = abufs[0]
            return lambda: np.multiply(a, a, out=out)
        if op == "tanh":
            a = abufs[0]
            return lambda: np.tanh(a, out=out)
        if op == "sigmoid":
            a = abufs[0]
            s = np.empty_like(out)

            def k():
                np.multiply(a, 0.5, out=s)
                np.tanh(s, out=out)
                np.multiply(out, 0.5, out=out)
                np.add(out, 0.5, out=out)
            return k
        if op == "softplus":
            a = abufs[0]
            s1 = np.empty_like(out)
            s2 = np.empty_like(out)

            def k():
                np.abs(a, out=s1)
                np.negative(s1, out=s1)
                np.exp(s1, out=s2)
                np.log1p(s2, out=s1)
                np.maximum(a, 0.0, out=s2)
                np.add(s1, s2, out=out)
            return k
        if op == "relu":
            a = abufs[0]
            return lambda: np.maximum(a, 0.0, out=out)
        if op == "step":
            a = abufs[0]

            def k():
                np.copyto(out, a > 0.0)
            return k
        if op == "dot":
            a, b = abufs
            s = np.empty(np.broadcast_shapes(np.shape(a), np.shape(b)))

            def k():
                np.multiply(a, b, out=s)
                np.sum(s, axis=-1, out=out)
            return k
        if op == "vsum":
            a = abufs[0]
            return lambda: np.sum(a, axis=-1, out=out)
        if op == "stack":
            parts = list(abufs)

            def k():
                for j, p in enumerate(parts):
                    out[..., j] = p
            return k
        if op == "scatter":
            a = abufs[0]
            i_idx = node.meta[0]

            def k():
                out.fill(0.0)
                out[..., i_idx] = a
            return k
        if op == "concat":
            a, b = abufs
            n = node.meta

            def k():
                out[..., :n] = a
                out[..., n:] = b
            return k
        if op == "affine":
            x = abufs[0]
            wref, bref = node.meta
            w_t = _resolve(wref, store).T  # stable view
            if bref is None:
                return lambda: np.matmul(x, w_t, out=out)
            b = _resolve(bref, store)

            def k():
                np.matmul(x, w_t, out=out)
                np.add(out, b, out=out)
            return k
        if op == "matvec_t":
            y = abufs[0]
            w = _resolve(node.meta[0], store)
            return lambda: np.matmul(y, w, out=out)
        raise ContractError(f"cannot compile op '{op}'")  # pragma: no cover

    # -- backward binding -----------------------------------------------------

    def _bind_backward(self, vshape):
        store = self.store
        needs = self._needs
        nslots = self.n_slots
        cotbufs: list = [None] * nslots
        for i, node in enumerate(self.order):
            if id(node) in needs:
                cotbufs[i] = np.zeros(vshape(i, node))
        self._cotbufs = cotbufs
        self._filled = bytearray(nslots)
        instrs = []

        def mk_store_fn(tslot, gshape):
            """Accumulate a contribution of shape gshape into cot buffer tslot."""
            tbuf = cotbufs[tslot]
            filled = self._filled
            tnd = tbuf.ndim
            gnd = len(gshape)
            if gnd == tnd:
                def sf(g):
                    if filled[tslot]:
                        np.add(tbuf, g, out=tbuf)
                    else:
                        np.copyto(tbuf, g)
                        filled[tslot] = 1
                return sf
            # leading (batch) axes must be summed away
            red = np.empty(tbuf.shape)

            def sf(g):
                np.sum(g, axis=tuple(range(gnd - tnd)), out=red)
                if filled[tslot]:
                    np.add(tbuf, red, out=tbuf)
                else:
                    np.copyto(tbuf, red)
                    filled[tslot] = 1
            return sf

        for node in reversed(self.order):
            if id(node) not in needs:
                continue
            i = self._slot[id(node)]
            op = node.op
            if op in ("const", "input"):
                continue
            if op == "param":
                name = node.meta
                off, shape = store.offset_of(name)
                size = int(np.prod(shape, dtype=int)) if shape else 1

                def fn(grad, i=i, off=off, size=size, filled=self._filled,
                       cot=cotbufs[i]):
                    if filled[i]:
                        grad[off:off + size] += cot.ravel()
                instrs.append(fn)
                continue
            instrs.append(self._bwd_kernel(node, i, mk_store_fn))
        self._bwd_instrs = instrs

    def _bwd_kernel(self, node, i, mk_store_fn):
        op = node.op
        store = self.store
        needs = self._needs
        vals = self._vals
        cot = self._cotbufs[i]
        filled = self._filled
        slot = self._slot
        out_val = vals[i]

        arg_slots = [slot[id(a)] for a in node.args]
        arg_need = [id(a) in needs for a in node.args]

        def aval(k):
            return vals[arg_slots[k]]

        if op in ("affine", "matvec_t"):
            wref, bref = node.meta
            w = _resolve(wref, store)
            x = aval(0)
            w_param = wref[0] == "param"
            w_off = store.offset_of(wref[1])[0] if w_param else None
            b_off = (store.offset_of(bref[1])[0]
                     if (bref is not None and bref[0] == "param") else None)
            sf = mk_store_fn(arg_slots[0], np.shape(cot)[:-1] + node.args[0].shape) if arg_need[0] else None
            gx = np.empty(np.shape(cot)[:-1] + node.args[0].shape) if arg_need[0] else None
            mm = (lambda c, o: np.matmul(c, w, out=o)) if op == "affine" else (lambda c, o: np.matmul(c, w.T, out=o))
            gw = np.empty(w.shape) if w_param else None
            batched = cot.ndim == 2

            def fn(grad):
                if not filled[i]:
                    return
                if sf is not None:
                    mm(cot, gx)
                    sf(gx)
                if w_off is not None:
                    if batched:
                        xb = x if x.ndim == 2 else np.broadcast_to(x, (cot.shape[0], x.shape[-1]))
                        if op == "affine":
                            np.matmul(cot.T, xb, out=gw)
                        else:
                            np.matmul(xb.T, cot, out=gw)
                    else:
                        if op == "affine":
                            np.outer(cot, x, out=gw)
                        else:
                            np.outer(x, cot, out=gw)
                    grad[w_off:w_off + gw.size] += gw.ravel()
                if b_off is not None:
                    gb = cot if not batched else cot.sum(axis=0)
                    grad[b_off:b_off + gb.size] += gb
            return fn

        # generic ops: compute contribution g into a scratch, then store
        kers = []
        for k, arg in enumerate(node.args):
            if not arg_need[k]:
                kers.append(None)
                continue
            trail = (node.shape != _SCALAR and arg.shape == _SCALAR
                     and op in ("add", "sub", "mul", "div"))
            kers.append(self._contrib_kernel(node, k, i, cot, trail, mk_store_fn))

        def fn(grad, kers=kers):
            if not filled[i]:
                return
            for ker in kers:
                if ker is not None:
                    ker()
        return fn

    def _contrib_kernel(self, node, k, i, cot, trail, mk_store_fn):
        """Kernel computing one operand's cotangent contribution into scratch."""
        op = node.op
        vals = self._vals
        slot = self._slot
        arg = node.args[k]
        aslot = slot[id(arg)]
        out_val = vals[i]
        av = vals[slot[id(node.args[0])]] if node.args else None

        full_shape = np.shape(cot)
        work_shape = full_shape[:-1] if trail else full_shape

        def mk(gshape):
            return mk_store_fn(aslot, gshape)

        # unary/simple cases writing straight through
        if op == "add":
            sf = mk(work_shape)
            if not trail:
                return lambda: sf(cot)
            s = np.empty(work_shape)
            return lambda: sf(np.sum(cot, axis=-1, out=s))
        if op == "sub":
            sf = mk(work_shape)
            s = np.empty(work_shape)
            if k == 0:
                if not trail:
                    return lambda: sf(cot)
                return lambda: sf(np.sum(cot, axis=-1, out=s))
            sneg = np.empty(full_shape)
            if not trail:
                return lambda: sf(np.negative(cot, out=sneg))

            def ker():
                np.negative(cot, out=sneg)
                sf(np.sum(sneg, axis=-1, out=s))
            return ker

        s_full = np.empty(full_shape)

        def finish_factory():
            if trail:
                s_tr = np.empty(work_shape)
                sf = mk(work_shape)

                def finish():
                    np.sum(s_full, axis=-1, out=s_tr)
                    sf(s_tr)
                return finish
            sf = mk(full_shape)
            return lambda: sf(s_full)

        finish = finish_factory()

        def other_lifted():
            o = vals[slot[id(node.args[1 - k])]]
            if node.shape != _SCALAR and node.args[1 - k].shape == _SCALAR and np.ndim(o) > 0:
                return np.expand_dims(o, -1)
            return o

        if op == "mul":
            other = other_lifted()

            def ker():
                np.multiply(cot, other, out=s_full)
                finish()
            return ker
        if op == "div":
            a_l = (np.expand_dims(av, -1)
                   if node.shape != _SCALAR and node.args[0].shape == _SCALAR and np.ndim(av) > 0
                   else av)
            bv = vals[slot[id(node.args[1])]]
            b_l = (np.expand_dims(bv, -1)
                   if node.shape != _SCALAR and node.args[1].shape == _SCALAR and np.ndim(bv) > 0
                   else bv)
            if k == 0:
                def ker():
                    np.divide(cot, b_l, out=s_full)
                    finish()
                return ker

            def ker():
                np.multiply(b_l, b_l, out=s_full)
                np.divide(av if np.shape(av) == np.shape(s_full) else a_l, s_full, out=s_full)
                np.multiply(s_full, cot, out=s_full)
                np.negative(s_full, out=s_full)
                finish()
            return ker
        if op == "neg":
            def ker():
                np.negative(cot, out=s_full)
                finish()
            return ker
        if op == "exp":
            def ker():
                np.multiply(cot, out_val, out=s_full)
                finish()
            return ker
        if op == "log":
            def ker():
                np.divide(cot, av, out=s_full)
                finish()
            return ker
        if op == "sqrt":
            def ker():
                np.divide(cot, out_val, out=s_full)
                np.multiply(s_full, 0.5, out=s_full)
                finish()
            return ker
        if op == "square":
            def ker():
                np.multiply(cot, av, out=s_full)
                np.multiply(s_full, 2.0, out=s_full)
                finish()
            return ker
        if op == "tanh":
            def ker():
                np.multiply(out_val, out_val, out=s_full)
                np.subtract(1.0, s_full, out=s_full)
                np.multiply(s_full, cot, out=s_full)
                finish()
            return ker
        if op == "sigmoid":
            def ker():
                np.subtract(1.0, out_val, out=s_full)
                np.multiply(s_full, out_val, out=s_full)
                np.multiply(s_full, cot, out=s_full)
                finish()
            return ker
        if op == "softplus":
            s2 = np.empty(full_shape)

            def ker():
                np.multiply(av, 0.5, out=s2)
                np.tanh(s2, out=s_full)
                np.multiply(s_full, 0.5, out=s_full)
                np.add(s_full, 0.5, out=s_full)
                np.multiply(s_full, cot, out=s_full)
                finish()
            return ker
        if op == "relu":
            def ker():
                np.multiply(cot, av > 0.0, out=s_full)
                finish()
            return ker
        if op == "dot":
            other = vals[slot[id(node.args[1 - k])]]
            ce = np.expand_dims(cot, -1)
            gshape = np.broadcast_shapes(np.shape(ce), np.shape(other))
            s = np.empty(gshape)
            sf = mk(gshape)

            def ker():
                np.multiply(ce, other, out=s)
                sf(s)
            return ker
        if op == "vsum":
            n = arg.shape[0]
            ce = np.broadcast_to(np.expand_dims(cot, -1), np.shape(cot) + (n,))
            sf = mk(np.shape(ce))
            return lambda: sf(ce)
        if op == "broadcast":
            gshape = np.shape(cot)[:-1]
            s = np.empty(gshape)
            sf = mk(gshape)
            return lambda: sf(np.sum(cot, axis=-1, out=s))
        if op == "stack":
            view = cot[..., k]
            sf = mk(np.shape(view))
            return lambda: sf(view)
        if op == "index":
            i_idx = node.meta
            n = arg.shape[0]
            gshape = np.shape(cot) + (n,)
            s = np.zeros(gshape)
            sf = mk(gshape)

            def ker():
                s.fill(0.0)
                s[..., i_idx] = cot
                sf(s)
            return ker
        if op == "scatter":
            view = cot[..., node.meta[0]]
            sf = mk(np.shape(view))
            return lambda: sf(view)
        if op == "concat":
            n = node.meta
            view = cot[..., :n] if k == 0 else cot[..., n:]
            sf = mk(np.shape(view))
            return lambda: sf(view)
        if op == "vslice":
            start, stop, n = node.meta
            gshape = np.shape(cot)[:-1] + (n,)
            s = np.zeros(gshape)
            sf = mk(gshape)

            def ker():
                s.fill(0.0)
                s[..., start:stop] = cot
                sf(s)
            return ker
        if op == "step":
            return None
        raise ContractError(f"no backward kernel for op '{op}'")  # pragma: no cover

    # -- execution --------------------------------------------------------------

    def _prepare(self, arrays):
        if len(arrays) != len(self.inputs):
            raise ConfigError(f"expected {len(self.inputs)} input arrays")
        batch = None
        prepared = []
        for leaf, arr in zip(self.inputs, arrays):
            arr = _check_input(leaf, arr)
            if arr.ndim == len(leaf.shape) + 1:
                if batch is not None and arr.shape[0] != batch:
                    raise ContractError("inconsistent batch sizes across inputs")
                batch = arr.shape[0]
            prepared.append(arr)
        if batch is not None:
            for leaf, arr in zip(self.inputs, prepared):
                if arr.ndim == len(leaf.shape):
                    raise ContractError("mix of batched and unbatched inputs")
        if self._bound_batch != batch:
            self._bind(batch)
        for buf, arr in zip(self._in_bufs, prepared):
            np.copyto(buf, arr)
        return batch

    def __call__(self, *arrays) -> list[np.ndarray]:
        self._prepare(arrays)
        with np.errstate(all="ignore"):
            for fn in self._fwd_instrs:
                fn()
        outs = [np.array(self._vals[s]) for s in self._root_slots]
        if self.check_finite and not all(np.all(np.isfinite(o)) for o in outs):
            self._raise_nonfinite()
        return outs

    def value_and_grad(self, arrays: Sequence, seeds: Sequence,
                       grad: np.ndarray) -> list[np.ndarray]:
        """Forward plus reverse accumulation of d(sum_b seed_b*root_b)/dparams.

        Gradients are summed into `grad` (flat, caller-owned) in a fixed
        order, so accumulation is reproducible.
        """
        self._prepare(arrays)
        with np.errstate(all="ignore"):
            for fn in self._fwd_instrs:
                fn()
        outs = [np.array(self._vals[s]) for s in self._root_slots]
        if self.check_finite and not all(np.all(np.isfinite(o)) for o in outs):
            self._raise_nonfinite()
        filled = self._filled
        for j in range(len(filled)):
            filled[j] = 0
        for slot, seed in zip(self._root_slots, seeds):
            buf = self._cotbufs[slot]
            if buf is None:
                continue  # root does not touch parameters
            if filled[slot]:
                buf += seed
            else:
                np.copyto(buf, seed)
                filled[slot] = 1
        for fn in self._bwd_instrs:
            fn(grad)
        return outs

    def _raise_nonfinite(self):
        arrays = {leaf.meta: buf for leaf, buf in zip(self.inputs, self._in_bufs)}
        _interp_values(self.order, arrays, self.store, check_finite=True)
        raise NumericError("non-finite value (node not identified)")  # pragma: no cover
