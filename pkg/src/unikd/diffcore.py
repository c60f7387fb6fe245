"""Minimal define-by-run reverse-mode autodiff over dense numpy arrays.

Every op builds a fresh node; a graph lives only as long as the tensors that
reference it, so each mini-batch rebuilds its own record. ``no_grad()``
switches recording off for teacher queries and evaluation.
"""
import contextlib
import hashlib
import itertools
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError, UsageError

DEFAULT_DTYPE = np.float64

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording parents or backward closures."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def tune_allocator(threshold=1 << 30):
    """Keep large temporaries on the glibc heap instead of fresh mmap pages.

    Every op allocates arrays of a few hundred kilobytes; by default glibc maps
    and unmaps each one, and the page faults cost about a fifth of a training
    iteration. Returns True when the allocator accepted the setting, False on
    platforms without glibc.
    """
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    # M_TRIM_THRESHOLD = -1, M_MMAP_THRESHOLD = -3
    ok = libc.mallopt(-1, ctypes.c_int(min(2 * threshold, 2 ** 31 - 1)))
    return bool(ok and libc.mallopt(-3, ctypes.c_int(threshold)))


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, op="leaf", parents=(), backward=None, dtype=None):
        self.values = np.asarray(values, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(self.values.dtype, np.floating):
            self.values = self.values.astype(DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values)

    def backward(self, params=None):
        backward(self, params)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale_add(self, None, alpha=-1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def constant(values, dtype=None):
    return Tensor(values, requires_grad=False, dtype=dtype)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(op, values, parents, backward):
    # a sum is finite only if every term is (barring overflow of huge finite values)
    if not np.isfinite(np.add.reduce(values, axis=None)):
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(op, f"shape {values.shape}")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(values, op=op)
    return Tensor(values, requires_grad=True, op=op, parents=parents, backward=backward)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# forward ops


def affine(x, W, b=None):
    """``x @ W + b`` for ``x`` of shape (n, i), ``W`` (i, o), ``b`` (o,)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.values.ndim != 2 or W.values.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError("affine", x.shape, W.shape)
    out = x.values @ W.values
    parents = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError("affine", x.shape, W.shape, b.shape)
        out += b.values
        parents = (x, W, b)

    def bw(g):
        grads = [g @ W.values.T if x.requires_grad else None,
                 x.values.T @ g if W.requires_grad else None]
        if b is not None:
            grads.append(g.sum(axis=0) if b.requires_grad else None)
        return grads

    return _make("affine", out, parents, bw)


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.values, 0)
    return _make("relu", out, (x,), lambda g: [g * (out > 0)])


def softplus(x):
    """``log(1 + e^x)`` evaluated as ``max(x, 0) + log1p(e^{-|x|})``."""
    x = as_tensor(x)
    v = x.values
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    # below about -745 the exact value is under the smallest subnormal; keep it positive
    out = np.maximum(out, np.finfo(out.dtype).smallest_subnormal)

    def bw(g):
        return [g * _sigmoid(v)]

    return _make("softplus", out, (x,), bw)


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.values)
    return _make("sigmoid", s, (x,), lambda g: [g * s * (1.0 - s)])


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.values)      # overflow is reported by the finiteness check
    return _make("exp", out, (x,), lambda g: [g * out])


def log(x):
    x = as_tensor(x)
    if np.any(x.values <= 0):
        raise DomainError(f"log: non-positive input (min {x.values.min():.6g})")
    return _make("log", np.log(x.values), (x,), lambda g: [g / x.values])


def square(x):
    x = as_tensor(x)
    return _make("square", x.values * x.values, (x,), lambda g: [2.0 * g * x.values])


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = np.sum(x.values, axis=axis)

    def bw(g):
        if axis is None:
            return [np.broadcast_to(g, x.shape).copy()]
        return [np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()]

    return _make("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    out = np.mean(x.values, axis=axis)

    def bw(g):
        if axis is None:
            return [np.full(x.shape, g / n, dtype=x.dtype)]
        return [np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy()]

    return _make("mean", np.asarray(out), (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return np.split(g, splits, axis=axis)

    return _make("concat", out, tuple(tensors), bw)


def scale_add(a, b=None, alpha=1.0, beta=1.0):
    """``alpha * a + beta * b``; ``b`` may be a tensor, array, scalar or None."""
    a = as_tensor(a)
    if b is None:
        return _make("scale-add", alpha * a.values, (a,), lambda g: [alpha * g])
    b = as_tensor(b, dtype=a.dtype)
    shape = _broadcast_shape("scale-add", a, b)
    out = alpha * a.values + beta * b.values

    def bw(g):
        return [_unbroadcast(alpha * g, a.shape), _unbroadcast(beta * g, b.shape)]

    return _make("scale-add", np.broadcast_to(out, shape).copy(), (a, b), bw)


def add(a, b):
    return scale_add(a, b, 1.0, 1.0)


def sub(a, b):
    return scale_add(a, b, 1.0, -1.0)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = a.values * b.values

    def bw(g):
        return [_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)]

    return _make("mul", out, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.values == 0):
        raise DomainError("div: zero denominator")
    out = a.values / b.values

    def bw(g):
        return [_unbroadcast(g / b.values, a.shape), _unbroadcast(-g * out / b.values, b.shape)]

    return _make("div", out, (a, b), bw)


def exclusive_cumsum(x):
    """Running sum along the last axis that excludes the current entry."""
    x = as_tensor(x)
    # shifted cumsum rather than cumsum - x, which can round out of order
    out = np.zeros_like(x.values)
    np.cumsum(x.values[..., :-1], axis=-1, out=out[..., 1:])

    def bw(g):
        # d out_j / d x_i = 1 for j > i
        rev = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
        return [rev - g]

    return _make("exclusive-cumsum", out, (x,), bw)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _make("reshape", out, (x,), lambda g: [g.reshape(x.shape)])


def getitem(x, index):
    x = as_tensor(x)
    out = x.values[index]

    def bw(g):
        full = np.zeros_like(x.values)
        np.add.at(full, index, g)
        return [full]

    return _make("getitem", np.array(out), (x,), bw)


def take(x, index, axis):
    """``np.take_along_axis(x, index, axis)`` with a scatter-add backward."""
    x = as_tensor(x)
    out = np.take_along_axis(x.values, index, axis=axis)

    def bw(g):
        full = np.zeros_like(x.values)
        if _is_permutation(index, x.shape[axis], axis):
            np.put_along_axis(full, index, g, axis=axis)
        else:
            idx = np.indices(index.shape, sparse=True)
            idx = list(np.broadcast_arrays(*idx))
            idx[axis % x.values.ndim] = index
            np.add.at(full, tuple(idx), g)
        return [full]

    return _make("take", out, (x,), bw)


def _is_permutation(index, n, axis):
    if index.shape[axis] != n:
        return False
    s = np.sort(index, axis=axis)
    return bool(np.all(s == np.arange(n).reshape([-1 if i == axis % index.ndim else 1
                                                  for i in range(index.ndim)])))


def expand(x, axis):
    x = as_tensor(x)
    return _make("expand", np.expand_dims(x.values, axis), (x,), lambda g: [np.squeeze(g, axis)])


_KINDS = {
    "affine": affine,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sum": sum,
    "mean": mean,
    "square": square,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "scale-add": scale_add,
    "mul": mul,
    "div": div,
    "exclusive-cumsum": exclusive_cumsum,
}


def forward_op(kind, *inputs, **kwargs):
    """Dispatch an op by its kind name."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise UsageError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf.

    When ``params`` is given, parameters the loss does not reach receive an
    all-zero gradient instead of keeping ``None``.
    """
    if loss.values.size != 1 or loss.values.ndim != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.values)
    if not loss.requires_grad:
        return
    grads = {loss.node_id: np.ones_like(loss.values)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# parameters


MAGIC = b"UNKD"
FORMAT_VERSION = 1


class ParameterSet:
    """Ordered, uniquely named collection of trainable leaf tensors."""

    def __init__(self, entries=None):
        self._entries = OrderedDict()
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name, values):
        if name in self._entries:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = values if isinstance(values, Tensor) else Tensor(np.array(values))
        t.requires_grad = True
        t.op = "param"
        self._entries[name] = t
        return t

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    @property
    def total_count(self):
        return int(np.sum([t.size for t in self._entries.values()], dtype=np.int64))

    @property
    def nbytes(self):
        return int(np.sum([t.values.nbytes for t in self._entries.values()], dtype=np.int64))

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = np.zeros_like(t.values)

    def clear_grad(self):
        for t in self._entries.values():
            t.grad = None

    def copy(self):
        return ParameterSet(OrderedDict((n, Tensor(t.values.copy())) for n, t in self._entries.items()))

    def checksum(self):
        h = hashlib.sha256()
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
        return h.hexdigest()

    def equal(self, other):
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].values, other[n].values) for n in self)

    def to_bytes(self):
        out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(self._entries))]
        for name, t in self._entries.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw)))
            out.append(raw)
            out.append(struct.pack("<I", t.values.ndim))
            out.append(struct.pack(f"<{t.values.ndim}I", *t.shape))
            out.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf, dtype=DEFAULT_DTYPE):
        from .errors import DataError

        if buf[:4] != MAGIC:
            raise DataError("parameter file: bad magic bytes")
        pos = 4
        try:
            version, count = struct.unpack_from("<II", buf, pos)
            pos += 8
            if version != FORMAT_VERSION:
                raise DataError(f"parameter file: unsupported version {version}")
            entries = OrderedDict()
            for _ in range(count):
                (n,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                name = buf[pos:pos + n].decode("utf-8")
                pos += n
                (ndim,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                shape = struct.unpack_from(f"<{ndim}I", buf, pos)
                pos += 4 * ndim
                size = int(np.prod(shape, dtype=np.int64))
                if pos + 8 * size > len(buf):
                    raise DataError(f"parameter file: block {name!r} truncated")
                vals = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
                pos += 8 * size
                entries[name] = Tensor(vals.astype(dtype))
        except struct.error as exc:
            raise DataError(f"parameter file truncated: {exc}") from None
        return cls(entries)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, dtype=DEFAULT_DTYPE):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), dtype=dtype)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        for name, t in params.items():
            state.first_moment[name] = np.zeros_like(t.values)
            state.second_moment[name] = np.zeros_like(t.values)
        return state


def adam_step(params, state):
    """Bias-corrected Adam update, then clear gradients."""
    for name, t in params.items():
        if t.grad is None:
            raise UsageError(f"adam_step: parameter {name!r} has no gradient")
        if name not in state.first_moment or state.first_moment[name].shape != t.shape:
            raise UsageError(f"adam_step: optimizer state does not match parameter {name!r}")
    state.step_count += 1
    k = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** k
    c2 = 1.0 - b2 ** k
    for name, t in params.items():
        g = t.grad
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.values -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        t.grad = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class FDReport:
    block_errors: dict
    tol: float

    @property
    def max_error(self):
        return max(self.block_errors.values()) if self.block_errors else 0.0

    @property
    def failures(self):
        return {k: v for k, v in self.block_errors.items() if v > self.tol}

    @property
    def passed(self):
        return not self.failures


def finite_diff_check(f, params, h=1e-4, tol=1e-4, max_entries=None, rng=None):
    """Compare reverse-mode gradients of ``f()`` with central differences.

    The error per block is ``max|g_ad - g_fd| / max(max|g_ad|, max|g_fd|)``;
    a block whose gradients are zero on both routes reports 0. ``max_entries``
    checks a random subset of entries per block.
    """
    if h <= 0:
        raise UsageError("finite_diff_check: h must be positive")
    params.clear_grad()
    loss = f()
    backward(loss, params)
    analytic = {n: t.grad.copy() for n, t in params.items()}
    params.clear_grad()
    rng = rng if rng is not None else np.random.default_rng(0)

    errors = {}
    with no_grad():
        for name, t in params.items():
            flat = t.values.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            ga = analytic[name].reshape(-1)[idx]
            gf = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().values)
                flat[i] = orig - h
                fm = float(f().values)
                flat[i] = orig
                gf[j] = (fp - fm) / (2 * h)
            scale = max(np.max(np.abs(ga)), np.max(np.abs(gf)))
            errors[name] = 0.0 if scale == 0 else float(np.max(np.abs(ga - gf)) / scale)
    return FDReport(errors, tol)
