"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Graph` records operations in construction order (which is a
topological order by construction); :meth:`Graph.backward` walks the tape
in reverse. Graphs opened with ``second_order=True`` additionally support
``backward(..., create_graph=True)``, which emits the backward pass itself
as recorded operations so a second differentiation can run through it.

Values live in C-contiguous numpy arrays of rank <= 3; the numeric heavy
lifting is delegated to the kernel backend selected at import time.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np

from .backend import kernels as K


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where finite input is required."""


_node_ids = itertools.count()
_active = threading.local()


def _current_graph():
    stack = getattr(_active, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Value plus accumulated gradient, identified by a node id."""

    __slots__ = ("data", "requires_grad", "node_id", "_grad", "_tracked")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0:
            # ascontiguousarray would promote 0-d scalars to 1-d
            arr = np.ascontiguousarray(arr)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported rank 3")
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._grad = None
        self._tracked = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        if self._grad is not None:
            self._grad.fill(0.0)

    def item(self):
        return float(self.data)

    def detach(self):
        """Copy of the value as a fresh untracked tensor."""
        return Tensor(self.data.copy())

    def _accumulate(self, g):
        if g is None:
            return
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self._tracked})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Graph:
    """Tape of recorded operations, usable as a context manager."""

    def __init__(self, second_order=False):
        self.records = []
        self.second_order = second_order

    def __enter__(self):
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = _active.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _active.stack.pop()
        return False

    def backward(self, loss, create_graph=False):
        """Accumulate d(loss)/d(leaf) into every tracked tensor's grad.

        With ``create_graph=True`` (second-order graphs only) nothing is
        written to ``.grad``; instead a dict mapping node id to the
        gradient *tensor* is returned, and those gradient tensors are
        recorded on this graph so they can be differentiated again.
        """
        if loss.shape != ():
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if create_graph and not self.second_order:
            raise ValueError("create_graph requires a second_order graph")
        if create_graph:
            return self._backward_graph(loss)
        gmap = {loss.node_id: np.ones(())}
        for out, inputs, vjp, _ in reversed(self.records):
            g = gmap.pop(out.node_id, None)
            if g is None:
                continue
            if g.ndim and not g.flags.c_contiguous:
                g = np.ascontiguousarray(g)
            out._accumulate(g)
            for t, contrib in zip(inputs, vjp(g)):
                if contrib is None or not t._tracked:
                    continue
                prev = gmap.get(t.node_id)
                gmap[t.node_id] = contrib if prev is None else prev + contrib
        for out, inputs, _, _ in self.records:
            for t in inputs:
                g = gmap.pop(t.node_id, None)
                if g is not None:
                    t._accumulate(g)
        loss._accumulate(gmap.pop(loss.node_id, None))

    def _backward_graph(self, loss):
        snapshot = list(self.records)
        gmap = {loss.node_id: Tensor(np.ones(()))}
        for out, inputs, _, vjp_t in reversed(snapshot):
            g = gmap.get(out.node_id)
            if g is None:
                continue
            if vjp_t is None:
                raise NotImplementedError(
                    "operation has no differentiable backward rule"
                )
            for t, contrib in zip(inputs, vjp_t(g)):
                if contrib is None or not t._tracked:
                    continue
                prev = gmap.get(t.node_id)
                gmap[t.node_id] = contrib if prev is None else add(prev, contrib)
        return gmap


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, inputs, vjp, vjp_t=None):
    graph = _current_graph()
    if graph is None or not any(t._tracked for t in inputs):
        return out
    out._tracked = True
    graph.records.append((out, inputs, vjp, vjp_t))
    return out


def _same_or_scalar(a, b, name):
    if b.shape == () or a.shape == b.shape:
        return
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are incompatible")


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        out = Tensor(a.data + float(b))
        return _record(out, (a,), lambda g: (g,), lambda g: (g,))
    b = _as_tensor(b)
    if a.shape == () and b.shape != ():
        a, b = b, a
    _same_or_scalar(a, b, "add")
    out = Tensor(a.data + b.data)
    if b.shape == () and a.shape != ():
        vjp = lambda g: (g, g.sum())
        vjp_t = lambda g: (g, sum_all(g))
    else:
        vjp = lambda g: (g, g)
        vjp_t = lambda g: (g, g)
    return _record(out, (a, b), vjp, vjp_t)


def sub(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        out = Tensor(a.data - float(b))
        return _record(out, (a,), lambda g: (g,), lambda g: (g,))
    b = _as_tensor(b)
    _same_or_scalar(a, b, "sub")
    out = Tensor(a.data - b.data)
    if b.shape == () and a.shape != ():
        vjp = lambda g: (g, -g.sum())
        vjp_t = lambda g: (g, scale(sum_all(g), -1.0))
    else:
        vjp = lambda g: (g, -g)
        vjp_t = lambda g: (g, scale(g, -1.0))
    return _record(out, (a, b), vjp, vjp_t)


def mul(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    b = _as_tensor(b)
    if a.shape == () and b.shape != ():
        a, b = b, a
    _same_or_scalar(a, b, "mul")
    out = Tensor(a.data * b.data)
    if b.shape == () and a.shape != ():
        vjp = lambda g: (g * b.data, (g * a.data).sum())
        vjp_t = lambda g: (mul(g, b), sum_all(mul(g, a)))
    else:
        vjp = lambda g: (g * b.data, g * a.data)
        vjp_t = lambda g: (mul(g, b), mul(g, a))
    return _record(out, (a, b), vjp, vjp_t)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,), lambda g: (scale(g, c),))


def relu(a):
    a = _as_tensor(a)
    out = Tensor(K.relu_fwd(a.data))
    vjp = lambda g: (K.relu_bwd(a.data, g),)

    def vjp_t(g):
        return (mul(g, Tensor((a.data > 0.0).astype(np.float64))),)

    return _record(out, (a,), vjp, vjp_t)


def sigmoid(a):
    a = _as_tensor(a)
    out = Tensor(K.sigmoid_fwd(a.data))
    vjp = lambda g: (K.sigmoid_bwd(out.data, g),)

    def vjp_t(g):
        return (mul(g, mul(out, add(scale(out, -1.0), 1.0))),)

    return _record(out, (a,), vjp, vjp_t)


def softplus(a):
    a = _as_tensor(a)
    out = Tensor(K.softplus_fwd(a.data))
    vjp = lambda g: (K.softplus_bwd(a.data, g),)
    vjp_t = lambda g: (mul(g, sigmoid(a)),)
    return _record(out, (a,), vjp, vjp_t)


def exp(a):
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))
    vjp = lambda g: (g * out.data,)
    vjp_t = lambda g: (mul(g, out),)
    return _record(out, (a,), vjp, vjp_t)


def pow_const(a, p):
    a = _as_tensor(a)
    p = float(p)
    out = Tensor(a.data**p)
    vjp = lambda g: (g * p * a.data ** (p - 1.0),)
    vjp_t = lambda g: (mul(g, scale(pow_const(a, p - 1.0), p)),)
    return _record(out, (a,), vjp, vjp_t)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale-by-constant": scale,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
}


def elementwise(kind, a, b=None):
    """Dispatch an elementwise operation by name."""
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return op(a) if b is None else op(a, b)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = Tensor(K.matmul_nn(a.data, b.data))
    a_t, b_t = a._tracked, b._tracked

    def vjp(g):
        return (
            K.matmul_nt(g, b.data) if a_t else None,
            K.matmul_tn(a.data, g) if b_t else None,
        )

    def vjp_t(g):
        return (
            matmul(g, transpose(b)) if a_t else None,
            matmul(transpose(a), g) if b_t else None,
        )

    return _record(out, (a, b), vjp, vjp_t)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (g.T,), lambda g: (transpose(g),))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    vjp = lambda g: (g.reshape(old),)
    vjp_t = lambda g: (reshape(g, old),)
    return _record(out, (a,), vjp, vjp_t)


def pick(a, index):
    """Extract one entry as a scalar tensor."""
    a = _as_tensor(a)
    index = tuple(np.atleast_1d(index)) if not isinstance(index, tuple) else index
    out = Tensor(a.data[index])
    if out.shape != ():
        raise ShapeError(f"pick({index}) is not a single entry of {a.shape}")

    def vjp(g):
        z = np.zeros_like(a.data)
        z[index] = g
        return (z,)

    vjp_t = lambda g: (scatter(g, a.shape, index),)
    return _record(out, (a,), vjp, vjp_t)


def scatter(s, shape, index):
    """Embed a scalar tensor into a zero tensor of the given shape."""
    s = _as_tensor(s)
    z = np.zeros(shape)
    z[index] = s.data
    out = Tensor(z)
    vjp = lambda g: (g[index],)
    vjp_t = lambda g: (pick(g, index),)
    return _record(out, (s,), vjp, vjp_t)


def slice_cols(a, start, stop):
    a = _as_tensor(a)
    n = a.shape[1]
    out = Tensor(a.data[:, start:stop])

    def vjp(g):
        z = np.zeros_like(a.data)
        z[:, start:stop] = g
        return (z,)

    vjp_t = lambda g: (pad_cols(g, start, n - stop),)
    return _record(out, (a,), vjp, vjp_t)


def pad_cols(a, left, right):
    a = _as_tensor(a)
    out = Tensor(np.pad(a.data, ((0, 0), (left, right))))
    stop = left + a.shape[1]
    vjp = lambda g: (g[:, left:stop],)
    vjp_t = lambda g: (slice_cols(g, left, stop),)
    return _record(out, (a,), vjp, vjp_t)


def concat_cols(parts):
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def vjp(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    def vjp_t(g):
        return tuple(
            slice_cols(g, int(offsets[i]), int(offsets[i + 1]))
            for i in range(len(parts))
        )

    return _record(out, tuple(parts), vjp, vjp_t)


def add_bias(mat, vec):
    """Add a length-n vector to every row of an m-by-n matrix."""
    mat, vec = _as_tensor(mat), _as_tensor(vec)
    if mat.data.ndim != 2 or vec.shape != (mat.shape[1],):
        raise ShapeError(f"add_bias: {mat.shape} with bias {vec.shape}")
    out = Tensor(mat.data + vec.data)
    vjp = lambda g: (g, g.sum(axis=0))
    vjp_t = lambda g: (g, sum_cols(g))
    return _record(out, (mat, vec), vjp, vjp_t)


def mul_rowvec(mat, vec):
    mat, vec = _as_tensor(mat), _as_tensor(vec)
    if mat.data.ndim != 2 or vec.shape != (mat.shape[1],):
        raise ShapeError(f"mul_rowvec: {mat.shape} with vector {vec.shape}")
    out = Tensor(mat.data * vec.data)
    vjp = lambda g: (g * vec.data, (g * mat.data).sum(axis=0))
    vjp_t = lambda g: (mul_rowvec(g, vec), sum_cols(mul(g, mat)))
    return _record(out, (mat, vec), vjp, vjp_t)


def sub_colvec(mat, col):
    mat, col = _as_tensor(mat), _as_tensor(col)
    if col.shape != (mat.shape[0], 1):
        raise ShapeError(f"sub_colvec: {mat.shape} with column {col.shape}")
    out = Tensor(mat.data - col.data)
    vjp = lambda g: (g, -g.sum(axis=1, keepdims=True))
    vjp_t = lambda g: (g, scale(sum_rows(g), -1.0))
    return _record(out, (mat, col), vjp, vjp_t)


def mul_colvec(mat, col):
    mat, col = _as_tensor(mat), _as_tensor(col)
    if col.shape != (mat.shape[0], 1):
        raise ShapeError(f"mul_colvec: {mat.shape} with column {col.shape}")
    out = Tensor(mat.data * col.data)
    vjp = lambda g: (g * col.data, (g * mat.data).sum(axis=1, keepdims=True))
    vjp_t = lambda g: (mul_colvec(g, col), sum_rows(mul(g, mat)))
    return _record(out, (mat, col), vjp, vjp_t)


def sum_rows(mat):
    """Row sums of a matrix, kept as an m-by-1 column."""
    mat = _as_tensor(mat)
    out = Tensor(mat.data.sum(axis=1, keepdims=True))
    m, n = mat.shape
    vjp = lambda g: (np.broadcast_to(g, (m, n)).copy(),)
    vjp_t = lambda g: (broadcast_col(g, n),)
    return _record(out, (mat,), vjp, vjp_t)


def sum_cols(mat):
    """Column sums of a matrix as a length-n vector."""
    mat = _as_tensor(mat)
    out = Tensor(mat.data.sum(axis=0))
    m, n = mat.shape
    vjp = lambda g: (np.broadcast_to(g, (m, n)).copy(),)
    vjp_t = lambda g: (broadcast_row(g, m),)
    return _record(out, (mat,), vjp, vjp_t)


def broadcast_col(col, n):
    """Repeat an m-by-1 column across n columns."""
    col = _as_tensor(col)
    out = Tensor(np.broadcast_to(col.data, (col.shape[0], n)).copy())
    vjp = lambda g: (g.sum(axis=1, keepdims=True),)
    vjp_t = lambda g: (sum_rows(g),)
    return _record(out, (col,), vjp, vjp_t)


def broadcast_row(vec, m):
    """Repeat a length-n vector across m rows."""
    vec = _as_tensor(vec)
    out = Tensor(np.broadcast_to(vec.data, (m, vec.shape[0])).copy())
    vjp = lambda g: (g.sum(axis=0),)
    vjp_t = lambda g: (sum_cols(g),)
    return _record(out, (vec,), vjp, vjp_t)


def sum_all(a):
    a = _as_tensor(a)
    out = Tensor(a.data.sum())
    shape = a.shape
    vjp = lambda g: (np.full(shape, float(g)),)
    vjp_t = lambda g: (broadcast_to(g, shape),)
    return _record(out, (a,), vjp, vjp_t)


def broadcast_to(s, shape):
    s = _as_tensor(s)
    if s.shape != ():
        raise ShapeError(f"broadcast_to expects a scalar, got {s.shape}")
    out = Tensor(np.full(shape, float(s.data)))
    vjp = lambda g: (g.sum(),)
    vjp_t = lambda g: (sum_all(g),)
    return _record(out, (s,), vjp, vjp_t)


# ---------------------------------------------------------------------------
# fused row-wise operations


def softmax_rows(a):
    """Row-wise softmax with per-row max subtraction."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {a.shape}")
    if not np.isfinite(a.data).all():
        raise NumericalError("softmax_rows received non-finite input")
    graph = _current_graph()
    if graph is not None and graph.second_order and a._tracked:
        # expressed through primitives so the backward pass itself stays
        # differentiable
        shift = Tensor(a.data.max(axis=1, keepdims=True))
        e = exp(sub_colvec(a, shift))
        return mul_colvec(e, pow_const(sum_rows(e), -1.0))
    out = Tensor(K.softmax_rows_fwd(a.data))
    vjp = lambda g: (K.softmax_rows_bwd(out.data, g),)
    return _record(out, (a,), vjp, None)


def layer_norm(a, gain, bias, eps=1e-5):
    """Row-wise normalization to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got {a.shape}")
    n = a.shape[1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: input {a.shape} with gain {gain.shape}, bias {bias.shape}"
        )
    graph = _current_graph()
    if graph is not None and graph.second_order and (
        a._tracked or gain._tracked or bias._tracked
    ):
        mu = scale(sum_rows(a), 1.0 / n)
        xc = sub_colvec(a, mu)
        var = scale(sum_rows(mul(xc, xc)), 1.0 / n)
        inv = pow_const(add(var, eps), -0.5)
        xhat = mul_colvec(xc, inv)
        return add_bias(mul_rowvec(xhat, gain), bias)
    y, xhat, inv = K.layer_norm_fwd(a.data, gain.data, bias.data, eps)
    out = Tensor(y)

    def vjp(g):
        dx, dgain, dbias = K.layer_norm_bwd(xhat, inv, gain.data, g)
        return dx, dgain, dbias

    return _record(out, (a, gain, bias), vjp, None)


def conv3(emb, kernel):
    """Depthwise width-3 convolution over rows with zero padding."""
    emb, kernel = _as_tensor(emb), _as_tensor(kernel)
    if kernel.shape != (3, emb.shape[1]):
        raise ShapeError(f"conv3: input {emb.shape} needs kernel (3, {emb.shape[1]})")
    out = Tensor(K.conv3_fwd(emb.data, kernel.data))
    e_t, k_t = emb._tracked, kernel._tracked

    def vjp(g):
        return (
            K.conv3_fwd(g, kernel.data[::-1].copy()) if e_t else None,
            K.conv3_kernel_grad(emb.data, g) if k_t else None,
        )

    def vjp_t(g):
        return (
            conv3(g, flip_rows(kernel)) if e_t else None,
            conv3_kernel_vjp(emb, g) if k_t else None,
        )

    return _record(out, (emb, kernel), vjp, vjp_t)


def flip_rows(a):
    a = _as_tensor(a)
    out = Tensor(a.data[::-1].copy())
    vjp = lambda g: (g[::-1].copy(),)
    vjp_t = lambda g: (flip_rows(g),)
    return _record(out, (a,), vjp, vjp_t)


def conv3_kernel_vjp(emb, dy):
    """Kernel gradient of conv3 as a recorded (differentiable) operation."""
    emb, dy = _as_tensor(emb), _as_tensor(dy)
    out = Tensor(K.conv3_kernel_grad(emb.data, dy.data))

    def vjp(g):
        return (
            K.conv3_fwd(dy.data, g[::-1].copy()) if emb._tracked else None,
            K.conv3_fwd(emb.data, g) if dy._tracked else None,
        )

    return _record(out, (emb, dy), vjp, None)


# ---------------------------------------------------------------------------
# gradient checking


def check_gradients(f, params, h=1e-5):
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must rebuild its computation from the current parameter values on
    every call and return a scalar tensor. Returns the maximum over all
    parameter entries of ``|autodiff - fd| / max(1, |autodiff|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    for p in params:
        p.zero_grad()
    with Graph() as graph:
        loss = f()
        if not math.isfinite(loss.item()):
            raise NumericalError("objective is not finite at the base point")
        graph.backward(loss)

    def value_at():
        out = f().item()
        if not math.isfinite(out):
            raise NumericalError("objective became non-finite during probing")
        return out

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value_at()
            flat[i] = orig - h
            down = value_at()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
            worst = max(worst, float(err))
    return worst
