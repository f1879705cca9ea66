"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a float32 or float64 ndarray and records the operations
applied to it.  ``backward()`` on a scalar output walks the recorded graph in
reverse topological order and accumulates gradients into every leaf that was
created with ``requires_grad=True``.  Gradients are always added into
``.grad``, never overwritten, so a parameter used twice receives the sum of
both contributions.

Design constraints that the rest of the codebase relies on:

- float32 by default, float64 on request (gradient checking runs in double).
- Deterministic: no RNG anywhere in the engine, numpy reductions only, a
  fixed DFS order for the topological sort.  Same inputs, same bits.
- Broadcasting is restricted to three shapes of pairing: identical shapes, a
  scalar operand, or a trailing-suffix match such as (B, N, D) with (D,).
  Anything else must go through an explicit ``expand``.  This keeps every
  backward reduction an unambiguous sum over leading axes.
- Integer data (token ids, masks used as indices) never lives in a Tensor;
  it is passed around as plain ndarrays and enters the graph only through
  ``embedding`` lookups or constant multiplier masks.
"""

from __future__ import annotations

import math

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference / FD probes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _suffix_broadcastable(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    if len(sa) == 0 or len(sb) == 0:
        return True
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return True
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return True
    return False


def _check_pair(a: "Tensor", b: "Tensor", opname: str) -> None:
    sa, sb = a.data.shape, b.data.shape
    if a.data.size == 1 or b.data.size == 1:
        return
    if not _suffix_broadcastable(sa, sb):
        raise ValueError(
            f"{opname}: shapes {sa} and {sb} are not combinable; only equal, "
            f"scalar, or trailing-suffix shapes broadcast implicitly (use "
            f"expand for anything else)"
        )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce an output gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    if shape == () or int(np.prod(shape)) == 1:
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    if g.shape != shape:  # pragma: no cover - guarded by _check_pair
        raise AssertionError(f"unbroadcast produced {g.shape}, wanted {shape}")
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray):
            if data.dtype not in FLOAT_DTYPES:
                raise TypeError(f"Tensors hold float32/float64 only, got "
                                f"{data.dtype}; keep integer data in plain "
                                f"ndarrays")
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        if arr.dtype not in FLOAT_DTYPES:
            raise TypeError(f"Tensors hold float32/float64 only, got {arr.dtype}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _lift(x, like: "Tensor") -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.data.dtype))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing -------------------------------------------------------

    def _make(self, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = _grad_enabled and any(p.requires_grad or p._parents for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(f"seed gradient shape {grad.shape} does not "
                                 f"match output shape {self.data.shape}")
        # Iterative postorder DFS; recursion would overflow on deep graphs.
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other, self)
        _check_pair(self, other, "add")
        out_data = self.data + other.data

        def bwd(g, a=self, b=other):
            a._accum(_unbroadcast(g, a.data.shape))
            b._accum(_unbroadcast(g, b.data.shape))

        return self._make(out_data, (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other, self)
        _check_pair(self, other, "sub")
        out_data = self.data - other.data

        def bwd(g, a=self, b=other):
            a._accum(_unbroadcast(g, a.data.shape))
            b._accum(_unbroadcast(-g, b.data.shape))

        return self._make(out_data, (self, other), bwd)

    def __rsub__(self, other):
        return Tensor._lift(other, self).__sub__(self)

    def __mul__(self, other):
        other = Tensor._lift(other, self)
        _check_pair(self, other, "mul")
        out_data = self.data * other.data

        def bwd(g, a=self, b=other):
            a._accum(_unbroadcast(g * b.data, a.data.shape))
            b._accum(_unbroadcast(g * a.data, b.data.shape))

        return self._make(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other, self)
        _check_pair(self, other, "div")
        out_data = self.data / other.data

        def bwd(g, a=self, b=other):
            a._accum(_unbroadcast(g / b.data, a.data.shape))
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return self._make(out_data, (self, other), bwd)

    def __rtruediv__(self, other):
        return Tensor._lift(other, self).__truediv__(self)

    def __neg__(self):
        out_data = -self.data

        def bwd(g, a=self):
            a._accum(-g)

        return self._make(out_data, (self,), bwd)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** p

        def bwd(g, a=self, p=p):
            a._accum(g * p * a.data ** (p - 1))

        return self._make(out_data, (self,), bwd)

    # -- elementwise functions ------------------------------------------------

    def exp(self):
        y = np.exp(self.data)

        def bwd(g, a=self, y=y):
            a._accum(g * y)

        return self._make(y, (self,), bwd)

    def log(self):
        y = np.log(self.data)

        def bwd(g, a=self):
            a._accum(g / a.data)

        return self._make(y, (self,), bwd)

    def sqrt(self):
        y = np.sqrt(self.data)

        def bwd(g, a=self, y=y):
            a._accum(g * 0.5 / y)

        return self._make(y, (self,), bwd)

    def tanh(self):
        y = np.tanh(self.data)

        def bwd(g, a=self, y=y):
            a._accum(g * (1.0 - y * y))

        return self._make(y, (self,), bwd)

    def sigmoid(self):
        x = self.data
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        y = y.astype(x.dtype)

        def bwd(g, a=self, y=y):
            a._accum(g * y * (1.0 - y))

        return self._make(y, (self,), bwd)

    def relu(self):
        y = np.maximum(self.data, 0)

        def bwd(g, a=self):
            a._accum(g * (a.data > 0))

        return self._make(y, (self,), bwd)

    def leaky_relu(self, slope: float = 0.2):
        x = self.data
        y = np.where(x > 0, x, slope * x)

        def bwd(g, a=self, slope=slope):
            a._accum(g * np.where(a.data > 0, 1.0, slope).astype(g.dtype))

        return self._make(y, (self,), bwd)

    def gelu(self):
        # tanh approximation; smooth, so finite differences agree tightly
        x = self.data
        c = math.sqrt(2.0 / math.pi)
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        y = 0.5 * x * (1.0 + t)

        def bwd(g, a=self, t=t, c=c):
            x = a.data
            dinner = c * (1.0 + 3 * 0.044715 * x * x)
            a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

        return self._make(y.astype(x.dtype), (self,), bwd)

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient passes only strictly inside (lo, hi)."""
        y = np.clip(self.data, lo, hi)

        def bwd(g, a=self, lo=lo, hi=hi):
            inside = (a.data > lo) & (a.data < hi)
            a._accum(g * inside)

        return self._make(y, (self,), bwd)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        y = self.data.reshape(shape)

        def bwd(g, a=self):
            a._accum(g.reshape(a.data.shape))

        return self._make(y, (self,), bwd)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        y = np.ascontiguousarray(self.data.transpose(axes))
        inv = np.argsort(axes)

        def bwd(g, a=self, inv=tuple(inv)):
            a._accum(g.transpose(inv))

        return self._make(y, (self,), bwd)

    def transpose2d(self):
        if self.data.ndim != 2:
            raise ValueError("transpose2d requires a 2-D tensor")
        return self.permute(1, 0)

    def expand(self, *shape):
        """Broadcast to an explicit target shape (numpy broadcast rules)."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        y = np.broadcast_to(self.data, shape)

        def bwd(g, a=self, shape=shape):
            src = a.data.shape
            extra = len(shape) - len(src)
            axes = list(range(extra))
            for i, s in enumerate(src):
                if s == 1 and shape[extra + i] != 1:
                    axes.append(extra + i)
            red = g.sum(axis=tuple(axes), keepdims=False) if axes else g
            a._accum(red.reshape(src))

        return self._make(np.ascontiguousarray(y), (self,), bwd)

    def __getitem__(self, idx):
        y = self.data[idx]
        if np.isscalar(y):
            y = np.asarray(y, dtype=self.data.dtype)

        def bwd(g, a=self, idx=idx):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accum(buf)

        return self._make(np.ascontiguousarray(y), (self,), bwd)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        y = self.data.sum(axis=axis, keepdims=keepdims)
        y = np.asarray(y, dtype=self.data.dtype)

        def bwd(g, a=self, axis=axis, keepdims=keepdims):
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.data.shape))

        return self._make(y, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[ax] for ax in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- linear algebra -------------------------------------------------------

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(np.asarray(other, dtype=self.data.dtype))
        a, b = self.data, other.data
        if b.ndim == 2:
            # (..., K) @ (K, N): the workhorse case for weight matrices
            y = a @ b

            def bwd(g, ta=self, tb=other):
                ta._accum(g @ tb.data.T)
                a2 = ta.data.reshape(-1, ta.data.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                tb._accum(a2.T @ g2)

            return self._make(y, (self, other), bwd)
        if a.ndim == b.ndim and a.ndim >= 3:
            if a.shape[:-2] != b.shape[:-2]:
                raise ValueError(f"batched matmul leading dims differ: "
                                 f"{a.shape} vs {b.shape}")
            y = a @ b

            def bwd(g, ta=self, tb=other):
                ta._accum(g @ np.swapaxes(tb.data, -1, -2))
                tb._accum(np.swapaxes(ta.data, -1, -2) @ g)

            return self._make(y, (self, other), bwd)
        raise ValueError(f"unsupported matmul shapes {a.shape} @ {b.shape}")

    # -- fused ops with hand-derived backwards --------------------------------

    def softmax(self, axis: int = -1):
        m = self.data.max(axis=axis, keepdims=True)  # constant shift
        e = np.exp(self.data - m)
        y = e / e.sum(axis=axis, keepdims=True)

        def bwd(g, a=self, y=y, axis=axis):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accum(y * (g - dot))

        return self._make(y, (self,), bwd)

    def log_softmax(self, axis: int = -1):
        m = self.data.max(axis=axis, keepdims=True)
        z = self.data - m
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        y = z - lse

        def bwd(g, a=self, y=y, axis=axis):
            a._accum(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

        return self._make(y, (self,), bwd)

    def layer_norm(self, eps: float = 1e-5):
        """Normalize over the last axis to zero mean, unit variance (no affine)."""
        x = self.data
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv

        def bwd(g, a=self, y=y, inv=inv):
            n = a.data.shape[-1]
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            a._accum(inv * (g - gm - y * gym))

        return self._make(y.astype(x.dtype), (self,), bwd)


# -- free functions ----------------------------------------------------------


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]``; gradient scatter-adds into the table."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.data.shape[0]})")
    y = table.data[idx]

    def bwd(g, t=table, idx=idx):
        buf = np.zeros_like(t.data)
        np.add.at(buf, idx, g)
        t._accum(buf)

    return table._make(np.ascontiguousarray(y), (table,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, ts=tensors, offsets=offsets, axis=axis):
        sl = [slice(None)] * g.ndim
        for t, a, b in zip(ts, offsets[:-1], offsets[1:]):
            sl[axis] = slice(int(a), int(b))
            t._accum(g[tuple(sl)])

    return tensors[0]._make(y, tuple(tensors), bwd)


def masked_nll(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
               denom: float) -> Tensor:
    """Masked negative log-likelihood: -sum_i mask_i * log p(target_i) / denom.

    logits: (..., V); targets, mask: (...) integer / {0,1}.  The backward is
    the textbook (softmax - onehot) * mask / denom.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    if targets.shape != logits.data.shape[:-1] or mask.shape != targets.shape:
        raise ValueError(f"masked_nll shape mismatch: logits {logits.data.shape}, "
                         f"targets {targets.shape}, mask {mask.shape}")
    if denom <= 0:
        raise ValueError("denom must be positive")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse  # (..., V)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    val = -(picked * mask).sum() / denom
    out_data = np.asarray(val, dtype=x.dtype)

    def bwd(g, t=logits, logp=logp, targets=targets, mask=mask, denom=denom):
        soft = np.exp(logp)
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        d = (soft - onehot) * mask[..., None] / denom
        t._accum(d * g)

    return logits._make(out_data, (logits,), bwd)


def detached_max(t: Tensor, axis=None, keepdims: bool = False) -> np.ndarray:
    return t.data.max(axis=axis, keepdims=keepdims)


def zero_grad_graph(root: Tensor) -> None:
    """Set ``grad = None`` on every tensor reachable from ``root``.

    ``backward`` accumulates, so probing two losses that share a subgraph
    (e.g. separate gradient norms for an adaptive weight) requires clearing
    the shared intermediates between passes, not just the leaf parameters.
    """
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        node.grad = None
        stack.extend(node._parents)


# -- gradient checking --------------------------------------------------------


def grad_check(f, x: Tensor, eps: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a scalar Tensor.  The relative error at coordinate i
    is |a_i - n_i| / max(|a_i|, |n_i|, 1e-8); the max over coordinates is
    returned.  Raises if the analytic gradient has non-finite entries.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    x.zero_grad()
    y = f(x)
    if y.data.size != 1:
        raise ValueError("grad_check requires f to return a scalar")
    y.backward()
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = x.grad.copy()
    if not np.all(np.isfinite(analytic)):
        bad = int(np.flatnonzero(~np.isfinite(analytic))[0])
        raise FloatingPointError(f"non-finite analytic gradient at flat "
                                 f"coordinate {bad}")
    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            y_plus = float(f(x).data)
            flat[i] = orig - eps
            y_minus = float(f(x).data)
            flat[i] = orig
            nflat[i] = (y_plus - y_minus) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
