"""Minimal reverse-mode autodiff on 64-bit numpy arrays.

Only the operations the detection network needs are implemented. Gradients
are checked against central finite differences in the test suite; every new
op added here should get the same treatment.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A node in the recorded computation graph.

    data is always a float64 ndarray. grad is allocated lazily by backward()
    and has the same shape as data.
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- graph machinery ----

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if not self.requires_grad:
            raise ValueError("backward() on a detached tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # ---- elementwise arithmetic ----

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            self._accum(-g)

        return Tensor(-self.data, _parents=(self,), _backward=bw)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division not supported; multiply by reciprocal")
        return self * (1.0 / float(other))

    def __pow__(self, p):
        p = float(p)

        def bw(g):
            self._accum(g * p * self.data ** (p - 1.0))

        return Tensor(self.data ** p, _parents=(self,), _backward=bw)

    # ---- shape ops ----

    def reshape(self, *shape):
        old_shape = self.data.shape

        def bw(g):
            self._accum(g.reshape(old_shape))

        return Tensor(self.data.reshape(*shape), _parents=(self,), _backward=bw)

    def transpose(self, *axes):
        axes = axes or None
        inv = np.argsort(axes) if axes else None

        def bw(g):
            self._accum(g.transpose(inv) if inv is not None else g.transpose())

        return Tensor(self.data.transpose(axes), _parents=(self,), _backward=bw)

    # ---- reductions ----

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accum(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor(out_data, _parents=(self,), _backward=bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n

    # ---- nonlinearities ----

    def relu(self):
        mask = self.data > 0

        def bw(g):
            self._accum(g * mask)

        return Tensor(self.data * mask, _parents=(self,), _backward=bw)

    def sigmoid(self):
        out_data = _sigmoid(self.data)

        def bw(g):
            self._accum(g * out_data * (1.0 - out_data))

        return Tensor(out_data, _parents=(self,), _backward=bw)

    # ---- linear algebra ----

    def matmul(self, other):
        other = _as_tensor(other)
        out_data = self.data @ other.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g @ np.swapaxes(other.data, -1, -2),
                                         self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g,
                                          other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bw)

    __matmul__ = matmul

    # ---- gather / scatter ----

    def take_rows(self, idx):
        """Select rows along axis 0 by integer index array."""
        idx = np.asarray(idx, dtype=np.intp)
        out_data = self.data[idx]

        def bw(g):
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            np.add.at(self.grad, idx, g)

        return Tensor(out_data, _parents=(self,), _backward=bw)

    def scatter_rows(self, idx, n_rows):
        """Scatter-add rows of self into a zero tensor of n_rows rows."""
        idx = np.asarray(idx, dtype=np.intp)
        out_data = np.zeros((n_rows,) + self.data.shape[1:], dtype=np.float64)
        np.add.at(out_data, idx, self.data)

        def bw(g):
            self._accum(g[idx])

        return Tensor(out_data, _parents=(self,), _backward=bw)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce gradient g back to the original (broadcast-source) shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return Tensor(out_data, _parents=tuple(tensors), _backward=bw)


def masked_max(x: Tensor, mask: np.ndarray, axis: int):
    """Max over `axis` considering only slots where mask is truthy.

    Gradient routes to the first maximal unmasked element along the axis.
    Every slice must contain at least one unmasked slot.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_max: some slice has no valid elements")
    neg = np.where(np.expand_dims(mask, -1) if mask.ndim < x.data.ndim else mask,
                   x.data, -np.inf)
    arg = neg.argmax(axis=axis)
    out_data = np.take_along_axis(neg, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        x._accum(gx)

    return Tensor(out_data, _parents=(x,), _backward=bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross entropy on pre-sigmoid scores.

    Stable form: max(z, 0) - z*t + log(1 + exp(-|z|)).
    """
    t = np.asarray(targets, dtype=np.float64)
    z = logits.data
    out_data = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def bw(g):
        logits._accum(g * (_sigmoid(z) - t))

    return Tensor(out_data, _parents=(logits,), _backward=bw)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Elementwise smooth L1: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise."""
    t = np.asarray(target, dtype=np.float64)
    d = pred.data - t
    absd = np.abs(d)
    quad = absd < 1.0
    out_data = np.where(quad, 0.5 * d * d, absd - 0.5)

    def bw(g):
        pred._accum(g * np.where(quad, d, np.sign(d)))

    return Tensor(out_data, _parents=(pred,), _backward=bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation. x: [H, W, Cin], kernel: [k, k, Cin, Cout]."""
    H, W, cin = x.data.shape
    k, k2, cin_k, cout = kernel.data.shape
    if k != k2 or cin != cin_k:
        raise ValueError(f"conv2d shape mismatch: x {x.data.shape}, kernel {kernel.data.shape}")
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    Hp, Wp, _ = xp.shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    # im2col: [Ho, Wo, k, k, Cin]
    s0, s1, s2 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(Ho, Wo, k, k, cin),
        strides=(s0 * stride, s1 * stride, s0, s1, s2), writeable=False)
    cols2 = cols.reshape(Ho * Wo, k * k * cin)
    w2 = kernel.data.reshape(k * k * cin, cout)
    out_data = (cols2 @ w2).reshape(Ho, Wo, cout)
    if bias is not None:
        out_data = out_data + bias.data

    def bw(g):
        g2 = g.reshape(Ho * Wo, cout)
        if kernel.requires_grad:
            kernel._accum((cols2.T @ g2).reshape(kernel.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 1)))
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(Ho, Wo, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[i:i + Ho * stride:stride, j:j + Wo * stride:stride] += gcols[:, :, i, j]
            if padding:
                gxp = gxp[padding:-padding, padding:-padding]
            x._accum(gxp)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor(out_data, _parents=parents, _backward=bw)


class ParamStore:
    """Named parameter tensors with deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def items(self):
        return iter(sorted(self._params.items()))

    def names(self):
        return sorted(self._params)

    def zero_grad(self):
        for _, p in self.items():
            p.zero_grad()

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.items()}

    def load_state_dict(self, state):
        for k, v in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            if self._params[k].data.shape != v.shape:
                raise ValueError(f"shape mismatch for {k!r}")
            self._params[k].data = np.asarray(v, dtype=np.float64).copy()
