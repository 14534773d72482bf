"""Dense n-dimensional arrays with reverse-mode automatic differentiation.

Just enough of an engine for small CNNs and input-gradient extraction:
elementwise arithmetic, matmul, 2-D convolutions (dense, depthwise, 1x1),
2x2 max-pooling, a median filter, the usual activations, reductions,
softmax and cross-entropy. Values live in numpy arrays; float32 is the
training default and float64 is used by the verification suites (dtype
follows the operands).

Gradients accumulate additively across fan-out and are zeroed explicitly
by the caller between steps. Tensors are immutable after construction
except for explicit in-place parameter updates via ``.data``.

Backward closures take the output gradient as their argument and must not
capture the tensor they belong to: tapes stay acyclic, so an unreferenced
graph (with its saved buffers) is reclaimed immediately by reference
counting instead of waiting on the cycle collector.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes do not conform for the attempted operation."""


def _as_array(value, like: np.ndarray | None = None) -> np.ndarray:
    dtype = like.dtype if like is not None and np.isscalar(value) else None
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype.kind not in "fiu":
        raise TypeError(f"tensor data must be numeric, got dtype {arr.dtype}")
    if arr.dtype.kind in "iu":
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-d array that optionally records the tape needed for backward().

    Attributes:
        data: the underlying numpy array (float32 or float64).
        requires_grad: whether gradients should flow to this tensor.
        grad: accumulated gradient array of identical shape, or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "_op",
                 "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()
        self._op: str | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], op: str) -> "Tensor":
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = parents
            out._op = op
        return out

    @staticmethod
    def _coerce(value, like: "Tensor") -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(_as_array(value, like=like.data))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- autodiff --------------------------------------------------------------

    def _accum(self, grad: np.ndarray) -> None:
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self) -> None:
        """Populate .grad on every requires_grad tensor reachable on the tape."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise RuntimeError(
                "backward() on a tensor detached from any tape "
                "(requires_grad is False)"
            )
        # Iterative post-order DFS: parents appear before their consumers.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        out = Tensor._result(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def _backward(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(g, other.data.shape))
            out._backward = _backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor._result(-self.data, (self,), "neg")
        if out.requires_grad:
            def _backward(g):
                self._accum(-g)
            out._backward = _backward
        return out

    def __sub__(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        out = Tensor._result(self.data - other.data, (self, other), "sub")
        if out.requires_grad:
            def _backward(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(-g, other.data.shape))
            out._backward = _backward
        return out

    def __rsub__(self, other) -> "Tensor":
        return Tensor._coerce(other, self) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        out = Tensor._result(self.data * other.data, (self, other), "mul")
        if out.requires_grad:
            def _backward(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(g * self.data, other.data.shape))
            out._backward = _backward
        return out

    __rmul__ = __mul__

    # -- linear algebra ----------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = Tensor._coerce(other, self)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
        out = Tensor._result(a @ b, (self, other), "matmul")
        if out.requires_grad:
            def _backward(g):
                if self.requires_grad:
                    self._accum(g @ b.T)
                if other.requires_grad:
                    other._accum(a.T @ g)
            out._backward = _backward
        return out

    __matmul__ = matmul

    # -- activations --------------------------------------------------------------

    def relu(self) -> "Tensor":
        out = Tensor._result(np.maximum(self.data, 0), (self,), "relu")
        if out.requires_grad:
            mask = self.data > 0
            def _backward(g):
                self._accum(g * mask)
            out._backward = _backward
        return out

    def softplus(self) -> "Tensor":
        out = Tensor._result(np.logaddexp(0, self.data), (self,), "softplus")
        if out.requires_grad:
            def _backward(g):
                self._accum(g * expit(self.data))
            out._backward = _backward
        return out

    def sigmoid(self) -> "Tensor":
        s = expit(self.data)
        out = Tensor._result(s, (self,), "sigmoid")
        if out.requires_grad:
            def _backward(g):
                self._accum(g * s * (1 - s))
            out._backward = _backward
        return out

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        out = Tensor._result(t, (self,), "tanh")
        if out.requires_grad:
            def _backward(g):
                self._accum(g * (1 - t * t))
            out._backward = _backward
        return out

    # -- reductions ----------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            shape, nd = self.data.shape, self.data.ndim
            def _backward(g):
                self._accum(_expand_reduced(g, shape, nd, axis, keepdims))
            out._backward = _backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor._result(self.data.mean(axis=axis, keepdims=keepdims), (self,), "mean")
        if out.requires_grad:
            shape, nd = self.data.shape, self.data.ndim
            count = self.data.size // max(out.data.size, 1)
            def _backward(g):
                self._accum(_expand_reduced(g, shape, nd, axis, keepdims) / count)
            out._backward = _backward
        return out

    # -- shape ------------------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor._result(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            orig = self.data.shape
            def _backward(g):
                self._accum(g.reshape(orig))
            out._backward = _backward
        return out

    # -- softmax family ------------------------------------------------------------------

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)
        out = Tensor._result(s, (self,), "softmax")
        if out.requires_grad:
            def _backward(g):
                self._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))
            out._backward = _backward
        return out

    def clip01(self) -> "Tensor":
        """Clip to [0,1]; the subgradient passes through the closed interval."""
        out = Tensor._result(np.clip(self.data, 0.0, 1.0), (self,), "clip01")
        if out.requires_grad:
            mask = (self.data >= 0.0) & (self.data <= 1.0)
            def _backward(g):
                self._accum(g * mask)
            out._backward = _backward
        return out


def _expand_reduced(grad, shape, ndim, axis, keepdims):
    """Broadcast a reduced-axis gradient back to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(grad, shape).copy()
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for a in sorted(a % ndim for a in axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape).copy()


# -- convolution family -------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) over a channels-first batch.

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); zero padding; integer stride.
    Implemented as im2col + GEMM; the column matrix is kept for the backward
    pass of both operands.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d: expects 4-D input and kernel, got {xd.shape}, {wd.shape}")
    B, Cin, H, W = xd.shape
    Cout, Cw, kh, kw = wd.shape
    if Cw != Cin:
        raise ShapeError(f"conv2d: input has {Cin} channels but kernel expects {Cw}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, Cin, Ho, Wo, kh, kw) -> (B, Ho*Wo, Cin*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho * Wo, Cin * kh * kw)
    wmat = wd.reshape(Cout, -1)
    y = (cols @ wmat.T).transpose(0, 2, 1).reshape(B, Cout, Ho, Wo)

    out = Tensor._result(y, (x, w), "conv2d")
    if out.requires_grad:
        def _backward(g):
            g = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
            if w.requires_grad:
                dw = g.T @ cols.reshape(B * Ho * Wo, -1)
                w._accum(dw.reshape(wd.shape))
            if x.requires_grad:
                dcols = (g @ wmat).reshape(B, Ho, Wo, Cin, kh, kw)
                dxp = np.zeros((B, Cin, Hp, Wp), dtype=g.dtype)
                # scatter-add each kernel offset back onto the padded grid
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                if padding:
                    dxp = dxp[:, :, padding:-padding, padding:-padding]
                x._accum(dxp)
        out._backward = _backward
    return out


def depthwise_conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Per-channel 2-D convolution: channel c of x is filtered by w[c] only.

    x: (B, C, H, W); w: (C, kh, kw); stride 1; zero padding.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 3:
        raise ShapeError(f"depthwise_conv2d: expects 4-D input and 3-D kernel, got {xd.shape}, {wd.shape}")
    B, C, H, W = xd.shape
    Cw, kh, kw = wd.shape
    if Cw != C:
        raise ShapeError(f"depthwise_conv2d: input has {C} channels but kernel has {Cw}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"depthwise_conv2d: kernel {kh}x{kw} exceeds padded input {Hp}x{Wp}")
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    y = np.einsum("bchwij,cij->bchw", win, wd, optimize=True)

    out = Tensor._result(y, (x, w), "depthwise_conv2d")
    if out.requires_grad:
        def _backward(g):
            if w.requires_grad:
                w._accum(np.einsum("bchwij,bchw->cij", win, g, optimize=True))
            if x.requires_grad:
                dxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + Ho, j:j + Wo] += g * wd[None, :, i, j, None, None]
                if padding:
                    dxp = dxp[:, :, padding:-padding, padding:-padding]
                x._accum(dxp)
        out._backward = _backward
    return out


def conv1x1(x: Tensor, w: Tensor) -> Tensor:
    """Pointwise channel mix: x (B, C, H, W), w (Cout, C) -> (B, Cout, H, W)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 2:
        raise ShapeError(f"conv1x1: expects 4-D input and 2-D weights, got {xd.shape}, {wd.shape}")
    if wd.shape[1] != xd.shape[1]:
        raise ShapeError(f"conv1x1: input has {xd.shape[1]} channels but weights expect {wd.shape[1]}")
    y = np.einsum("oc,bchw->bohw", wd, xd, optimize=True)
    out = Tensor._result(y, (x, w), "conv1x1")
    if out.requires_grad:
        def _backward(g):
            if w.requires_grad:
                w._accum(np.einsum("bohw,bchw->oc", g, xd, optimize=True))
            if x.requires_grad:
                x._accum(np.einsum("oc,bohw->bchw", wd, g, optimize=True))
        out._backward = _backward
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route the gradient to the first
    maximal element in row-major window order."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2x2: expects 4-D input, got {xd.shape}")
    B, C, H, W = xd.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2: spatial extents must be even, got {H}x{W}")
    Ho, Wo = H // 2, W // 2
    r = xd.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    idx = r.argmax(axis=-1)
    y = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    out = Tensor._result(y, (x,), "maxpool2x2")
    if out.requires_grad:
        def _backward(g):
            onehot = idx[..., None] == np.arange(4)
            dr = g[..., None] * onehot
            dx = dr.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
            x._accum(dx)
        out._backward = _backward
    return out


def median_filter2d(x: Tensor, kernel_size: int = 3) -> Tensor:
    """Per-channel sliding-window median with zero padding (shape preserved).

    The subgradient routes entirely to the selected element; ties break toward
    the lowest linear index within the window.
    """
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"median_filter2d: kernel_size must be odd, got {kernel_size}")
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"median_filter2d: expects 4-D input, got {xd.shape}")
    B, C, H, W = xd.shape
    k, p = kernel_size, (kernel_size - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3)).reshape(B, C, H, W, k * k)
    mid = (k * k) // 2
    med = np.partition(win, mid, axis=-1)[..., mid]
    out = Tensor._result(med.copy(), (x,), "median_filter2d")
    if out.requires_grad:
        sel = (win == med[..., None]).argmax(axis=-1)
        def _backward(g):
            dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=g.dtype)
            for t in range(k * k):
                mask = sel == t
                if mask.any():
                    i, j = divmod(t, k)
                    dxp[:, :, i:i + H, j:j + W] += g * mask
            x._accum(dxp[:, :, p:H + p, p:W + p] if p else dxp)
        out._backward = _backward
    return out


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels against raw logits (B, C).

    Fused, numerically stable primitive: forward uses log-sum-exp with max
    shifting; backward is (softmax - onehot) / B.
    """
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy_with_logits: expects 2-D logits, got {z.shape}")
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise ShapeError(
            f"cross_entropy_with_logits: labels shape {labels.shape} does not match batch {z.shape[0]}"
        )
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError("cross_entropy_with_logits: label out of range")
    B = z.shape[0]
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = (lse - z[np.arange(B), labels]).mean()
    out = Tensor._result(np.asarray(loss, dtype=z.dtype), (logits,), "cross_entropy_with_logits")
    if out.requires_grad:
        def _backward(g):
            p = np.exp(z - m)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(B), labels] -= 1.0
            logits._accum(g * p / B)
        out._backward = _backward
    return out
