"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` wraps a float32 or float64 ndarray and records the
operations applied to it.  Calling ``backward()`` on a scalar result walks
the graph in reverse topological order and accumulates gradients into every
tensor created with ``requires_grad=True``.

Image tensors use a batch-first, channels-last layout ``(N, H, W, C)``;
convolution kernels use ``(kh, kw, C_in, C_out)``.  Channels-last keeps the
im2col buffers contiguous so the matmuls underneath run at BLAS speed.
float32 is the working precision for training and inference; float64 is
supported so gradients can be checked against central finite differences.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends graph recording.

    Inside the block every op result has ``requires_grad=False``, keeps no
    parent references and attaches no backward closure, so intermediate
    activations are freed as soon as the forward pass moves past them.
    Use it for inference; calling ``backward()`` on a result raises because
    nothing was recorded.
    """

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A node in the autodiff graph.

    ``data`` holds the value, ``grad`` the accumulated gradient (allocated
    lazily, same shape and dtype as ``data``).  Non-leaf tensors keep
    references to their parents and a closure that pushes the output
    gradient back to them.  Tensors that do not require grad drop both:
    they can never be visited by ``backward()``, and holding the references
    would only pin the upstream activations in memory.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if _parents and not _GRAD_ENABLED:
            requires_grad = False
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents if requires_grad else ()
        self._backward = None
        self.op = op

    def _record(self, fn):
        """Attach the backward closure, unless this node is grad-free."""
        if self.requires_grad:
            self._backward = fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        """Add ``g`` into this tensor's gradient buffer."""
        if self.grad is None:
            # own a fresh buffer; g may alias an upstream array
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar output through the recorded graph.

        Every reachable node is visited exactly once, in reverse
        topological order.  Subgraphs that cannot influence any
        ``requires_grad`` leaf are skipped entirely.

        The graph is consumed by the call: each non-leaf node drops its
        parents, closure, and gradient buffer as soon as they have been
        pushed downstream.  Leaf gradients survive (that is the result);
        everything else is freed immediately instead of waiting for the
        cycle collector, because each closure captures its own output
        tensor and the resulting reference cycles would otherwise pin
        whole forward graphs in memory.  One backward per graph.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, children_done = stack.pop()
            if children_done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                node._backward = None
            if node._parents:
                node._parents = ()
                if node is not self:
                    node.grad = None

    # elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        _check_pair(self, other, "add")
        out = Tensor(
            self.data + other.data,
            requires_grad=self.requires_grad or other.requires_grad,
            _parents=(self, other),
            op="add",
        )

        def _bwd():
            if self.requires_grad:
                self.accumulate(out.grad)
            if other.requires_grad:
                other.accumulate(out.grad)

        out._record(_bwd)
        return out

    def __mul__(self, other):
        _check_pair(self, other, "mul")
        out = Tensor(
            self.data * other.data,
            requires_grad=self.requires_grad or other.requires_grad,
            _parents=(self, other),
            op="mul",
        )

        def _bwd():
            if self.requires_grad:
                self.accumulate(out.grad * other.data)
            if other.requires_grad:
                other.accumulate(out.grad * self.data)

        out._record(_bwd)
        return out


def _check_pair(a, b, opname):
    if not isinstance(b, Tensor):
        raise ShapeError(f"{opname}: expected a Tensor operand, got {type(b).__name__}")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shape {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{opname}: dtype {a.data.dtype} vs {b.data.dtype}")


def _check_image(x, opname):
    if x.data.ndim != 4:
        raise ShapeError(f"{opname}: expected (N, H, W, C) input, got shape {x.data.shape}")


# activations ----------------------------------------------------------------


def relu(x):
    out = Tensor(np.maximum(x.data, 0), x.requires_grad, (x,), "relu")

    def _bwd():
        if x.requires_grad:
            x.accumulate(out.grad * (x.data > 0))

    out._record(_bwd)
    return out


def sigmoid(x):
    # expit is the overflow-safe logistic evaluated in a single ufunc pass
    y = expit(x.data)
    out = Tensor(y.astype(x.data.dtype, copy=False), x.requires_grad, (x,), "sigmoid")

    def _bwd():
        if x.requires_grad:
            x.accumulate(out.grad * out.data * (1.0 - out.data))

    out._record(_bwd)
    return out


# convolution family ---------------------------------------------------------


def _im2col(xpad, out_h, out_w, kh, kw):
    """Gather kh*kw windows of a padded (N, Hp, Wp, C) array.

    Returns a contiguous (N*out_h*out_w, kh*kw*C) matrix.
    """
    n, _, _, c = xpad.shape
    s = xpad.strides
    win = np.lib.stride_tricks.as_strided(
        xpad,
        (n, out_h, out_w, kh, kw, c),
        (s[0], s[1], s[2], s[1], s[2], s[3]),
        writeable=False,
    )
    return np.ascontiguousarray(win).reshape(n * out_h * out_w, kh * kw * c)


def conv2d(x, w, b=None, padding="same"):
    """Same-padding 2D convolution (cross-correlation) with odd kernels.

    x: (N, H, W, C_in), w: (kh, kw, C_in, C_out), b: (C_out,) or None.
    Out-of-bounds taps read zeros.  Returns (N, H, W, C_out).
    """
    _check_image(x, "conv2d")
    if padding != "same":
        raise ShapeError(f"conv2d: only 'same' padding is supported, got {padding!r}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (kh, kw, C_in, C_out), got {w.data.shape}")
    kh, kw, cin, cout = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    n, h, wd, c = x.data.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {cin}")
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({cout},)")
    if x.data.dtype != w.data.dtype:
        raise ShapeError(f"conv2d: dtype {x.data.dtype} vs kernel {w.data.dtype}")

    ph, pw = kh // 2, kw // 2
    wmat = w.data.reshape(kh * kw * cin, cout)
    if kh == 1 and kw == 1:
        cols = x.data.reshape(n * h * wd, cin)
    else:
        xpad = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        cols = _im2col(xpad, h, wd, kh, kw)
    y = cols @ wmat
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)
    rg = any(p.requires_grad for p in parents)
    out = Tensor(y.reshape(n, h, wd, cout), rg, parents, "conv2d")

    def _bwd():
        gmat = out.grad.reshape(n * h * wd, cout)
        if w.requires_grad:
            if kh == 1 and kw == 1:
                cols_b = x.data.reshape(n * h * wd, cin)
            else:
                xpad_b = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
                cols_b = _im2col(xpad_b, h, wd, kh, kw)
            w.accumulate((cols_b.T @ gmat).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b.accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            # input grad is the same-padding convolution of the output grad
            # with the spatially flipped kernel, channel axes swapped
            wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2)
            wflip_mat = np.ascontiguousarray(wflip).reshape(kh * kw * cout, cin)
            if kh == 1 and kw == 1:
                gx = gmat @ wflip_mat
            else:
                gpad = np.pad(out.grad, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
                gx = _im2col(gpad, h, wd, kh, kw) @ wflip_mat
            x.accumulate(gx.reshape(x.data.shape))

    out._record(_bwd)
    return out


def maxpool2(x):
    """2x2 max pooling with stride 2; H and W must be even.

    The gradient routes to the argmax position of each window (first
    position wins ties).
    """
    _check_image(x, "maxpool2")
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: H and W must be even, got {h}x{w}")
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    flat = win.reshape(n, h // 2, w // 2, c, 4)
    idx = flat.argmax(axis=-1)
    out = Tensor(
        np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0],
        x.requires_grad,
        (x,),
        "maxpool2",
    )

    def _bwd():
        if not x.requires_grad:
            return
        gwin = np.zeros((n, h // 2, w // 2, c, 4), x.data.dtype)
        np.put_along_axis(gwin, idx[..., None], out.grad[..., None], axis=-1)
        gx = (
            gwin.reshape(n, h // 2, w // 2, c, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, h, w, c)
        )
        x.accumulate(gx)

    out._record(_bwd)
    return out


def deconv2(x, w, b=None):
    """Stride-2 transposed convolution with a 2x2 kernel; doubles H and W.

    x: (N, H, W, C_in), w: (2, 2, C_in, C_out), b: (C_out,) or None.
    Output pixel (2i+di, 2j+dj) receives x[i, j] weighted by w[di, dj].
    """
    _check_image(x, "deconv2")
    if w.data.ndim != 4 or w.data.shape[:2] != (2, 2):
        raise ShapeError(f"deconv2: kernel must be (2, 2, C_in, C_out), got {w.data.shape}")
    n, h, wd, c = x.data.shape
    _, _, cin, cout = w.data.shape
    if c != cin:
        raise ShapeError(f"deconv2: input has {c} channels but kernel expects {cin}")
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"deconv2: bias shape {b.data.shape} != ({cout},)")

    wmat = w.data.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    y = (x.data.reshape(n * h * wd, cin) @ wmat).reshape(n, h, wd, 2, 2, cout)
    y = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * wd, cout)
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    rg = any(p.requires_grad for p in parents)
    out = Tensor(y, rg, parents, "deconv2")

    def _bwd():
        gwin = (
            out.grad.reshape(n, h, 2, wd, 2, cout)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n * h * wd, 4 * cout)
        )
        if w.requires_grad:
            gw = x.data.reshape(n * h * wd, cin).T @ gwin
            w.accumulate(gw.reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3))
        if b is not None and b.requires_grad:
            b.accumulate(out.grad.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            x.accumulate((gwin @ wmat.T).reshape(x.data.shape))

    out._record(_bwd)
    return out


# shape plumbing -------------------------------------------------------------


def concat_channels(a, b):
    """Concatenate two (N, H, W, C) tensors along the channel axis."""
    _check_image(a, "concat_channels")
    _check_image(b, "concat_channels")
    if a.data.shape[:3] != b.data.shape[:3]:
        raise ShapeError(
            f"concat_channels: spatial shapes differ, {a.data.shape} vs {b.data.shape}"
        )
    ca = a.data.shape[3]
    out = Tensor(
        np.concatenate([a.data, b.data], axis=3),
        a.requires_grad or b.requires_grad,
        (a, b),
        "concat",
    )

    def _bwd():
        if a.requires_grad:
            a.accumulate(out.grad[..., :ca])
        if b.requires_grad:
            b.accumulate(out.grad[..., ca:])

    out._record(_bwd)
    return out


def concat_last(a, b):
    """Concatenate two same-rank tensors along their last axis.

    Unlike ``concat_channels`` this accepts any rank, so it also pairs up
    convolution kernels (along output channels) and bias vectors.
    """
    if a.data.ndim != b.data.ndim or a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(
            f"concat_last: incompatible shapes {a.data.shape} vs {b.data.shape}"
        )
    ca = a.data.shape[-1]
    out = Tensor(
        np.concatenate([a.data, b.data], axis=-1),
        a.requires_grad or b.requires_grad,
        (a, b),
        "concat_last",
    )

    def _bwd():
        if a.requires_grad:
            a.accumulate(out.grad[..., :ca])
        if b.requires_grad:
            b.accumulate(out.grad[..., ca:])

    out._record(_bwd)
    return out


def channels(x, lo, hi):
    """Slice a contiguous range along the last (channel) axis."""
    out = Tensor(x.data[..., lo:hi], x.requires_grad, (x,), "channels")

    def _bwd():
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[..., lo:hi] += out.grad

    out._record(_bwd)
    return out


def rows(x, start, stop):
    """Slice a contiguous range along the batch axis."""
    out = Tensor(x.data[start:stop], x.requires_grad, (x,), "rows")

    def _bwd():
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop] += out.grad

    out._record(_bwd)
    return out


def stack_rows(parts):
    """Concatenate tensors along the batch axis (inverse of ``rows``)."""
    parts = tuple(parts)
    out = Tensor(
        np.concatenate([p.data for p in parts], axis=0),
        any(p.requires_grad for p in parts),
        parts,
        "stack_rows",
    )
    sizes = [p.data.shape[0] for p in parts]

    def _bwd():
        at = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                p.accumulate(out.grad[at : at + size])
            at += size

    out._record(_bwd)
    return out


# reductions and losses ------------------------------------------------------


def tensor_sum(x):
    """Sum all elements to a scalar."""
    out = Tensor(
        np.asarray(x.data.sum(), dtype=x.data.dtype), x.requires_grad, (x,), "sum"
    )

    def _bwd():
        if x.requires_grad:
            x.accumulate(np.broadcast_to(out.grad, x.data.shape))

    out._record(_bwd)
    return out


BCE_EPS = 1e-7


def bce_mean(pred, target):
    """Pixel-mean binary cross entropy.

    ``pred`` holds probabilities; they are clamped to
    [BCE_EPS, 1 - BCE_EPS] before the logs so the loss stays finite even at
    saturation.  ``target`` is an ndarray whose values must be exactly 0 or
    1.  The gradient passes straight through the clamp, so confidently wrong
    saturated predictions keep a strong (but bounded) learning signal.
    """
    t = np.asarray(target)
    if t.shape != pred.data.shape:
        raise ShapeError(f"bce_mean: target shape {t.shape} != pred shape {pred.data.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ShapeError("bce_mean: target values must be exactly 0 or 1")
    t = t.astype(pred.data.dtype, copy=False)
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    val = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p), dtype=np.float64)
    out = Tensor(
        np.asarray(val, dtype=pred.data.dtype), pred.requires_grad, (pred,), "bce"
    )

    def _bwd():
        if pred.requires_grad:
            g = (p - t) / (p * (1.0 - p)) / p.size
            pred.accumulate(g * out.grad)

    out._record(_bwd)
    return out
