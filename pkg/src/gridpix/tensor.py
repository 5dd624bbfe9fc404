"""Dense tensors with reverse-mode differentiation.

Every operation records its parents and a closure that maps the output
gradient to input gradients. ``backward`` walks the graph in reverse
topological order. Data lives in numpy arrays; float32 is the default,
float64 inputs are kept as float64 so gradient checks can run in double
precision.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "tensor",
    "make_node",
    "backward",
    "conv2d",
    "conv_transpose2d",
    "leaky_relu",
    "softmax_channels",
    "batch_norm",
    "concat",
    "pad2d",
    "block_sum",
    "block_repeat",
    "where",
    "norm",
    "conv_output_size",
    "record_activation_signs",
]

# list receiving leaky_relu sign masks while record_activation_signs() is active
_sign_log: list | None = None


@contextmanager
def record_activation_signs():
    """Collect the sign mask of every leaky_relu input evaluated inside the block.

    Two evaluations with identical masks lie on the same linear piece of
    every activation, which lets finite-difference checks tell kink
    crossings apart from gradient errors.
    """
    global _sign_log
    previous, _sign_log = _sign_log, []
    try:
        yield _sign_log
    finally:
        _sign_log = previous


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph.

    ``op`` names the operation that produced the tensor ("leaf" for inputs
    and parameters). ``grad`` is filled by :func:`backward` for tensors
    with ``requires_grad``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, dtype={self.dtype})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        backward(self)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = _lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return make_node(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return make_node(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other):
        return _lift(other, self.dtype) - self

    def __mul__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data
        return make_node(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data
        out = a / b

        def grad_fn(g):
            gb = g / b
            return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

        return make_node(out, (self, other), grad_fn, "div")

    def __rtruediv__(self, other):
        return _lift(other, self.dtype) / self

    def __neg__(self):
        return make_node(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        a = self.data
        return make_node(
            a**exponent,
            (self,),
            lambda g: (g * exponent * a ** (exponent - 1),),
            "pow",
        )

    def __getitem__(self, idx):
        shape = self.shape
        basic = _is_basic_index(idx)

        def grad_fn(g):
            full = np.zeros(shape, dtype=g.dtype)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return make_node(self.data[idx], (self,), grad_fn, "index")

    # -- elementwise functions --------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return make_node(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        return make_node(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return make_node(out, (self,), lambda g: (0.5 * g / out,), "sqrt")

    def abs(self):
        sign = np.sign(self.data)
        return make_node(np.abs(self.data), (self,), lambda g: (g * sign,), "abs")

    # -- reductions and shape ---------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return make_node(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)),
            (self,),
            grad_fn,
            "sum",
        )

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return make_node(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape"
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return make_node(
            np.transpose(self.data, axes),
            (self,),
            lambda g: (np.transpose(g, inv),),
            "transpose",
        )


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, slice)) for i in items)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def make_node(data, parents, grad_fn, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op`` applied to ``parents``.

    ``grad_fn`` receives the output gradient and returns one gradient (or
    None) per parent.
    """
    out = Tensor(np.asarray(data))
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params=None) -> list[np.ndarray] | None:
    """Propagate d(loss)/d(node) to every node that requires a gradient.

    Gradients accumulate into ``.grad`` of leaf tensors. When ``params``
    is given, parameters the loss does not reach get a zero gradient and
    the list of their gradients is returned.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return None
    out = []
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out.append(p.grad)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (C*k*k, N*Ho*Wo) patch matrix, channel-major."""
    n, c = xp.shape[:2]
    span = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    win = win[..., ::dilation, ::dilation]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, dilation: int) -> np.ndarray:
    """Scatter-add a (C, k, k, N, Ho, Wo) patch array into an (N, C, Hp, Wp) array."""
    c, _, _, n, ho, wo = cols.shape
    out = np.zeros((c, n) + tuple(shape[2:]), dtype=cols.dtype)
    for a in range(k):
        r0 = a * dilation
        for b in range(k):
            c0 = b * dilation
            out[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += cols[:, a, b]
    return out.transpose(1, 0, 2, 3)


def _channel_major(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W)."""
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


# patch matrices larger than this fall out of cache and slow the GEMMs down
_PATCH_BUDGET_BYTES = 1 << 21


def _chunks(n: int, per_sample_bytes: int):
    step = max(1, _PATCH_BUDGET_BYTES // max(per_sample_bytes, 1))
    for start in range(0, n, step):
        yield slice(start, min(start + step, n))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation of an (N, C_in, H, W) input with (C_out, C_in, k, k) weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weights")
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c:
        raise ValueError(f"dimension mismatch: weights expect {cin} input channels, input has {c}")
    if k != k2:
        raise ValueError("only square kernels are supported")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError("input too small for kernel")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wm = weight.data.reshape(cout, -1)
    per_sample = c * k * k * ho * wo * xp.itemsize
    out = np.empty((n, cout, ho, wo), dtype=np.result_type(x.dtype, weight.dtype))
    for sl in _chunks(n, per_sample):
        m = sl.stop - sl.start
        res = wm @ _im2col(xp[sl], k, stride, dilation, ho, wo)
        out[sl] = res.reshape(cout, m, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        dw = np.zeros(wm.shape, dtype=g.dtype) if weight.requires_grad else None
        dxp = np.empty(xp.shape, dtype=g.dtype) if x.requires_grad else None
        for sl in _chunks(n, per_sample):
            m = sl.stop - sl.start
            gm = _channel_major(g[sl])
            if dw is not None:
                dw += gm @ _im2col(xp[sl], k, stride, dilation, ho, wo).T
            if dxp is not None:
                dcols = (wm.T @ gm).reshape(c, k, k, m, ho, wo)
                dxp[sl] = _col2im(dcols, (m,) + xp.shape[1:], k, stride, dilation)
        dx = None
        if dxp is not None:
            dx = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w]) if padding else dxp
        dw = dw.reshape(weight.shape) if dw is not None else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, grad_fn, "conv2d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Transposed convolution: the adjoint of :func:`conv2d` w.r.t. its input.

    ``weight`` has shape (C_in, C_out, k, k). Output size is
    ``(H - 1) * stride - 2 * padding + k``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv_transpose2d expects 4-D input and weights")
    n, c, h, w = x.shape
    cin, cout, k, _ = weight.shape
    if cin != c:
        raise ValueError(f"dimension mismatch: weights expect {cin} input channels, input has {c}")
    full_h = (h - 1) * stride + k
    full_w = (w - 1) * stride + k
    ho, wo = full_h - 2 * padding, full_w - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ValueError("padding too large for transposed convolution")
    wm = weight.data.reshape(cin, -1)
    per_sample = cout * k * k * h * w * x.data.itemsize
    full = np.empty((n, cout, full_h, full_w), dtype=np.result_type(x.dtype, weight.dtype))
    for sl in _chunks(n, per_sample):
        m = sl.stop - sl.start
        cols = (wm.T @ _channel_major(x.data[sl])).reshape(cout, k, k, m, h, w)
        full[sl] = _col2im(cols, (m, cout, full_h, full_w), k, stride, 1)
    out = np.ascontiguousarray(full[:, :, padding : padding + ho, padding : padding + wo])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        dx = np.empty(x.shape, dtype=g.dtype) if x.requires_grad else None
        dw = np.zeros(wm.shape, dtype=g.dtype) if weight.requires_grad else None
        for sl in _chunks(n, per_sample):
            m = sl.stop - sl.start
            gcols = _im2col(gp[sl], k, stride, 1, h, w)
            if dx is not None:
                dx[sl] = (wm @ gcols).reshape(cin, m, h, w).transpose(1, 0, 2, 3)
            if dw is not None:
                dw += _channel_major(x.data[sl]) @ gcols.T
        dw = dw.reshape(weight.shape) if dw is not None else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, grad_fn, "conv_transpose2d")


# ---------------------------------------------------------------------------
# activations and normalization
# ---------------------------------------------------------------------------


def leaky_relu(x: Tensor, negative_slope: float = 0.1) -> Tensor:
    pos = x.data >= 0
    if _sign_log is not None:
        _sign_log.append(pos)
    slope = x.dtype.type(negative_slope)
    out = np.where(pos, x.data, x.data * slope)
    return make_node(out, (x,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def softmax_channels(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over axis 1 of an (N, C, H, W) tensor.

    ``mask`` (broadcastable to the input, truthy = allowed) zeroes the
    disallowed channels exactly and renormalizes over the rest.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return make_node(out, (x,), grad_fn, "softmax")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of an (N, C, H, W) tensor.

    In training mode the running statistics are updated in place.
    """
    shape = (1, -1, 1, 1)
    if training:
        axes = (0, 2, 3)
        count = x.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if training:
            m = x.size // x.shape[1]
            dx = (inv_std.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv_std.reshape(shape)
        return dx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), grad_fn, "batch_norm")


# ---------------------------------------------------------------------------
# structural helpers used by the superpixel operators
# ---------------------------------------------------------------------------


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the last two axes."""
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    h, w = x.shape[-2:]
    return make_node(
        np.pad(x.data, widths),
        (x,),
        lambda g: (g[..., top : top + h, left : left + w],),
        "pad2d",
    )


def block_sum(x: Tensor, cell: int) -> Tensor:
    """Sum non-overlapping ``cell`` x ``cell`` blocks of the last two axes.

    Partial blocks at the bottom/right edge are summed over the pixels they
    contain.
    """
    h, w = x.shape[-2:]
    gh, gw = -(-h // cell), -(-w // cell)
    lead = x.shape[:-2]
    data = np.pad(x.data, [(0, 0)] * len(lead) + [(0, gh * cell - h), (0, gw * cell - w)])
    out = data.reshape(*lead, gh, cell, gw, cell).sum(axis=(-3, -1))

    def grad_fn(g):
        up = np.repeat(np.repeat(g, cell, axis=-2), cell, axis=-1)
        return (np.ascontiguousarray(up[..., :h, :w]),)

    return make_node(out, (x,), grad_fn, "block_sum")


def block_repeat(x: Tensor, cell: int, out_hw: tuple[int, int]) -> Tensor:
    """Nearest-neighbour expansion of a cell grid to pixel resolution (adjoint of block_sum)."""
    h, w = out_hw
    up = np.repeat(np.repeat(x.data, cell, axis=-2), cell, axis=-1)[..., :h, :w]
    gh, gw = x.shape[-2:]
    lead = x.shape[:-2]

    def grad_fn(g):
        gp = np.pad(g, [(0, 0)] * len(lead) + [(0, gh * cell - h), (0, gw * cell - w)])
        return (gp.reshape(*lead, gh, cell, gw, cell).sum(axis=(-3, -1)),)

    return make_node(np.ascontiguousarray(up), (x,), grad_fn, "block_repeat")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a = _lift(a, None)
    b = _lift(b, None)
    out = np.where(cond, a.data, b.data)

    def grad_fn(g):
        return (
            _unbroadcast(np.where(cond, g, 0), a.shape),
            _unbroadcast(np.where(cond, 0, g), b.shape),
        )

    return make_node(out, (a, b), grad_fn, "where")


def norm(x: Tensor, axis: int) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the zero vector is taken as zero."""
    n = np.sqrt((x.data * x.data).sum(axis=axis))

    def grad_fn(g):
        safe = np.where(n > 0, n, 1)
        scale = np.where(n > 0, g / safe, 0)
        return (np.expand_dims(scale, axis) * x.data,)

    return make_node(n, (x,), grad_fn, "norm")
