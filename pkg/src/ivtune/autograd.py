"""Dense tensors with reverse-mode differentiation.

Every primitive builds its output through :func:`_node`, which stores the
parents and a closure mapping the output gradient to one gradient per parent.
Tensors that do not depend on anything requiring a gradient keep no graph.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_FLOAT_TYPES = (np.float32, np.float64)
_local = threading.local()


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.type not in _FLOAT_TYPES:
        arr = arr.astype(np.float64)
    return arr


def _check_finite(arr, op):
    # a finite sum implies finite elements; only an overflowing sum needs the full scan
    if np.isfinite(np.sum(arr)) or np.isfinite(arr).all():
        return
    raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    """An n-dimensional float array that can take part in a gradient graph."""

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Parameter(Tensor):
    """A named tensor; ``trainable`` decides whether it receives gradients."""

    def __init__(self, data, trainable=True, name="", dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)

    def __repr__(self):
        flag = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {flag})"


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


# ops whose finite inputs can still yield non-finite outputs; other ops pass
# any overflow on to one of these (or to the loss)
_CHECKED_OPS = frozenset({"exp", "softmax", "layer_norm", "batch_norm", "cross_entropy"})


def _node(data, parents, backward, op):
    if op in _CHECKED_OPS:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise & structural primitives ---------------------------------

def add(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def matmul(a, b):
    """Batched matrix product over the last two axes, with broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """Token-wise affine map ``x @ weight.T + bias`` over the last axis."""
    cin = weight.shape[1]
    if x.shape[-1] != cin:
        raise ValueError(f"linear expects last axis {cin}, got {x.shape}")
    cout = weight.shape[0]
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    out = x2 @ weight.data.T
    if bias is not None:
        if bias.shape != (cout,):
            raise ValueError("bias shape does not match weight")
        out = out + bias.data
    out = out.reshape(lead + (cout,))

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "linear")


def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx):
    out = np.array(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(out, (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(out, tensors, backward, "concat")


# -- activations ---------------------------------------------------------

def _relu_probe():
    return getattr(_local, "relu_probe", None)


def relu(a):
    probe = _relu_probe()
    if probe is not None:
        probe.append(a.data.copy())
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU, tanh form: ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), backward, "gelu")


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (a,), backward, "softmax")


# -- normalisation & convolution ----------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise each vector along the last axis, then apply ``gamma``/``beta``."""
    C = x.shape[-1]
    if C < 1:
        raise ValueError("layer_norm needs a non-empty last axis")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"layer_norm affine shape {gamma.shape}/{beta.shape} != ({C},)")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        if not x.requires_grad:
            gx = None
            lead = tuple(range(g.ndim - 1))
            return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _node(out, (x, gamma, beta), backward, "layer_norm")


def depthwise_conv3x3(x, kernel, bias):
    """Per-channel 3x3 cross-correlation with zero padding 1 (same-size output)."""
    if x.ndim != 4:
        raise ValueError("depthwise_conv3x3 expects [B, C, H, W]")
    C = x.shape[1]
    if kernel.shape != (C, 3, 3) or bias.shape != (C,):
        raise ValueError(f"kernel {kernel.shape} / bias {bias.shape} do not match {C} channels")
    out = kernels.dwconv3x3_forward(x.data, kernel.data, bias.data)

    def backward(g):
        return kernels.dwconv3x3_backward(x.data, kernel.data, g)

    return _node(out, (x, kernel, bias), backward, "depthwise_conv3x3")


def pointwise_conv1x1(x, weight, bias):
    """Per-pixel channel mixing; identical arithmetic to :func:`linear` on tokens."""
    if x.ndim != 4:
        raise ValueError("pointwise_conv1x1 expects [B, C, H, W]")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"weight {weight.shape} does not match {x.shape[1]} input channels")
    tokens = transpose(x, (0, 2, 3, 1))
    return transpose(linear(tokens, weight, bias), (0, 3, 1, 2))


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm site."""

    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1

    @classmethod
    def initialized(cls, channels, dtype=np.float64, momentum=0.1):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batch_norm(x, gamma, beta, state, training, eps=1e-5):
    """Batch norm over (B, H, W) per channel.

    In training mode the batch statistics are used and the running statistics
    in ``state`` are updated (unbiased variance, PyTorch convention). In eval
    mode the running statistics are used.
    """
    if x.ndim != 4:
        raise ValueError("batch_norm expects [B, C, H, W]")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError("batch_norm affine parameters do not match channel count")
    shape = (1, C, 1, 1)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ValueError(f"batch_norm in train mode needs >= 2 values per channel, got {n}")
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd.reshape(shape)
        m = state.momentum
        if state.running_mean is None:
            state.running_mean = np.zeros(C, dtype=x.dtype)
            state.running_var = np.ones(C, dtype=x.dtype)
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * (n / (n - 1))
        out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

        def backward(g):
            gx_hat = g * gamma.data.reshape(shape)
            mean_g = gx_hat.mean(axis=(0, 2, 3), keepdims=True)
            mean_gx = (gx_hat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = rstd.reshape(shape) * (gx_hat - mean_g - xhat * mean_gx)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _node(out, (x, gamma, beta), backward, "batch_norm")

    if state.running_mean is None or state.running_var is None:
        raise ValueError("batch_norm in eval mode before running statistics exist")
    rstd = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (x.data - state.running_mean.reshape(shape)) * rstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gx = g * (gamma.data * rstd).reshape(shape)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _node(out, (x, gamma, beta), backward, "batch_norm")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy over every position of ``logits[..., K]``."""
    labels = np.asarray(labels)
    K = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} != logits leading shape {logits.shape[:-1]}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    lab = labels.reshape(-1).astype(np.int64)
    z = logits.data.reshape(-1, K)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    n = z.shape[0]
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, lab]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, lab] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return _node(loss, (logits,), backward, "cross_entropy")


# -- reverse pass ----------------------------------------------------------

class GradTape:
    """Graph nodes reachable from a root, in topological order (root last)."""

    def __init__(self, root):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root):
        order, seen = [], set()
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

    def replay(self, seed=None):
        """Propagate ``seed`` (default 1) backward; return {id(tensor): grad}."""
        grads = {id(self.root): np.ones_like(self.root.data) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # non-finite values propagate (nan * 0 is nan), so checking the
        # accumulated gradients catches any produced during the replay
        for node in self.nodes:
            g = grads.get(id(node)) if not node._parents else None
            if g is not None:
                _check_finite(g, f"backward replay at {node._op}")
        return grads


def _check_loss(loss):
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    _check_finite(loss.data, "loss")


def backward(loss):
    """Gradients of a scalar loss for every reachable trainable :class:`Parameter`.

    Returns ``{parameter name: gradient}``; frozen or unreachable parameters
    are absent.
    """
    _check_loss(loss)
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any trainable parameter")
    tape = GradTape(loss)
    grads = tape.replay()
    out = {}
    for node in tape.nodes:
        if isinstance(node, Parameter) and node.trainable and id(node) in grads:
            if node.name in out:
                raise ValueError(f"duplicate parameter name {node.name!r} in graph")
            out[node.name] = grads[id(node)]
    return out


def grad(loss, inputs):
    """Gradients of a scalar loss w.r.t. ``inputs``; ``None`` where unreachable."""
    _check_loss(loss)
    if not loss.requires_grad:
        return [None for _ in inputs]
    grads = GradTape(loss).replay()
    return [grads.get(id(t)) for t in inputs]


# -- finite-difference verification ----------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    excluded: list = field(default_factory=list)
    checked: int = 0

    def __float__(self):
        return float(self.max_rel_error)


def _probe_eval(f):
    _local.relu_probe = []
    try:
        value = f()
        probes = _local.relu_probe
    finally:
        _local.relu_probe = None
    return float(np.asarray(value.data).reshape(())), probes


def _kink_between(base, plus, minus):
    # a relu input changing sign between x-h, x, x+h means the stencil straddles a kink
    for b, p, m in zip(base, plus, minus):
        if not (np.array_equal(b > 0, p > 0) and np.array_equal(b > 0, m > 0)):
            return True
    return False


def _rel_err(analytic, numeric, floor=0.0):
    # slopes below the round-off floor cannot be resolved relatively; judge
    # them by absolute agreement within the floor instead
    if abs(analytic) <= floor and abs(analytic - numeric) <= floor:
        return 0.0
    return abs(analytic - numeric) / (abs(analytic) + 1e-12)


def _roundoff_floor(value, h):
    # central differences cannot resolve slopes below ~eps*|f|/h
    return 1e3 * np.finfo(np.float64).eps * max(1.0, abs(value)) / h


def _sweep(evaluate, data, analytic, h, excluded_offset=0):
    base_value, base_probe = _probe_eval(evaluate)
    floor = _roundoff_floor(base_value, h)
    worst, excluded, checked = 0.0, [], 0
    flat = data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp, pp = _probe_eval(evaluate)
        flat[i] = orig - h
        fm, pm = _probe_eval(evaluate)
        flat[i] = orig
        if _kink_between(base_probe, pp, pm):
            excluded.append(excluded_offset + i)
            continue
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, _rel_err(float(analytic.reshape(-1)[i]), numeric, floor))
        checked += 1
    return worst, excluded, checked


def finite_diff_check(f, point, h=1e-5):
    """Compare reverse-mode gradients of scalar ``f`` at ``point`` with central differences.

    Coordinates where a relu input crosses (or sits within ``2h`` of) zero are
    reported in ``excluded`` instead of being compared. A coordinate whose
    analytic slope is below the round-off floor ``1e3 * eps * max(1, |f|) / h``
    is compared absolutely: it agrees when ``|analytic - numeric|`` is within
    that floor.
    """
    data = np.array(point.data if isinstance(point, Tensor) else point, dtype=None)
    if data.dtype != np.float64:
        raise ValueError("finite_diff_check requires a float64 point")
    x = Tensor(data, requires_grad=True)
    out = f(x)
    _check_loss(out)
    (g,) = grad(out, [x])
    if g is None:
        g = np.zeros_like(data)
    worst, excluded, checked = _sweep(lambda: f(x), x.data, g, h)
    return GradCheckResult(worst, excluded, checked)


def check_parameter_grads(loss_fn, params, h=1e-5):
    """Finite-difference check of :func:`backward` for each trainable parameter.

    ``loss_fn`` is called with no arguments and must read the parameters'
    current values. Returns ``{name: GradCheckResult}``.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("check_parameter_grads requires float64 parameters")
    analytic = backward(loss_fn())
    results = {}
    for p in params:
        if not p.trainable:
            continue
        g = analytic.get(p.name, np.zeros_like(p.data))
        worst, excluded, checked = _sweep(loss_fn, p.data, g, h)
        results[p.name] = GradCheckResult(worst, excluded, checked)
    return results
