"""Dense float64 tensors with reverse-mode automatic differentiation.

Small, CPU-only, deliberately minimal: just the operations the networks in
this project need (dense layers, 1D valid convolution, max pooling, a few
activations, MSE/BCE losses). Every differentiable op is validated against
central finite differences in the test suite via `grad_check`.

Conventions:
  - all data is float64, row-major, immutable once created (except `grad`)
  - gradients accumulate on leaf tensors until explicitly zeroed
  - any op producing NaN/Inf raises immediately instead of propagating
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


class KernelLargerThanInput(ValueError):
    pass


class WindowLargerThanInput(ValueError):
    pass


class ProbabilityOutOfRange(ValueError):
    pass


class NotScalar(ValueError):
    pass


class NoRecordedGraph(RuntimeError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class NondeterministicFunction(RuntimeError):
    pass


SIGMOID_CLAMP = 1e-7  # keeps log(d) and log(1-d) finite


class Tensor:
    """A dense float64 array plus an optional recorded backward rule.

    `_parents` / `_backward` are only attached when at least one input
    requires a gradient, so constant subgraphs are never recorded.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("tensor contains NaN or Inf")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A copy that shares no recorded history (stops gradient flow)."""
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar (scalars are plain python floats) --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents, backward_fn):
    """Build an op output, recording the graph only if a parent needs it."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(a, b):
    """a + b. Supports equal shapes, python scalars, and bias broadcast
    (b of shape [O] added to every row of a[..., O])."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    if a.data.shape == b.data.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        axes = tuple(range(a.data.ndim - 1))
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise ShapeMismatch(f"add: {a.data.shape} vs {b.data.shape}")


def mul(a, b):
    """Elementwise product; b may be a python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"mul: {a.data.shape} vs {b.data.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: {a.data.shape} @ {b.data.shape}")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def dense_forward(inputs, weight, bias):
    """Fully-connected layer: inputs[N,I] @ weight[I,O] + bias[O]."""
    if inputs.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeMismatch(
            f"dense: input {inputs.data.shape}, weight {weight.data.shape}, "
            f"bias {bias.data.shape}"
        )
    if inputs.data.shape[1] != weight.data.shape[0] or weight.data.shape[1] != bias.data.shape[0]:
        raise ShapeMismatch(
            f"dense: input {inputs.data.shape}, weight {weight.data.shape}, "
            f"bias {bias.data.shape}"
        )
    return add(matmul(inputs, weight), bias)


def reshape(t, shape):
    shape = tuple(shape)
    old = t.data.shape
    return _result(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def concat(tensors, axis=1):
    """Concatenate along `axis`; all other dims must agree."""
    datas = [t.data for t in tensors]
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate(datas, axis=axis), tuple(tensors), bw)


def tsum(t, axis=None):
    if axis is None:
        n = t.data.shape
        return _result(t.data.sum(), (t,), lambda g: (np.broadcast_to(g, n).copy(),))
    ax = axis if axis >= 0 else t.data.ndim + axis

    def bw(g):
        return (np.repeat(np.expand_dims(g, ax), t.data.shape[ax], axis=ax),)

    return _result(t.data.sum(axis=ax), (t,), bw)


def tmean(t, axis=None):
    if axis is None:
        return mul(tsum(t), 1.0 / t.data.size)
    ax = axis if axis >= 0 else t.data.ndim + axis
    return mul(tsum(t, axis=ax), 1.0 / t.data.shape[ax])


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def conv1d_forward(inputs, kernels, bias, stride=1):
    """Valid (no padding) 1D cross-correlation.

    inputs [N,C,L], kernels [K,C,S], bias [K] -> [N,K,L'] with
    L' = (L - S)//stride + 1.
    """
    if inputs.data.ndim != 3 or kernels.data.ndim != 3 or bias.data.ndim != 1:
        raise ShapeMismatch(
            f"conv1d: input {inputs.data.shape}, kernels {kernels.data.shape}, "
            f"bias {bias.data.shape}"
        )
    n, c, length = inputs.data.shape
    k, kc, s = kernels.data.shape
    if kc != c or bias.data.shape[0] != k:
        raise ShapeMismatch(f"conv1d: {c} input channels vs kernels {kernels.data.shape}")
    if s > length:
        raise KernelLargerThanInput(f"kernel size {s} > input length {length}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    windows = sliding_window_view(inputs.data, s, axis=2)[:, :, ::stride, :]  # [N,C,L',S]
    out = np.einsum("ncls,kcs->nkl", windows, kernels.data, optimize=True)
    out += bias.data[None, :, None]
    l_out = out.shape[2]

    def bw(g):
        dk = np.einsum("ncls,nkl->kcs", windows, g, optimize=True)
        db = g.sum(axis=(0, 2))
        contrib = np.einsum("nkl,kcs->ncls", g, kernels.data, optimize=True)
        dx = np.zeros_like(inputs.data)
        # scatter-add each kernel tap; for fixed s the target positions are
        # disjoint, so plain slice-add is safe even with overlapping windows
        for tap in range(s):
            dx[:, :, tap : tap + stride * (l_out - 1) + 1 : stride] += contrib[:, :, :, tap]
        return dx, dk, db

    return _result(out, (inputs, kernels, bias), bw)


def max_pool1d(inputs, window, stride):
    """Max over sliding windows; gradient routes to the first argmax on ties."""
    if inputs.data.ndim != 3:
        raise ShapeMismatch(f"max_pool1d: input {inputs.data.shape}")
    n, c, length = inputs.data.shape
    if window > length:
        raise WindowLargerThanInput(f"pool window {window} > input length {length}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    views = sliding_window_view(inputs.data, window, axis=2)[:, :, ::stride, :]  # [N,C,L',w]
    amax = views.argmax(axis=-1)  # first max on ties
    out = np.take_along_axis(views, amax[..., None], axis=-1)[..., 0]
    l_out = out.shape[2]

    def bw(g):
        dx = np.zeros_like(inputs.data)
        ni, ci, li = np.indices((n, c, l_out))
        np.add.at(dx, (ni, ci, li * stride + amax), g)
        return (dx,)

    return _result(out, (inputs,), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(t):
    mask = t.data > 0
    return _result(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,))


def sigmoid(t):
    """Logistic function clamped to [1e-7, 1-1e-7] so log stays finite."""
    y = np.clip(1.0 / (1.0 + np.exp(-t.data)), SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    return _result(y, (t,), lambda g: (g * y * (1.0 - y),))


def tanh(t):
    y = np.tanh(t.data)
    return _result(y, (t,), lambda g: (g * (1.0 - y * y),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(t, kind):
    try:
        return _ACTIVATIONS[kind](t)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def log(t):
    return _result(np.log(t.data), (t,), lambda g: (g / t.data,))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_mse(pred, target):
    """Mean squared error; target carries no gradient."""
    target = _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeMismatch(f"mse: {pred.data.shape} vs {target.data.shape}")
    diff = add(pred, mul(target.detach(), -1.0))
    return tmean(mul(diff, diff))


def loss_bce(prob, target):
    """-mean[t*log(p) + (1-t)*log(1-p)] over probabilities strictly in (0,1)."""
    target = _as_tensor(target)
    if prob.data.shape != target.data.shape:
        raise ShapeMismatch(f"bce: {prob.data.shape} vs {target.data.shape}")
    if np.any(prob.data <= 0.0) or np.any(prob.data >= 1.0):
        raise ProbabilityOutOfRange("bce probabilities must lie strictly inside (0,1)")
    t = target.detach()
    pos = mul(t, log(prob))
    neg = mul(1.0 - t, log(1.0 - prob))
    return mul(tmean(add(pos, neg)), -1.0)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad.

    `loss` must be scalar and produced by recorded operations. Repeated
    calls without zero_grad() keep accumulating.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward on tensor of shape {loss.data.shape}")
    if loss._backward is None and not loss.requires_grad:
        raise NoRecordedGraph("loss has no recorded computation graph")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NonFiniteValue("gradient contains NaN or Inf")
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = pg if prev is None else prev + pg
        else:  # leaf
            node.grad = g.copy() if node.grad is None else node.grad + g


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------

def grad_check(f, params, perturbation=1e-5):
    """Max relative error between backward() and central finite differences.

    `f` is a zero-argument callable returning a scalar Tensor computed from
    `params`; it must be deterministic (evaluated twice to verify). The
    relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if not (1e-6 <= perturbation <= 1e-4):
        raise ValueError(f"perturbation must be in [1e-6, 1e-4], got {perturbation}")

    v1 = f().item()
    v2 = f().item()
    if v1 != v2:
        raise NondeterministicFunction(f"f() gave {v1!r} then {v2!r}")

    zero_grads(params)
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + perturbation
            f_plus = f().item()
            flat[i] = orig - perturbation
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * perturbation)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    zero_grads(params)
    return worst
