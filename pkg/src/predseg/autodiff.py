"""Reverse-mode automatic differentiation over per-step static graphs.

Only the operations the feature models and losses need are provided. Graphs
are built fresh for every optimization step on top of persistent leaf
``Variable`` parameters; ``backward`` propagates through one graph and
accumulates gradients into the leaves, so repeated backward calls (e.g. one
per image of a batch) sum their contributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Variable",
    "ParamGroup",
    "asvariable",
    "add",
    "subtract",
    "multiply",
    "negative",
    "exp",
    "log",
    "log1p",
    "softplus",
    "logaddexp",
    "logsumexp",
    "vsum",
    "vmean",
    "square",
    "pow_const",
    "reshape",
    "getitem",
    "concat",
    "take_columns",
    "pad_reflect",
    "conv2d",
    "relu",
    "normalize_per_channel",
    "inject_noise",
    "accumulate_feature_gradients",
    "grad_check",
]


class Variable:
    """A node of the computation graph: a float array plus gradient plumbing.

    Leaves are created directly (``Variable(value, requires_grad=True)``);
    interior nodes are returned by the ops below and carry a vector-Jacobian
    closure. Gradients persist only on leaves; interior gradients live in a
    per-backward scratch table.
    """

    __slots__ = ("value", "requires_grad", "name", "_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, name=None, _parents=(), _vjp=None):
        value = np.asarray(value)
        if value.dtype not in (np.float32, np.float64):
            value = value.astype(np.float64)
        self.value = value
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.name = name
        self._grad = None
        self._parents = tuple(_parents)
        self._vjp = _vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        """Accumulated gradient (leaves only); zeros before any backward."""
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad.fill(0.0)

    def detach(self) -> "Variable":
        return Variable(self.value, requires_grad=False)

    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (default: ones, for scalar losses) to the leaves."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without grad requires a scalar root")
            grad = np.ones_like(self.value)
        grad = np.asarray(grad, dtype=self.value.dtype)
        if grad.shape != self.value.shape:
            raise ValueError(f"grad shape {grad.shape} != value shape {self.value.shape}")
        if not self.requires_grad:
            return
        order = self._toposort()
        table = {id(self): grad.copy()}
        for node in order:
            g = table.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node._grad is None:
                    node._grad = np.zeros_like(node.value)
                node._grad += g
                continue
            for parent, pg in node._vjp(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in table:
                    table[key] = table[key] + pg
                else:
                    table[key] = pg

    def _toposort(self):
        # Iterative post-order DFS restricted to grad-requiring nodes;
        # reversed post-order guarantees a node's gradient is complete
        # before its vjp runs.
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return list(reversed(order))

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negative(self)

    def __truediv__(self, other):
        if isinstance(other, Variable):
            return multiply(self, pow_const(other, -1.0))
        return multiply(self, 1.0 / other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        tag = self.name or ("leaf" if self.is_leaf else "op")
        return f"Variable({tag}, shape={self.value.shape}, requires_grad={self.requires_grad})"


@dataclass
class ParamGroup:
    """Named trainable leaves sharing one learning-rate multiplier."""

    params: dict[str, Variable]
    lr_multiplier: float = 1.0
    weight_decay: bool = True
    name: str = ""

    def __post_init__(self):
        if self.lr_multiplier <= 0:
            raise ValueError("lr multiplier must be positive")


def asvariable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Variable:
    a, b = asvariable(a), asvariable(b)
    out = a.value + b.value

    def vjp(g):
        return ((a, _unbroadcast(g, a.value.shape)), (b, _unbroadcast(g, b.value.shape)))

    return Variable(out, _parents=(a, b), _vjp=vjp)


def subtract(a, b) -> Variable:
    a, b = asvariable(a), asvariable(b)
    out = a.value - b.value

    def vjp(g):
        return ((a, _unbroadcast(g, a.value.shape)), (b, _unbroadcast(-g, b.value.shape)))

    return Variable(out, _parents=(a, b), _vjp=vjp)


def multiply(a, b) -> Variable:
    a, b = asvariable(a), asvariable(b)
    out = a.value * b.value

    def vjp(g):
        return (
            (a, _unbroadcast(g * b.value, a.value.shape)),
            (b, _unbroadcast(g * a.value, b.value.shape)),
        )

    return Variable(out, _parents=(a, b), _vjp=vjp)


def negative(a) -> Variable:
    a = asvariable(a)
    return Variable(-a.value, _parents=(a,), _vjp=lambda g: ((a, -g),))


def exp(a) -> Variable:
    a = asvariable(a)
    out = np.exp(a.value)
    return Variable(out, _parents=(a,), _vjp=lambda g: ((a, g * out),))


def log(a) -> Variable:
    a = asvariable(a)
    return Variable(np.log(a.value), _parents=(a,), _vjp=lambda g: ((a, g / a.value),))


def log1p(a) -> Variable:
    a = asvariable(a)
    return Variable(np.log1p(a.value), _parents=(a,), _vjp=lambda g: ((a, g / (1.0 + a.value)),))


def softplus(a) -> Variable:
    """log(1 + exp(a)), overflow-safe; gradient is the logistic sigmoid."""
    a = asvariable(a)
    out = np.logaddexp(0.0, a.value)

    def vjp(g):
        sig = np.exp(a.value - out)
        return ((a, g * sig),)

    return Variable(out, _parents=(a,), _vjp=vjp)


def logaddexp(a, b) -> Variable:
    a, b = asvariable(a), asvariable(b)
    out = np.logaddexp(a.value, b.value)

    def vjp(g):
        wa = np.exp(a.value - out)
        wb = np.exp(b.value - out)
        return (
            (a, _unbroadcast(g * wa, a.value.shape)),
            (b, _unbroadcast(g * wb, b.value.shape)),
        )

    return Variable(out, _parents=(a, b), _vjp=vjp)


def logsumexp(a, axis: int, keepdims: bool = False) -> Variable:
    a = asvariable(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    out_k = m + np.log(np.sum(np.exp(a.value - m), axis=axis, keepdims=True))
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        w = np.exp(a.value - out_k)
        return ((a, gk * w),)

    return Variable(out, _parents=(a,), _vjp=vjp)


def vsum(a, axis=None, keepdims: bool = False) -> Variable:
    a = asvariable(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.value.shape).copy()),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gk, a.value.shape).copy()),)

    return Variable(out, _parents=(a,), _vjp=vjp)


def vmean(a, axis=None, keepdims: bool = False) -> Variable:
    a = asvariable(a)
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.value.shape[ax] for ax in axes]))
    out = np.mean(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            gk = g
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gk / n, a.value.shape).copy()),)

    return Variable(out, _parents=(a,), _vjp=vjp)


def square(a) -> Variable:
    a = asvariable(a)
    return Variable(a.value * a.value, _parents=(a,), _vjp=lambda g: ((a, 2.0 * g * a.value),))


def pow_const(a, p: float) -> Variable:
    a = asvariable(a)
    out = a.value**p
    return Variable(out, _parents=(a,), _vjp=lambda g: ((a, g * p * a.value ** (p - 1.0)),))


def reshape(a, shape) -> Variable:
    a = asvariable(a)
    out = a.value.reshape(shape)
    return Variable(out, _parents=(a,), _vjp=lambda g: ((a, g.reshape(a.value.shape)),))


def getitem(a, idx) -> Variable:
    """Basic (slice/int) indexing; backward scatters into a zero array."""
    a = asvariable(a)
    out = a.value[idx]

    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[idx] = g
        return ((a, ga),)

    return Variable(np.ascontiguousarray(out), _parents=(a,), _vjp=vjp)


def concat(parts, axis: int = 0) -> Variable:
    parts = [asvariable(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        gs = np.split(g, splits, axis=axis)
        return tuple(zip(parts, gs))

    return Variable(out, _parents=tuple(parts), _vjp=vjp)


def take_columns(a, indices) -> Variable:
    """Gather columns of a (k, N) array; duplicate indices sum in the backward."""
    a = asvariable(a)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1:
        raise ValueError("take_columns expects flat indices")
    out = a.value[:, indices]

    def vjp(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga.T, indices, g.T)
        return ((a, ga),)

    return Variable(out, _parents=(a,), _vjp=vjp)


def _reflect_indices(n: int, before: int, after: int) -> np.ndarray:
    if before >= n or after >= n:
        raise ValueError(f"reflect padding ({before},{after}) too wide for size {n}")
    idx = np.arange(-before, n + after)
    idx = np.abs(idx)
    return np.where(idx >= n, 2 * n - 2 - idx, idx)


def pad_reflect(a, pads: tuple[int, int, int, int]) -> Variable:
    """Reflect-pad the last two axes of a (C, H, W) array (no edge repeat)."""
    a = asvariable(a)
    pt, pb, pl, pr = pads
    H, W = a.value.shape[-2:]
    rows = _reflect_indices(H, pt, pb)
    cols = _reflect_indices(W, pl, pr)
    out = a.value[..., rows[:, None], cols[None, :]]

    def vjp(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, (slice(None), rows[:, None], cols[None, :]), g)
        return ((a, ga),)

    return Variable(np.ascontiguousarray(out), _parents=(a,), _vjp=vjp)


def _conv2d_valid(x: Variable, k: Variable, stride: tuple[int, int]) -> Variable:
    xv, kv = x.value, k.value
    c_in, H, W = xv.shape
    c_out, c_in_k, kh, kw = kv.shape
    if c_in != c_in_k:
        raise ValueError(f"input has {c_in} channels, kernel expects {c_in_k}")
    sh, sw = stride
    if H < kh or W < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than input {H}x{W}")
    h_out = (H - kh) // sh + 1
    w_out = (W - kw) // sw + 1
    windows = np.lib.stride_tricks.sliding_window_view(xv, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    out = np.einsum("ihwyx,oiyx->ohw", windows, kv, optimize=True)

    def vjp(g):
        gk = np.einsum("ihwyx,ohw->oiyx", windows, g, optimize=True)
        gx = np.zeros_like(xv)
        for y in range(kh):
            for z in range(kw):
                gx[:, y : y + sh * h_out : sh, z : z + sw * w_out : sw] += np.tensordot(
                    kv[:, :, y, z], g, axes=([0], [0])
                )
        return ((x, gx), (k, gk))

    return Variable(out, _parents=(x, k), _vjp=vjp)


def _same_pads(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)  # ceil
    total = max(0, (out - 1) * stride + kernel - size)
    return total // 2, total - total // 2


def conv2d(x, kernel, stride: tuple[int, int] = (1, 1), padding: str = "valid") -> Variable:
    """2-D cross-correlation of (C_in, H, W) with (C_out, C_in, kh, kw).

    ``padding='valid'`` shrinks the output; ``'reflect-same'`` reflect-pads so
    the output is ceil(size / stride) per axis.
    """
    x, kernel = asvariable(x), asvariable(kernel)
    if padding == "valid":
        return _conv2d_valid(x, kernel, stride)
    if padding == "reflect-same":
        _, H, W = x.value.shape
        kh, kw = kernel.value.shape[2:]
        pt, pb = _same_pads(H, kh, stride[0])
        pl, pr = _same_pads(W, kw, stride[1])
        return _conv2d_valid(pad_reflect(x, (pt, pb, pl, pr)), kernel, stride)
    raise ValueError(f"unknown padding mode {padding!r}")


def relu(a) -> Variable:
    a = asvariable(a)
    out = np.maximum(a.value, 0.0)

    def vjp(g):
        return ((a, g * (a.value > 0.0)),)  # subgradient 0 at 0

    return Variable(out, _parents=(a,), _vjp=vjp)


def normalize_per_channel(a, eps: float = 1e-8) -> Variable:
    """Standardize each channel of a (k, H, W) map over its spatial extent.

    Division is by sqrt(var + eps), so constant channels map to zeros.
    """
    a = asvariable(a)
    if a.value.ndim != 3:
        raise ValueError(f"expected (k, H, W), got {a.value.shape}")
    if a.value.shape[1] * a.value.shape[2] < 2:
        raise ValueError("need at least 2 spatial positions to normalize")
    m = vmean(a, axis=(1, 2), keepdims=True)
    centered = subtract(a, m)
    var = vmean(square(centered), axis=(1, 2), keepdims=True)
    return multiply(centered, pow_const(add(var, eps), -0.5))


def inject_noise(a, alpha: float, rng: np.random.Generator) -> Variable:
    """Return sqrt(1 - alpha^2) * a + alpha * eps with eps ~ N(0, 1).

    The noise is treated as a constant: the gradient w.r.t. ``a`` is
    sqrt(1 - alpha^2). Keeps unit-variance inputs at unit variance.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    a = asvariable(a)
    scale = float(np.sqrt(1.0 - alpha * alpha))
    if alpha == 0.0:
        return Variable(a.value, _parents=(a,), _vjp=lambda g: ((a, g),))
    eps = rng.standard_normal(a.value.shape)
    out = scale * a.value + alpha * eps
    return Variable(out, _parents=(a,), _vjp=lambda g: ((a, scale * g),))


def accumulate_feature_gradients(features, loss_eval, reps: int):
    """Sum feature-map gradients of ``loss_eval`` over ``reps`` evaluations.

    ``features`` is a Variable or list of Variables (typically network
    outputs). ``loss_eval(values, rep)`` receives the detached feature values
    and must return ``(loss, grads)`` with one gradient array per feature.
    The caller then propagates the summed gradients through the network with
    a single ``backward`` per feature. Saves graph memory: each repetition's
    evaluation graph is freed before the next one is built.
    """
    single = isinstance(features, Variable)
    feats = [features] if single else list(features)
    total = 0.0
    acc = [np.zeros_like(f.value) for f in feats]
    for rep in range(int(reps)):
        loss, grads = loss_eval([f.value for f in feats], rep)
        if len(grads) != len(acc):
            raise ValueError(f"loss_eval returned {len(grads)} gradients for {len(acc)} features")
        for slot, g in zip(acc, grads):
            if g.shape != slot.shape:
                raise ValueError(f"gradient shape {g.shape} != feature shape {slot.shape}")
            slot += g
        total += float(loss)
    return (total, acc[0]) if single else (total, acc)


def grad_check(f, point, step: float = 1e-5) -> float:
    """Max relative error between analytic gradients of ``f`` and central differences.

    ``f`` takes a list of Variables and returns a scalar Variable; it must be
    deterministic (seed any randomness internally). ``point`` is one array or
    a list of arrays. Relative error uses denominator max(|a|, |n|, 1e-6).
    """
    pts = [np.asarray(p, dtype=np.float64) for p in (point if isinstance(point, list) else [point])]
    leaves = [Variable(p.copy(), requires_grad=True) for p in pts]
    out = f(leaves)
    out.backward()
    analytic = [lv.grad.copy() for lv in leaves]

    def feval(arrays):
        return float(f([Variable(a) for a in arrays]).value)

    worst = 0.0
    for i, p in enumerate(pts):
        flat = p.ravel()
        for j in range(flat.size):
            h = step * max(1.0, abs(flat[j]))
            bumped = [q.copy() for q in pts]
            bumped[i].ravel()[j] = flat[j] + h
            fp = feval(bumped)
            bumped[i].ravel()[j] = flat[j] - h
            fm = feval(bumped)
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[i].ravel()[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst
