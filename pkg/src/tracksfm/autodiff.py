"""Reverse-mode automatic differentiation on float64 numpy arrays.

A Tensor wraps an ndarray and remembers the parents and local adjoint rule
of the operation that produced it. backward() traces the graph below a
scalar root into a Tape (a topological record where every operation's
inputs precede it), then sweeps it once in reverse, accumulating adjoints
into every requires_grad leaf.

The primitive set is what the attention network, loss, and optimizer
compose: matmul, elementwise arithmetic, concat/narrow/gather/reshape,
scatter-add and softmax over index segments, leaky_relu/relu, layer_norm,
sqrt, where, and sum/mean reductions. All forward values are float64 and
computed with numpy's deterministic kernels, so identical inputs give
bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class SegmentIndexError(ValueError):
    """A segment-index vector is out of range or leaves a segment empty."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where a finite value is required."""

    def __init__(self, message: str, context: str | None = None):
        super().__init__(message if context is None else f"{message} [{context}]")
        self.context = context


def _as_array(values) -> np.ndarray:
    if type(values) is np.ndarray and values.dtype == np.float64:
        return values
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64))


class Tensor:
    """A float64 array with an optional adjoint buffer.

    Leaves are created directly (requires_grad marks trainable parameters);
    interior nodes are created by the primitives below and carry a `_vjp`
    closure that pushes the output adjoint to the parents' .grad buffers.
    Tensors without grad are immutable by convention and safe to share.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_vjp", "_needs", "_done")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _vjp=None):
        self.values = _as_array(values)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp
        self._needs = requires_grad or any(p._needs for p in _parents)
        self._done = False

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def _add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            if g.shape == self.values.shape:
                self.grad = g.copy()
            else:
                self.grad = np.zeros_like(self.values)
                self.grad += g
        else:
            self.grad += g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Topologically ordered record of the subgraph reaching a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        """Iterative postorder DFS; parents land before their consumers."""
        nodes: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited or not node._needs:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return cls(nodes)


def backward(root: Tensor, params=None, accumulate: bool = False) -> None:
    """Populate .grad = d(root)/d(leaf) for every requires_grad leaf.

    `root` must be scalar. Adjoints add into any existing .grad buffers;
    re-running backward through the same root is rejected unless
    `accumulate=True` (documented double-counting). Leaves listed in
    `params` that the graph never reaches get zero grad buffers.
    """
    if root.values.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if root._done and not accumulate:
        raise RuntimeError("backward already ran through this root; pass accumulate=True to add")
    root._done = True
    tape = Tape.trace(root)
    root._add_grad(np.ones_like(root.values))
    for node in reversed(tape.nodes):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)
        if not node.requires_grad:
            node.grad = None   # interior adjoints are per-pass scratch
    if params is not None:
        for p in _iter_params(params):
            if p.grad is None:
                p.grad = np.zeros_like(p.values)


def _iter_params(params):
    if isinstance(params, dict):
        return params.values()
    return params


def zero_grads(params) -> None:
    for p in _iter_params(params):
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives ----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b_values = np.asarray(b, dtype=np.float64)
        out = Tensor(a.values + b_values, _parents=(a,),
                     _vjp=None)
        out._vjp = lambda g: a._add_grad(_unbroadcast(g, a.values.shape))
        return out
    try:
        values = a.values + b.values
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    out = Tensor(values, _parents=(a, b))

    def vjp(g):
        if a._needs:
            a._add_grad(_unbroadcast(g, a.values.shape))
        if b._needs:
            b._add_grad(_unbroadcast(g, b.values.shape))
    out._vjp = vjp
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b_values = np.asarray(b, dtype=np.float64)
        out = Tensor(a.values * b_values, _parents=(a,))
        out._vjp = lambda g: a._add_grad(_unbroadcast(g * b_values, a.values.shape))
        return out
    try:
        values = a.values * b.values
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    out = Tensor(values, _parents=(a, b))

    def vjp(g):
        if a._needs:
            a._add_grad(_unbroadcast(g * b.values, a.values.shape))
        if b._needs:
            b._add_grad(_unbroadcast(g * a.values, b.values.shape))
    out._vjp = vjp
    return out


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / np.asarray(b, dtype=np.float64))
    try:
        values = a.values / b.values
    except ValueError as e:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from e
    out = Tensor(values, _parents=(a, b))

    def vjp(g):
        if a._needs:
            a._add_grad(_unbroadcast(g / b.values, a.values.shape))
        if b._needs:
            b._add_grad(_unbroadcast(-g * a.values / (b.values * b.values), b.values.shape))
    out._vjp = vjp
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values, _parents=(a, b))

    def vjp(g):
        if a._needs:
            a._add_grad(g @ b.values.T)
        if b._needs:
            b._add_grad(a.values.T @ g)
    out._vjp = vjp
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    values = np.concatenate([t.values for t in tensors], axis=axis)
    out = Tensor(values, _parents=tuple(tensors))
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t._needs:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._add_grad(g[tuple(idx)])
    out._vjp = vjp
    return out


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if start < 0 or start + length > t.values.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}] outside axis of "
                         f"size {t.values.shape[axis]}")
    idx = [slice(None)] * t.values.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(t.values[idx], _parents=(t,))

    def vjp(g):
        buf = np.zeros_like(t.values)
        buf[idx] = g
        t._add_grad(buf)
    out._vjp = vjp
    return out


def gather(t: Tensor, index: np.ndarray) -> Tensor:
    """Select rows by an index array; backward scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= t.values.shape[0]):
        raise SegmentIndexError("gather index out of range")
    out = Tensor(t.values[index], _parents=(t,))

    def vjp(g):
        buf = np.zeros_like(t.values)
        np.add.at(buf, index, g)
        t._add_grad(buf)
    out._vjp = vjp
    return out


def segment_sum(t: Tensor, index: np.ndarray, num_segments: int) -> Tensor:
    """Scatter-add rows of t into num_segments output rows (out[k] = sum
    over rows e with index[e] == k)."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (t.values.shape[0],):
        raise SegmentIndexError("segment index must have one entry per row")
    if index.size and (index.min() < 0 or index.max() >= num_segments):
        raise SegmentIndexError("segment index out of range")
    values = np.zeros((num_segments,) + t.values.shape[1:], dtype=np.float64)
    np.add.at(values, index, t.values)
    out = Tensor(values, _parents=(t,))
    out._vjp = lambda g: t._add_grad(g[index])
    return out


def segment_softmax(t: Tensor, index: np.ndarray, num_segments: int) -> Tensor:
    """Softmax across rows sharing a segment index, per trailing column.

    Every segment must be non-empty (an attention target with no incoming
    edge has no distribution).
    """
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (t.values.shape[0],):
        raise SegmentIndexError("segment index must have one entry per row")
    if index.size == 0 or index.min() < 0 or index.max() >= num_segments:
        raise SegmentIndexError("segment index out of range")
    if np.bincount(index, minlength=num_segments).min() == 0:
        raise SegmentIndexError("segment softmax over an empty segment")
    tail = t.values.shape[1:]
    mx = np.full((num_segments,) + tail, -np.inf)
    np.maximum.at(mx, index, t.values)
    ex = np.exp(t.values - mx[index])
    denom = np.zeros((num_segments,) + tail, dtype=np.float64)
    np.add.at(denom, index, ex)
    alpha = ex / denom[index]
    out = Tensor(alpha, _parents=(t,))

    def vjp(g):
        inner = np.zeros((num_segments,) + tail, dtype=np.float64)
        np.add.at(inner, index, g * alpha)
        t._add_grad(alpha * (g - inner[index]))
    out._vjp = vjp
    return out


def leaky_relu(t: Tensor, slope: float = 0.2) -> Tensor:
    pos = t.values > 0
    out = Tensor(np.where(pos, t.values, slope * t.values), _parents=(t,))
    out._vjp = lambda g: t._add_grad(np.where(pos, g, slope * g))
    return out


def relu(t: Tensor) -> Tensor:
    pos = t.values > 0
    out = Tensor(np.where(pos, t.values, 0.0), _parents=(t,))
    out._vjp = lambda g: t._add_grad(np.where(pos, g, 0.0))
    return out


def layer_norm(t: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the feature (last) axis to zero mean, unit variance."""
    x = t.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y, _parents=(t,))

    def vjp(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * y).mean(axis=-1, keepdims=True)
        t._add_grad(inv * (g - g_mean - y * gy_mean))
    out._vjp = vjp
    return out


def sqrt(t: Tensor) -> Tensor:
    values = np.sqrt(t.values)
    out = Tensor(values, _parents=(t,))
    out._vjp = lambda g: t._add_grad(g * 0.5 / values)
    return out


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select a where mask else b; mask is a plain boolean array (the
    condition is not differentiated through)."""
    mask = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(mask, a.values, b.values), _parents=(a, b))

    def vjp(g):
        if a._needs:
            a._add_grad(_unbroadcast(np.where(mask, g, 0.0), a.values.shape))
        if b._needs:
            b._add_grad(_unbroadcast(np.where(mask, 0.0, g), b.values.shape))
    out._vjp = vjp
    return out


def reshape(t: Tensor, shape) -> Tensor:
    out = Tensor(t.values.reshape(shape), _parents=(t,))
    out._vjp = lambda g: t._add_grad(g.reshape(t.values.shape))
    return out


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(t.values.sum(axis=axis, keepdims=keepdims), _parents=(t,))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        t._add_grad(np.broadcast_to(g, t.values.shape).copy())
    out._vjp = vjp
    return out


def tmean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = t.values.size if axis is None else t.values.shape[axis]
    return mul(tsum(t, axis=axis, keepdims=keepdims), 1.0 / count)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


# -- finite-difference oracle ---------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter comparison of reverse-mode against central differences."""

    max_relative: float
    per_param: dict
    passed: bool
    tol: float

    def worst(self) -> str:
        name = max(self.per_param, key=lambda k: self.per_param[k][0])
        rel, at = self.per_param[name]
        return f"{name}[{at}]: rel dev {rel:.3e}"


def grad_check(f, params, step: float = 1e-5, tol: float = 1e-6,
               max_coords_per_param: int | None = None, seed: int = 0,
               refine_step: float | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of f(params) with central differences.

    f must be deterministic and return a scalar Tensor. Relative deviation
    per coordinate is |fd - ad| / max(|fd|, |ad|, 1e-3); the floor keeps
    finite-difference roundoff at near-zero gradients from registering as
    failures. With max_coords_per_param set, a seeded random subset of
    coordinates of each parameter is checked instead of all of them.

    With refine_step set, a coordinate that misses the tolerance at the
    primary step is re-measured at the smaller step. That separates
    finite-difference artifacts from real gradient errors: truncation and
    a kink (ReLU corner) straddled by the primary bracket both vanish as
    the step shrinks, while a wrong adjoint stays wrong at every step.
    """
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(str(i), p) for i, p in enumerate(params)]

    zero_grads([p for _, p in items])
    root = f()
    if not np.isfinite(root.values).all():
        raise NumericError("objective is not finite at the evaluation point")
    backward(root, params=[p for _, p in items])
    grads = {name: p.grad.copy() for name, p in items}

    def central(flat, c, h):
        orig = flat[c]
        flat[c] = orig + h
        f_plus = f().values.item()
        flat[c] = orig - h
        f_minus = f().values.item()
        flat[c] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("objective not finite while perturbing a parameter")
        return (f_plus - f_minus) / (2.0 * h)

    rng = np.random.default_rng(seed)
    per_param = {}
    overall = 0.0
    for name, p in items:
        flat = p.values.reshape(-1)
        size = flat.size
        if max_coords_per_param is not None and size > max_coords_per_param:
            coords = np.sort(rng.choice(size, size=max_coords_per_param, replace=False))
        else:
            coords = np.arange(size)
        worst, worst_at = 0.0, 0
        gflat = grads[name].reshape(-1)
        for c in coords:
            ad = gflat[c]
            fd = central(flat, c, step)
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-3)
            if rel > tol and refine_step is not None:
                fd = central(flat, c, refine_step)
                rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-3)
            if rel > worst:
                worst, worst_at = rel, int(c)
        per_param[name] = (worst, worst_at)
        overall = max(overall, worst)
    return GradCheckReport(max_relative=overall, per_param=per_param,
                           passed=overall <= tol, tol=tol)
