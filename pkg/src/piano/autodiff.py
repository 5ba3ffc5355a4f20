"""A small reverse-mode autodiff engine over NCHW numpy arrays.

Every primitive returns a :class:`Node` holding its forward value and a
closure that maps the output adjoint to parent adjoints.  Graphs are built
eagerly, so a forward pass is just ordinary Python calls; :func:`backward`
walks the recorded parents in reverse topological order.
"""
from __future__ import annotations

import itertools
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Node", "NonFiniteError", "ShapeError", "GraphStateError",
    "constant", "parameter", "conv2d", "leaky_relu", "relu", "tanh", "softplus",
    "add", "sub", "mul", "scale", "concat", "take", "avg_down2", "up2",
    "channel_affine", "mean_square", "add_n",
    "backward", "DiffGraph", "gradcheck", "gradcheck_report", "kink_pattern",
]

_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "name", "id",
                 "mask")

    def __init__(self, value, parents=(), backward_fn=None, op="const", name=None,
                 requires_grad=None):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self.name = name
        self.id = next(_ids)
        self.mask = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} #{self.id} {self.value.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def _as_node(x, dtype=None):
    if isinstance(x, Node):
        return x
    return constant(np.asarray(x, dtype=dtype))


def _emit(value, parents, backward_fn, op):
    value = np.asarray(value)
    if not np.all(np.isfinite(value)):
        node_id = next(_ids)
        raise NonFiniteError(f"non-finite values produced by {op} node #{node_id}")
    return Node(value, parents, backward_fn, op)


def constant(value, name=None) -> Node:
    return Node(np.asarray(value), op="const", name=name, requires_grad=False)


def parameter(value, name=None) -> Node:
    return Node(np.asarray(value), op="param", name=name, requires_grad=True)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(k for k, n in enumerate(shape) if n == 1 and g.shape[k] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- convolution -------------------------------------------------------------

def _fold_edges(gp, pad):
    """Adjoint of replicate padding on the last two axes."""
    if pad == 0:
        return gp
    g = gp.copy()
    g[..., pad, :] += g[..., :pad, :].sum(axis=-2)
    g[..., -pad - 1, :] += g[..., -pad:, :].sum(axis=-2)
    g = g[..., pad:-pad, :]
    g[..., :, pad] += g[..., :, :pad].sum(axis=-1)
    g[..., :, -pad - 1] += g[..., :, -pad:].sum(axis=-1)
    return g[..., :, pad:-pad]


def conv2d(x, w, b=None) -> Node:
    """Stride-1 cross-correlation with replicate padding and an odd kernel.

    ``x`` is ``(N, C, H, W)``, ``w`` is ``(O, C, k, k)``, ``b`` is ``(O,)``.
    """
    x, w = _as_node(x), _as_node(w)
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel {w.shape} incompatible with input {x.shape}")
    pad = k // 2
    if pad:
        xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
        win = sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    else:
        cols = x.value.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    wmat = w.value.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        b = _as_node(b)
        out = out + b.value
    out = np.ascontiguousarray(out.reshape(n, h, wd, o).transpose(0, 3, 1, 2))

    def back(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gflat.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = (gflat @ wmat).reshape(n, h, wd, c, k, k)
            if pad:
                gp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
                for di in range(k):
                    for dj in range(k):
                        gp[:, :, di:di + h, dj:dj + wd] += dcols[..., di, dj].transpose(0, 3, 1, 2)
                gx = _fold_edges(gp, pad)
            else:
                gx = dcols.reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _emit(out, parents, back, "conv2d")


# -- pointwise ---------------------------------------------------------------

def leaky_relu(x, slope=0.1) -> Node:
    x = _as_node(x)
    pos = x.value > 0
    out = _emit(np.where(pos, x.value, slope * x.value), (x,),
                lambda g: (np.where(pos, g, slope * g),), "leaky_relu")
    out.mask = pos
    return out


def relu(x) -> Node:
    x = _as_node(x)
    pos = x.value > 0
    out = _emit(np.where(pos, x.value, 0.0).astype(x.dtype), (x,),
                lambda g: (np.where(pos, g, 0.0).astype(g.dtype),), "relu")
    out.mask = pos
    return out


def tanh(x) -> Node:
    x = _as_node(x)
    t = np.tanh(x.value)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def softplus(x) -> Node:
    x = _as_node(x)
    v = x.value
    out = np.logaddexp(0.0, v).astype(v.dtype)
    sig = (0.5 * (1.0 + np.tanh(0.5 * v))).astype(v.dtype)
    return _emit(out, (x,), lambda g: (g * sig,), "softplus")


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return _emit(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return _emit(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)

    def back(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.value * b.value, (a, b), back, "mul")


def scale(x, c) -> Node:
    x = _as_node(x)
    c = x.value.dtype.type(c)
    return _emit(x.value * c, (x,), lambda g: (g * c,), "scale")


def add_n(nodes) -> Node:
    nodes = [_as_node(n) for n in nodes]
    total = nodes[0]
    for n in nodes[1:]:
        total = add(total, n)
    return total


# -- structural --------------------------------------------------------------

def concat(nodes, axis=1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis)
                     for k in range(len(nodes)))

    return _emit(np.concatenate([n.value for n in nodes], axis=axis), nodes, back, "concat")


def take(x, start, stop=None, axis=1) -> Node:
    """Slice ``[start:stop]`` along ``axis`` (channels by default)."""
    x = _as_node(x)
    stop = start + 1 if stop is None else stop
    index = [slice(None)] * x.value.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        full = np.zeros_like(x.value)
        full[index] = g
        return (full,)

    return _emit(x.value[index], (x,), back, "take")


def avg_down2(x) -> Node:
    x = _as_node(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_down2 needs even spatial dims, got {h}x{w}")
    out = x.value.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    quarter = x.value.dtype.type(0.25)

    def back(g):
        return (np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3),)

    return _emit(out, (x,), back, "avg_down2")


def up2(x) -> Node:
    x = _as_node(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit(out, (x,), back, "up2")


def channel_affine(x, scale_c, shift_c) -> Node:
    """``x * scale[c] + shift[c]``; scale and shift may be trainable nodes."""
    x, s, t = _as_node(x), _as_node(scale_c, x.dtype), _as_node(shift_c, x.dtype)
    if s.shape != (x.shape[1],) or t.shape != (x.shape[1],):
        raise ShapeError(f"channel_affine expects ({x.shape[1]},) scale/shift, "
                         f"got {s.shape} and {t.shape}")
    sv = s.value[None, :, None, None]
    tv = t.value[None, :, None, None]

    def back(g):
        gs = (g * x.value).sum(axis=(0, 2, 3)) if s.requires_grad else None
        gt = g.sum(axis=(0, 2, 3)) if t.requires_grad else None
        return g * sv, gs, gt

    return _emit(x.value * sv + tv, (x, s, t), back, "channel_affine")


def mean_square(x) -> Node:
    x = _as_node(x)
    size = x.value.size
    factor = x.value.dtype.type(2.0 / size)
    return _emit(np.mean(x.value * x.value), (x,),
                 lambda g: (g * factor * x.value,), "mean_square")


# -- reverse sweep -----------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node):
    """Accumulate d(loss)/d(node) into ``.grad`` of every node feeding ``loss``."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.value.dtype).reshape(parent.shape)
            parent.grad = g if parent.grad is None else parent.grad + g
    return loss


# -- graph wrapper -----------------------------------------------------------

class DiffGraph:
    """Named parameters plus a build function wiring primitives together.

    ``build(params, inputs)`` receives dicts of nodes and returns a dict of
    output nodes.  ``signature`` maps input names to expected shapes, with
    ``None`` as a wildcard dimension.
    """

    def __init__(self, build: Callable, params: dict, signature: dict | None = None):
        self.build = build
        self.params = params
        self.signature = signature or {}
        self._leaves = None
        self._outputs = None

    def _check_inputs(self, inputs):
        for name, shape in self.signature.items():
            if name not in inputs:
                raise ShapeError(f"missing input {name!r}")
            actual = np.shape(inputs[name])
            if len(actual) != len(shape) or any(
                    e is not None and e != a for e, a in zip(shape, actual)):
                raise ShapeError(f"input {name!r}: expected dims {shape}, got {actual}")

    def forward(self, inputs: dict) -> dict:
        self._check_inputs(inputs)
        self._leaves = {k: parameter(v, k) for k, v in self.params.items()}
        nodes = {k: constant(v, k) for k, v in inputs.items()}
        self._outputs = self.build(self._leaves, nodes)
        return self._outputs

    def backward(self, loss="loss") -> dict:
        if self._outputs is None:
            raise GraphStateError("backward() called before forward()")
        node = self._outputs[loss] if isinstance(loss, str) else loss
        backward(node)
        return {k: (np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad)
                for k, leaf in self._leaves.items()}

    def loss_value(self, inputs, loss="loss") -> float:
        return float(self.forward(inputs)[loss].value)


def kink_pattern(root: Node) -> list:
    """Sign masks of every rectifier feeding ``root``, in graph order."""
    return [n.mask for n in _topo_order(root) if n.mask is not None]


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck_report(graph: DiffGraph, inputs: dict, eps=1e-3, loss="loss", max_coords=None,
                     seed=0, skip_kinks=True) -> dict:
    """Compare analytic gradients with central differences coordinate by coordinate.

    A central difference is only a valid derivative estimate when the loss is
    smooth on ``[p - eps, p + eps]``.  With ``skip_kinks`` a coordinate whose
    perturbation flips any rectifier sign is counted as skipped instead of
    checked.
    """
    out = graph.forward(inputs)
    base = kink_pattern(out[loss])
    analytic = graph.backward(loss)
    coords = [(name, idx) for name, arr in graph.params.items() for idx in np.ndindex(arr.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(picks)]
    worst, checked, skipped = 0.0, 0, 0
    for name, idx in coords:
        arr = graph.params[name]
        saved = arr[idx]
        values = []
        smooth = True
        for delta in (eps, -eps):
            arr[idx] = saved + delta
            node = graph.forward(inputs)[loss]
            values.append(float(node.value))
            if skip_kinks and not _same_pattern(base, kink_pattern(node)):
                smooth = False
        arr[idx] = saved
        if not smooth:
            skipped += 1
            continue
        checked += 1
        numeric = (values[0] - values[1]) / (2.0 * eps)
        a = float(analytic[name][idx])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return {"max_rel_error": worst, "checked": checked, "skipped": skipped}


def gradcheck(graph: DiffGraph, inputs: dict, eps=1e-3, loss="loss", max_coords=None,
              seed=0, skip_kinks=True) -> float:
    """Max relative error ``|a - n| / max(|a|, |n|, 1e-8)`` over checked coordinates.

    Checks every parameter coordinate, or a seeded random subsample of
    ``max_coords`` coordinates when given.  See :func:`gradcheck_report`.
    """
    return gradcheck_report(graph, inputs, eps, loss, max_coords, seed,
                            skip_kinks)["max_rel_error"]
