"""Tiny reverse-mode tape over the primitives in :mod:`volnet.tensor`.

Only what the blocks and networks need: every traced op records its
forward operands and pulls gradients back through :func:`tensor.vjp`.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tc


class Var:
    """A value on the tape. Leaves with ``requires_grad`` collect ``grad``."""

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_op", "_params", "_inputs")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._op = None
        self._params = {}
        self._inputs = ()

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, op={self._op})"


def _wrap(x):
    return x if isinstance(x, Var) else Var(x)


def _apply(op, fn, operands, **params):
    operands = [_wrap(o) for o in operands]
    values = [o.value for o in operands]
    out = Var(fn(*values, **params))
    if any(o.requires_grad for o in operands):
        out.requires_grad = True
        out._parents = tuple(operands)
        out._op = op
        out._params = params
        out._inputs = tuple(values)
    return out


def conv3d_full(x, w):
    return _apply("conv3d_full", tc.conv3d_full, (x, w))


def conv3d_depthwise(x, w):
    return _apply("conv3d_depthwise", tc.conv3d_depthwise, (x, w))


def conv_axis(x, w, axis, depthwise=False):
    return _apply("conv_axis", tc.conv_axis, (x, w), axis=axis, depthwise=depthwise)


def pointwise(x, w):
    return _apply("pointwise", tc.pointwise, (x, w))


def relu(x):
    return _apply("relu", tc.relu, (x,))


def add(a, b):
    return _apply("add", tc.add, (a, b))


def concat_channels(parts):
    return _apply("concat_channels", lambda *vs: tc.concat_channels(vs), tuple(parts))


def voxel_shuffle(x, r):
    return _apply("voxel_shuffle", tc.voxel_shuffle, (x,), r=r)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, upstream):
    """Accumulate d(root)/d(leaf) contracted with ``upstream`` into leaf grads.

    Leaves accumulate in place, so call sites zero ``grad`` between steps.
    """
    grads = {id(root): np.asarray(upstream)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        needs = [p.requires_grad for p in node._parents]
        parent_grads = tc.vjp(node._op, node._inputs, g, needs=needs, **node._params)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
