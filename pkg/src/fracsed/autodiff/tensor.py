"""Tensor value with a reverse-mode tape."""
import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not compose."""


class Tensor:
    """Dense float64 array that remembers how it was computed.

    ``_parents`` and ``_backward`` form the graph: ``_backward(g)`` receives
    the gradient w.r.t. this tensor and returns one gradient (or None) per
    parent, in order.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the ops module does the work
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def make(data, parents, backward_fn):
    """Wrap an op result; only records the tape if some parent needs grads."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def topological_order(root):
    """Nodes reachable from ``root`` that need gradients, inputs first."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every tensor that requires grad upstream of ``loss``.

    Gradients accumulate, so call ``zero_grad`` on parameters between steps.
    Intermediate tensors have their grads released once consumed.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    if not order:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
