"""Dense tensors with reverse-mode automatic differentiation.

A single module-level tape records primitive applications whenever gradients
are enabled and some input requires (or carries) a gradient. ``backward``
replays the tape once, in reverse, and populates ``grad`` on every tensor
with ``requires_grad=True``; the tape is consumed afterwards.

Real tensors default to float32; float64 is selected per tensor and is used
by all verification oracles. Complex tensors mirror the real dtype
(complex64/complex128). Gradients of complex tensors follow the real-pair
convention: ``grad = dL/d(re) + 1j * dL/d(im)``.
"""

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible; message carries a dimension report."""


class TapeError(RuntimeError):
    """Misuse of the tape (e.g. backward on a non-scalar or detached tensor)."""


DEFAULT_DTYPE = np.float32

_COMPLEX_OF = {np.dtype(np.float32): np.complex64, np.dtype(np.float64): np.complex128}
_REAL_OF = {np.dtype(np.complex64): np.float32, np.dtype(np.complex128): np.float64}


class Tensor:
    """Real-valued dense tensor."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        t = Tensor(self.data)
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class ComplexTensor:
    """Complex-valued dense tensor (spectral-domain intermediate)."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.complex64, np.complex128):
            self.data = self.data.astype(_COMPLEX_OF[np.dtype(DEFAULT_DTYPE)])
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def real(self):
        return self.data.real

    @property
    def imag(self):
        return self.data.imag

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"ComplexTensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Topologically ordered record of primitive applications."""

    def __init__(self):
        self.nodes = []

    def record(self, name, inputs, output, backward_fn):
        node = TapeNode(name, inputs, output, backward_fn)
        output.node = node
        self.nodes.append(node)

    def clear(self):
        for node in self.nodes:
            node.output.node = None
        self.nodes.clear()

    def activation_bytes(self):
        """Bytes held alive by recorded outputs (activation footprint)."""
        return sum(n.output.data.nbytes for n in self.nodes)


_tape = Tape()
_grad_enabled = True


def active_tape():
    return _tape


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def tracked(t):
    """True when t participates in gradient computation."""
    return t.requires_grad or t.node is not None


def record(name, inputs, output, backward_fn):
    """Record a primitive application if gradients flow through it."""
    if _grad_enabled and any(tracked(t) for t in inputs):
        _tape.record(name, inputs, output, backward_fn)
    return output


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The tape is consumed: a second backward needs a fresh forward pass.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a real scalar Tensor")
    if loss.data.size != 1:
        raise TapeError(f"backward expects a scalar, got shape {loss.shape}")
    if loss.node is None:
        raise TapeError("loss is detached from the active tape")

    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}

    for node in reversed(_tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not tracked(t):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = t

    for key, t in holders.items():
        if t.requires_grad and key in grads:
            g = grads[key]
            if isinstance(t, Tensor):
                g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            if t.grad is None:
                t.grad = g
            else:
                t.grad = t.grad + g

    _tape.clear()


def reset_tape():
    _tape.clear()
