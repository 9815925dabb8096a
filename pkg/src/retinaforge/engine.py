"""Tensor values, the gradient tape, parameter storage, and Adam.

Tensors are numpy arrays in channels-last layout: network activations are
(batch, height, width, channels). float32 is the working precision; float64
is accepted so the finite-difference suite can run the same code paths at
higher precision.
"""

import numpy as np

from .errors import ConfigError, StateError

_SUPPORTED = (np.float32, np.float64)


class Tensor:
    """A value node: array data plus a gradient slot filled by backward()."""

    __slots__ = ("data", "grad", "watched", "_store")

    def __init__(self, data, dtype=None, watched=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _SUPPORTED:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.watched = watched
        self._store = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


_tape_stack: list = []


def active_tape():
    return _tape_stack[-1] if _tape_stack else None


class _Record:
    __slots__ = ("out", "inputs", "back")

    def __init__(self, out, inputs, back):
        self.out = out
        self.inputs = inputs
        self.back = back


class Tape:
    """Ordered log of executed ops, replayed in reverse by backward().

    Use as a context manager around a forward pass; ops executed while the
    tape is active record themselves. A tape is single-use.
    """

    __slots__ = ("_records", "_consumed")

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()
        return False

    def record(self, out, inputs, back):
        self._records.append(_Record(out, inputs, back))


def record_op(out, inputs, back):
    """Register an op on the active tape, if any.

    ``back`` maps the output gradient to one gradient (or None) per input;
    returned arrays must be owned by the caller side (no views into the
    output gradient). Recording is skipped when no input is watched, which
    prunes dead branches such as targets and eval-mode graphs.
    """
    tape = active_tape()
    if tape is None:
        return out
    if any(t is not None and t.watched for t in inputs):
        out.watched = True
        tape.record(out, inputs, back)
    return out


def backward(tape, loss):
    """Propagate d(loss)/d(·) to every watched tensor on the tape.

    Gradients accumulate into ``Tensor.grad`` (parameter tensors keep their
    persistent buffers). The tape is consumed; reuse raises StateError.
    """
    if not isinstance(loss, Tensor):
        raise StateError("loss must be a Tensor produced by a recorded forward pass")
    if tape._consumed:
        raise StateError("tape already consumed by backward; run a new forward pass")
    if not tape._records:
        raise StateError("backward called without a recorded forward pass")
    if not any(rec.out is loss for rec in tape._records):
        raise StateError("loss was not produced while this tape was active")
    tape._consumed = True

    loss.grad = np.ones_like(loss.data)
    borrowed = set()  # tensors whose grad is a read-only view; copy before accumulating
    for rec in reversed(tape._records):
        gout = rec.out.grad
        if gout is None:
            continue
        grads = rec.back(gout)
        for tin, gin in zip(rec.inputs, grads):
            if tin is None or gin is None or not tin.watched:
                continue
            if tin.grad is None:
                tin.grad = gin
                if gin.base is not None:
                    borrowed.add(id(tin))
            elif id(tin) in borrowed:
                tin.grad = tin.grad + gin
                borrowed.discard(id(tin))
            else:
                np.add(tin.grad, gin, out=tin.grad)
            if tin._store is not None:
                tin._store._grads_ready = True


class _Entry:
    __slots__ = ("tensor", "m", "v")

    def __init__(self, tensor):
        self.tensor = tensor
        self.m = np.zeros_like(tensor.data)
        self.v = np.zeros_like(tensor.data)


class ParamStore:
    """Named trainable parameters with their Adam state and a shared step count."""

    def __init__(self):
        self._entries: dict[str, _Entry] = {}
        self.t = 0
        self._grads_ready = False

    def add(self, name, value):
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        tensor = Tensor(value, watched=True)
        tensor.grad = np.zeros_like(tensor.data)
        tensor._store = self
        self._entries[name] = _Entry(tensor)
        return tensor

    def tensor(self, name):
        return self._entries[name].tensor

    def names(self):
        return list(self._entries)

    def items(self):
        return [(name, e.tensor) for name, e in self._entries.items()]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def size(self):
        """Total number of trainable scalars."""
        return sum(e.tensor.data.size for e in self._entries.values())

    def zero_grads(self):
        for e in self._entries.values():
            e.tensor.grad.fill(0)
        self._grads_ready = False

    def set_values(self, named_arrays):
        """Overwrite parameter values in place (e.g. when loading an archive)."""
        for name, arr in named_arrays.items():
            t = self._entries[name].tensor
            if t.data.shape != arr.shape:
                raise ConfigError(
                    f"parameter {name!r} has shape {t.data.shape}, got {arr.shape}"
                )
            t.data[...] = arr


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over every entry; zeroes gradients afterwards."""
    if not store._grads_ready:
        raise StateError("adam_step called with no gradients; run backward first")
    store.t += 1
    t = store.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for entry in store._entries.values():
        g = entry.tensor.grad
        entry.m *= beta1
        entry.m += (1.0 - beta1) * g
        entry.v *= beta2
        entry.v += (1.0 - beta2) * np.square(g)
        mhat = entry.m / bc1
        vhat = entry.v / bc2
        entry.tensor.data -= lr * mhat / (np.sqrt(vhat) + eps)
    store.zero_grads()
