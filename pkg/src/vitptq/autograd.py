"""Dense tensors and a reverse-mode tape.

Tensors wrap a numpy array (float32 by default, float64 where a caller asks
for it) and never mutate it in place. Operations in :mod:`vitptq.ops` record
themselves on the innermost active :class:`Tape`; ``Tape.backward`` walks
the recorded nodes in reverse and returns a gradient table.

    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    grads = tape.backward(loss)
    grads[x]        # Tensor with the same shape as x
"""

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    """An n-dimensional float array that can participate in differentiation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"tensors hold float32 or float64, got {arr.dtype}")
        if not np.isfinite(arr).all():
            raise ValueError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        # internal constructor: no copy, no finiteness scan
        t = object.__new__(cls)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor._wrap(self.data, False)

    def astype(self, dtype, requires_grad=None):
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor._wrap(self.data.astype(dtype), rg)

    def assign(self, arr):
        """Rebind the payload (optimizer updates); the old array is left untouched."""
        arr = np.asarray(arr, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ValueError(f"assign shape {arr.shape} != {self.data.shape}")
        self.data = arr

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, o):
        from . import ops
        return ops.add(self, o)

    def __radd__(self, o):
        from . import ops
        return ops.add(o, self)

    def __sub__(self, o):
        from . import ops
        return ops.sub(self, o)

    def __rsub__(self, o):
        from . import ops
        return ops.sub(o, self)

    def __mul__(self, o):
        from . import ops
        return ops.mul(self, o)

    def __rmul__(self, o):
        from . import ops
        return ops.mul(o, self)

    def __truediv__(self, o):
        from . import ops
        return ops.div(self, o)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, o):
        from . import ops
        return ops.matmul(self, o)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


_tapes = []


class Tape:
    """Records primitive operations in execution order (hence topological)."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def record(self, out, parents, backward):
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss):
        """Gradients of scalar ``loss`` for every reachable tensor with requires_grad."""
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ValueError("backward needs a scalar loss tensor")
        on_tape = any(n.out is loss for n in self.nodes)
        if not on_tape and not loss.requires_grad:
            raise ValueError("loss was not produced on this tape")
        acc = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        seen = {id(loss): loss}
        for node in reversed(self.nodes):
            g = acc.get(id(node.out))
            if g is None:
                continue
            pgs = node.backward(g.astype(node.out.dtype, copy=False))
            for p, pg in zip(node.parents, pgs):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if pg.shape != p.shape:
                    pg = np.broadcast_to(pg, p.shape)
                if key in acc:
                    acc[key] = acc[key] + pg
                else:
                    acc[key] = np.array(pg, dtype=np.float64)
                    seen[key] = p
        table = Gradients()
        for key, t in seen.items():
            if t.requires_grad:
                table[t] = Tensor._wrap(acc[key].astype(t.dtype))
        return table


def backward(tape, loss):
    return tape.backward(loss)


class Gradients(dict):
    """Tensor -> gradient Tensor (keys hash by identity)."""

    def array(self, t, default=None):
        g = self.get(t)
        if g is None:
            return default
        return g.data


def active_tape():
    return _tapes[-1] if _tapes else None


class no_grad:
    """Suspend recording on every active tape."""

    def __enter__(self):
        self._saved = list(_tapes)
        _tapes.clear()
        return self

    def __exit__(self, *exc):
        _tapes.extend(self._saved)
        return False
