"""Tensor container and reverse-mode differentiation over a recorded tape.

Every op in :mod:`pssp.ops` returns a :class:`Tensor` whose ``parents`` and
``backward_fn`` describe how to push an upstream gradient back to its inputs.
Calling :func:`backward` on a scalar walks that graph once in reverse
topological order.
"""
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NonFiniteError

DEFAULT_DTYPE = np.float32


class Tensor:
    """Dense array plus the tape bookkeeping needed for backward.

    ``data`` is stored in the tensor's own dtype (float32 unless built
    otherwise); ops accumulate in float64 and cast back on output.
    """

    __slots__ = ("data", "name", "op", "parents", "backward_fn", "saved", "requires_grad")

    def __init__(self, data, name=None, dtype=None, op="leaf", parents=(), backward_fn=None,
                 requires_grad=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.name = name
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.saved = {}
        if requires_grad is None:
            # named leaves are parameters or probed inputs; anonymous leaves are data
            requires_grad = name is not None if not parents else any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(value, op, parents, backward_fn, dtype):
    """Wrap an op output, enforcing the finite-values invariant."""
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return Tensor(value.astype(dtype, copy=False), op=op, parents=parents, backward_fn=backward_fn)


def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss, params=None):
    """Return ``{name: d loss / d tensor}`` for every named leaf reachable from ``loss``.

    If ``params`` (a mapping of name to Tensor) is given, the result holds
    exactly those names and unreachable parameters get zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    named = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient flowing into {node.op}")
        if not node.requires_grad:
            continue
        if node.backward_fn is None:
            if node.name is not None:
                named[node.name] = g.astype(node.dtype, copy=False)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.asarray(pg, dtype=np.float64)
    if params is None:
        return named
    return {
        name: named[name] if name in named else np.zeros(p.shape, dtype=p.dtype)
        for name, p in params.items()
    }


@dataclass
class RngStream:
    """Counter-based random stream (Philox) keyed by a 64-bit seed.

    Draws depend only on ``(seed, counter)``, and ``fork`` derives an
    independent child stream from a string tag, so dropout masks do not
    depend on the order in which layers consume randomness.
    """

    seed: int
    counter: int = 0

    def _generator(self):
        bitgen = np.random.Philox(key=self.seed % (1 << 64), counter=self.counter)
        return np.random.Generator(bitgen)

    def uniform(self, shape):
        shape = tuple(shape)
        out = self._generator().random(shape)
        self.counter += max(1, int(np.prod(shape)))
        return out

    def normal(self, shape):
        # normal draws may consume a variable number of words; reserve 4 per value
        shape = tuple(shape)
        out = self._generator().standard_normal(shape)
        self.counter += max(1, 4 * int(np.prod(shape)))
        return out

    def integers(self, low, high, size):
        out = self._generator().integers(low, high, size=size)
        self.counter += max(1, 2 * int(np.prod(size)))
        return out

    def fork(self, *tags):
        key = [self.seed % (1 << 64)] + [zlib.crc32(str(t).encode("utf-8")) for t in tags]
        child = np.random.SeedSequence(key).generate_state(1, np.uint64)[0]
        return RngStream(int(child), 0)
