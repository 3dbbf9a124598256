"""Dense tensors, the recording tape and reverse-mode differentiation.

Every differentiable op produces a new :class:`Tensor`. When a :class:`Tape`
is active and at least one input requires a gradient, the op appends a record
(inputs, output, backward rule) to the tape. :func:`backward` then walks the
tape once, in reverse, accumulating gradients into leaf tensors.

    with Tape() as tape:
        loss = model.loss(batch)
    backward(loss, tape)
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "apply_op",
    "get_default_dtype",
    "set_default_dtype",
    "precision",
    "NonFiniteError",
    "TapeError",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype: type = np.float32


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


class TapeError(RuntimeError):
    """Misuse of a tape, e.g. a second backward pass over the same recording."""


def get_default_dtype():
    return _default_dtype


def set_default_dtype(mode: str) -> None:
    """Select the precision used for new tensors and parameters: ``"f32"`` or ``"f64"``."""
    global _default_dtype
    try:
        _default_dtype = _DTYPES[mode]
    except KeyError:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_DTYPES)}") from None


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    previous = _default_dtype
    set_default_dtype(mode)
    try:
        yield
    finally:
        globals()["_default_dtype"] = previous


class Tensor:
    """A dense array of at most four axes with an optional gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim > 4:
            raise ValueError(f"tensors have at most 4 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # Arithmetic sugar; the op functions live in prfnet.ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, _as_tensor(other, self))

    def __radd__(self, other):
        from . import ops

        return ops.add(_as_tensor(other, self), self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=like.dtype), like.shape).copy())


class Parameter(Tensor):
    """A trainable tensor with a dotted name and a freeze flag.

    A frozen parameter reports ``requires_grad = False`` so ops neither record
    it nor produce a gradient for it.
    """

    def __init__(self, data, name: str = "", frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self._frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


class _Record:
    __slots__ = ("out", "inputs", "rule", "ctx")

    def __init__(self, out, inputs, rule, ctx):
        self.out = out
        self.inputs = inputs
        self.rule = rule
        self.ctx = ctx


_active_tapes: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops.

    Records are appended as ops execute, so the list is already in
    topological order. A tape can be replayed backward exactly once; call
    :meth:`reset` to reuse the object for a fresh recording.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._produced: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape was already consumed by backward(); call reset() first")
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()
        self._produced.clear()
        self.consumed = False

    def record(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable, ctx) -> None:
        self.records.append(_Record(out, tuple(inputs), rule, ctx))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward was already run on this tape; re-record the forward pass")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            grads = rec.rule(rec.ctx, g)
            for t, gi in zip(rec.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in self._produced:
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        self.records.clear()
        self._produced.clear()


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf reached from ``loss`` through ``tape``."""
    tape.backward(loss)


def apply_op(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable, ctx=None) -> Tensor:
    """Wrap an op result, validate it and record it on the active tape.

    ``rule(ctx, grad_out)`` must return one gradient (or ``None``) per input.
    """
    if not np.isfinite(np.add.reduce(data, axis=None)):
        raise NonFiniteError(f"non-finite values produced by {getattr(rule, '__name__', rule)}")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs and _active_tapes:
        _active_tapes[-1].record(out, inputs, rule, ctx)
    return out
