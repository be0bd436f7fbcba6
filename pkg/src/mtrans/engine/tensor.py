"""Tensor carrier and the gradient tape.

A ``Tensor`` wraps a numpy array. Leaves that need gradients are created
through ``Tape.param``; every op whose inputs live on a tape appends one
record to it, and ``backward`` replays the records in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False, tape: Optional["Tape"] = None,
                 node_id: Optional[int] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Record:
    op: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Op log for one forward pass. Confined to a single thread."""

    dtype: type = np.float64
    records: list[Record] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)
    _next_id: int = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise TapeError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, tape=self,
                   node_id=self._new_id())
        self.params[name] = t
        return t

    def bind(self, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.param(k, v) for k, v in params.items()}

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray,
               vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
        node = Tensor(out, requires_grad=True, tape=self, node_id=self._new_id())
        ids = tuple(t.node_id if (t.tape is self and t.requires_grad) else -1 for t in inputs)
        self.records.append(Record(op, ids, node.node_id, vjp))
        return node


def tape_of(*tensors: Tensor) -> Optional[Tape]:
    """The single tape shared by the differentiable inputs, or None."""
    found = None
    for t in tensors:
        if t.requires_grad and t.tape is not None:
            if found is None:
                found = t.tape
            elif t.tape is not found:
                raise TapeError("inputs belong to different tapes")
    return found


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` for every registered parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.tape is tape and loss.requires_grad:
        grads[loss.node_id] = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        for nid, gi in zip(rec.inputs, rec.vjp(g)):
            if nid < 0 or gi is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    out = {}
    for name, p in tape.params.items():
        g = grads.get(p.node_id)
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return out
