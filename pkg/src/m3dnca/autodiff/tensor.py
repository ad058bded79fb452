"""Reverse-mode automatic differentiation over float32 numpy arrays.

A Tensor is a thin identity wrapper around an ndarray. Operations that should
be differentiated are recorded on an explicit Tape; calling Tape.backward
replays the records in reverse and returns gradients keyed by tensor id.
Operations called without a tape run forward-only, which is how inference
reuses the exact training ops without paying for bookkeeping.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError

_ids = itertools.count()


class Tensor:
    """Float array with a unique identity for gradient bookkeeping.

    float32 is the working precision; float64 input stays float64, which
    lets verification code run the identical op graph at high precision.
    Gradients are always float32.
    """

    __slots__ = ("data", "tid")

    def __init__(self, data) -> None:
        arr = np.asarray(data)
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
        # asarray with order="C" keeps 0-d scalars 0-d, unlike ascontiguousarray.
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.tid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(id={self.tid}, shape={self.data.shape})"


class Tape:
    """Ordered record of differentiable operations.

    Each entry stores the participating tensor ids and a closure that maps
    the output gradient to input gradients. recorded_bytes and entry output
    sizes are tracked so callers can assert how much state a forward pass
    retains.
    """

    def __init__(self) -> None:
        self._entries: list[tuple[tuple[tuple[int, np.dtype], ...], int, Callable]] = []
        self.recorded_bytes = 0
        self.output_voxels: list[int] = []

    def __len__(self) -> int:
        return len(self._entries)

    def record(
        self,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
    ) -> None:
        """Register one op. backward(gout) returns one grad per input (or None)."""
        self._entries.append(
            (tuple((t.tid, t.data.dtype) for t in inputs), output.tid, backward)
        )
        self.recorded_bytes += output.data.nbytes
        self.output_voxels.append(output.data.size)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(tensor) for every tensor on the tape.

        Returns a dict from tensor id to gradient array. Gradients of entry
        outputs are dropped as soon as their producing entry has run, so the
        dict that remains holds only leaf tensors (parameters and inputs).
        """
        if loss.data.shape != ():
            raise ContractError("backward expects a scalar loss tensor")
        grads: dict[int, np.ndarray] = {loss.tid: np.ones((), dtype=loss.data.dtype)}
        produced = {out_id for _, out_id, _ in self._entries}
        for in_ids, out_id, backward in reversed(self._entries):
            gout = grads.pop(out_id, None)
            if gout is None:
                continue
            gins = backward(gout)
            if len(gins) != len(in_ids):
                raise ContractError("backward closure returned wrong arity")
            for (tid, dtype), g in zip(in_ids, gins):
                if g is None:
                    continue
                # Grads always carry the dtype of the tensor they belong to.
                g = np.asarray(g, dtype=dtype)
                if tid in grads:
                    grads[tid] = grads[tid] + g
                else:
                    grads[tid] = g
        grads.pop(loss.tid, None)
        for tid in list(grads):
            if tid in produced:
                # Output that nothing consumed; not a leaf, not useful.
                del grads[tid]
        return grads

    def max_output_voxels(self) -> int:
        return max(self.output_voxels, default=0)
