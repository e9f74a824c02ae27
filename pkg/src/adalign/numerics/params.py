"""Named parameter container with a frozen/trainable split."""
from __future__ import annotations

import hashlib
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered map ``name -> Tensor`` plus a trainable flag per name.

    Insertion order is kept so that checkpoints, parameter audits and hashes
    are reproducible.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        t = Tensor(arr, requires_grad=trainable, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._params[name].requires_grad = flag

    def freeze(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self.set_trainable(n, False)

    def unfreeze(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self.set_trainable(n, True)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def frozen_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if not t]

    def count(self, trainable: bool | None = None) -> int:
        return int(np.sum([t.data.size for n, t in self._params.items()
                           if trainable is None or self._trainable[n] == trainable]))

    def set_value(self, name: str, value: np.ndarray) -> None:
        """Replace a parameter's data (shape must match); resets its grad."""
        old = self._params[name]
        arr = np.asarray(value, dtype=self.dtype)
        if arr.shape != old.shape:
            raise ValueError(f"{name}: new shape {arr.shape} != {old.shape}")
        t = Tensor(arr.copy(), requires_grad=self._trainable[name], name=name)
        self._params[name] = t

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def digest(self, names=None) -> str:
        """sha256 over the raw bytes of the named parameters (all by default)."""
        h = hashlib.sha256()
        for n in (self._params if names is None else names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._params[n].data).tobytes())
        return h.hexdigest()

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, v in state.items():
            if n in self._params:
                self.set_value(n, v)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for n, t in self._params.items():
            out.add(n, t.data, self._trainable[n])
        return out
