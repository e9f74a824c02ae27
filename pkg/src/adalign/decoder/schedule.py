"""Which decoder layers carry adapter tokens.

Layers are 1-indexed.  Layer 1 is reserved for the context tokens, so no
strategy ever places an adapter there.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..numerics.tensor import ConfigError

STRATEGIES = ("barbell", "early_fusion", "pyramid", "hammer")
_ALIASES = {"early": "early_fusion"}


@dataclass(frozen=True)
class AdapterSchedule:
    strategy: str
    n_layers: int
    n_front: int
    n_end: int
    layers: frozenset

    def has_adapter(self, layer: int) -> bool:
        return layer in self.layers

    @property
    def sorted_layers(self) -> list[int]:
        return sorted(self.layers)

    def describe(self) -> dict:
        return {"strategy": self.strategy, "n_layers": self.n_layers, "n_front": self.n_front,
                "n_end": self.n_end, "layers": self.sorted_layers}

    @classmethod
    def from_description(cls, d: dict) -> "AdapterSchedule":
        s = make_schedule(d["strategy"], d["n_layers"], d["n_front"], d["n_end"])
        if s.sorted_layers != list(d["layers"]):
            raise ConfigError(f"schedule layers {d['layers']} do not match strategy {d['strategy']}")
        return s


def make_schedule(strategy: str, n_layers: int, n_front: int = 0, n_end: int = 0) -> AdapterSchedule:
    strategy = _ALIASES.get(strategy, strategy)
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown adapter strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if n_layers < 2:
        raise ConfigError(f"need at least 2 decoder layers, got {n_layers}")
    if n_front < 0 or n_end < 0:
        raise ConfigError("n_front and n_end must be nonnegative")

    front = set(range(2, n_front + 2))
    end = set(range(n_layers - n_end + 1, n_layers + 1))
    if strategy == "barbell":
        clash = sorted(front & end)
        if clash:
            raise ConfigError(f"front and end adapter ranges overlap at layers {clash}")
        if 1 in end:
            raise ConfigError("end adapter range reaches layer 1, which is reserved for context")
        if n_front + 1 > n_layers:
            raise ConfigError(f"front range [2, {n_front + 1}] exceeds {n_layers} layers")
        layers = front | end
    elif strategy == "early_fusion":
        layers = set(range(2, n_layers + 1))
    elif strategy == "pyramid":
        if n_front + 1 > n_layers:
            raise ConfigError(f"front range [2, {n_front + 1}] exceeds {n_layers} layers")
        layers = front
    else:
        if n_end > n_layers - 1:
            raise ConfigError(f"{n_end} end layers do not fit beside layer 1 in {n_layers} layers")
        layers = end
    return AdapterSchedule(strategy, n_layers, n_front, n_end, frozenset(layers))
