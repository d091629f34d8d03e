"""Concept memory (prompt tokens) and interaction memory (low-rank q/k/v updates)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..optim import ParamStore
from ..tensor import Tensor


@dataclass
class ConceptMemory:
    prompt: Tensor  # (P, d_model)

    @classmethod
    def init(cls, config, rng: np.random.Generator) -> "ConceptMemory":
        p = rng.normal(0.0, config.prompt_init_std, size=(config.prompt_length, config.d_model))
        return cls(Tensor(p))

    def copy(self) -> "ConceptMemory":
        return ConceptMemory(Tensor(self.prompt.data.copy()))

    @property
    def length(self) -> int:
        return self.prompt.shape[0]


@dataclass
class InteractionMemoryLayer:
    """One fusion layer's low-rank pairs: name -> (A (r, d), B (d, r))."""

    pairs: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.pairs.get(name)

    def copy(self) -> "InteractionMemoryLayer":
        return InteractionMemoryLayer({k: (Tensor(a.data.copy()), Tensor(b.data.copy()))
                                       for k, (a, b) in self.pairs.items()})


@dataclass
class InteractionMemory:
    layers: list  # InteractionMemoryLayer per memory-carrying fusion layer

    @classmethod
    def init(cls, config, rng: np.random.Generator) -> "InteractionMemory":
        r, d = config.lora_rank, config.d_model
        if r > d:
            raise ConfigError(f"lora_rank={r} exceeds d_model={d}")
        layers = []
        for _ in range(config.lora_layers):
            pairs = {}
            for name in config.lora_projections:
                a = rng.normal(0.0, 1.0 / r, size=(r, d))
                pairs[name] = (Tensor(a), Tensor(np.zeros((d, r))))
            layers.append(InteractionMemoryLayer(pairs))
        return cls(layers)

    def copy(self) -> "InteractionMemory":
        return InteractionMemory([layer.copy() for layer in self.layers])

    def num_params(self) -> int:
        return sum(a.data.size + b.data.size for layer in self.layers for a, b in layer.pairs.values())


def memory_params(theta_con: ConceptMemory | None, theta_inc: InteractionMemory | None,
                  train_con: bool = True, train_inc: bool = True) -> ParamStore:
    """Expose the memory tensors (shared, not copied) as a ParamStore for the optimizer."""
    store = ParamStore()
    if theta_con is not None:
        store.add("con.prompt", theta_con.prompt, trainable=train_con)
    if theta_inc is not None:
        for i, layer in enumerate(theta_inc.layers):
            for name, (a, b) in layer.pairs.items():
                store.add(f"inc.{i}.{name}.A", a, trainable=train_inc)
                store.add(f"inc.{i}.{name}.B", b, trainable=train_inc)
    return store
