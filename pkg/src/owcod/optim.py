"""Parameter store, AdamW with decoupled weight decay, cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class ParamStore:
    """Named parameters with a per-parameter trainable flag.

    ``requires_grad`` on each tensor mirrors its trainable flag, so frozen
    parameters never enter the tape as differentiable leaves.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = trainable
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._params[name].requires_grad = flag

    def freeze(self) -> None:
        for name in self._params:
            self.set_trainable(name, False)

    def trainable_names(self) -> list[str]:
        return [n for n, f in self._trainable.items() if f]

    def zero_grad(self) -> None:
        for name, t in self._params.items():
            t.grad = np.zeros_like(t.data) if self._trainable[name] else None

    def num_params(self, trainable_only: bool = False) -> int:
        return sum(t.data.size for n, t in self._params.items()
                   if not trainable_only or self._trainable[n])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def fingerprint(self) -> bytes:
        """Byte image of all parameter values in name order."""
        parts = []
        for n in sorted(self._params):
            parts.append(n.encode())
            parts.append(np.ascontiguousarray(self._params[n].data).tobytes())
        return b"".join(parts)


def cosine_lr(base_lr: float, step: int, horizon: int) -> float:
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``horizon``."""
    if horizon <= 0:
        return base_lr
    t = min(max(step, 0), horizon) / horizon
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    lr: float
    horizon: int
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        return cosine_lr(self.lr, self.step, self.horizon)


def adamw_step(store: ParamStore, state: OptimizerState) -> None:
    lr = state.current_lr()
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in store.trainable_names():
        p = store[name]
        if p.grad is None:
            raise ContractError(f"adamw_step: parameter {name!r} has no gradient")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step = t
