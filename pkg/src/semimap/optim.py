"""Adam with a warm-up-then-decay learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""

    def __init__(self, what: str):
        super().__init__(f"non-finite value in {what}")
        self.what = what


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3.3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.04
    batch: int = 64

    def __post_init__(self):
        for k in ("lr", "beta1", "beta2", "eps", "decay", "batch"):
            v = getattr(self, k)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{k} must be positive, got {v}")
        if self.beta1 >= 1 or self.beta2 >= 1:
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch % 4:
            raise ValueError(f"batch must be divisible by 4, got {self.batch}")


def lr_scale(epoch: int, decay: float = 0.04) -> float:
    """Multiplier on the base rate: 0.33^(2 - e//2) for the first four epochs,
    exp(-decay * e) afterwards."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch < 4:
        return 0.33 ** (2 - epoch // 2)
    return math.exp(-decay * epoch)


def lr_at(epoch: int, cfg: OptimConfig = OptimConfig()) -> float:
    return cfg.lr * lr_scale(epoch, cfg.decay)


class Adam:
    """Adam over a named collection of leaf tensors.

    Moments are kept per parameter name so the state can be checkpointed
    next to the weights.
    """

    def __init__(self, params: dict, cfg: OptimConfig = OptimConfig()):
        self.params = dict(params)
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        # validate every gradient before touching any parameter
        for k, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"gradient of {k}")
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + c.eps)

    def state_entries(self, prefix: str):
        """Moments as ``(network, layer, array)`` checkpoint rows, plus the step count."""
        yield prefix, "t", np.array([self.t], dtype=np.float64)
        for k in self.params:
            yield prefix, f"m:{k}", self.m[k]
            yield prefix, f"v:{k}", self.v[k]

    def load_entries(self, entries) -> None:
        for _, layer, arr in entries:
            if layer == "t":
                self.t = int(arr.reshape(-1)[0])
                continue
            kind, key = layer.split(":", 1)
            target = self.m if kind == "m" else self.v
            if key not in target:
                raise KeyError(f"optimizer state for unknown parameter {key}")
            target[key][...] = arr.reshape(target[key].shape)
