"""RMSProp with decoupled weight decay, LR schedules, and EMA shadows."""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional

import numpy as np

from .tensor import Tensor

__all__ = ["constant_lr", "linear_lr", "RMSProp", "EMA", "ema_update"]


def constant_lr(lr: float) -> Callable[[int], float]:
    return lambda step: lr


def linear_lr(start: float, end: float, total_steps: int) -> Callable[[int], float]:
    """Linear interpolation from ``start`` at step 0 to ``end`` at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")

    def schedule(step: int) -> float:
        frac = min(max(step, 0), total_steps) / total_steps
        return start + (end - start) * frac

    return schedule


class RMSProp:
    """RMSProp: v <- rho*v + (1-rho)*g^2; p <- p - lr*g/(sqrt(v)+eps).

    Decoupled weight decay shrinks the parameter by lr*lambda*p *before*
    the gradient update, and only for parameters whose name passes
    ``decay_filter`` (convolution/dense kernels by convention; biases,
    normalization parameters and mixture logits are exempt).
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float | Callable[[int], float] = 0.02,
        rho: float = 0.9,
        eps: float = 1e-7,
        weight_decay: float = 0.0,
        decay_filter: Optional[Callable[[str], bool]] = None,
    ):
        self.params: Dict[str, Tensor] = dict(params)
        self.schedule = lr if callable(lr) else constant_lr(lr)
        self.rho = rho
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter if decay_filter is not None else (lambda name: True)
        self.step_count = 0
        self.v: Dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params.items()
        }

    def current_lr(self) -> float:
        return self.schedule(self.step_count)

    def step(self) -> float:
        """Apply one update from the accumulated ``.grad`` fields; returns the lr used."""
        lr = self.schedule(self.step_count)
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter "
                                 f"{name} of shape {p.data.shape}")
            if self.weight_decay and self.decay_filter(name):
                p.data -= lr * self.weight_decay * p.data
            v = self.v[name]
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            p.data -= lr * g / (np.sqrt(v) + self.eps)
        self.step_count += 1
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def ema_update(params: Mapping[str, Tensor], shadows: Dict[str, np.ndarray], decay: float) -> None:
    """shadow <- decay*shadow + (1-decay)*param, in place."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
    for name, p in params.items():
        s = shadows[name]
        s *= decay
        s += (1.0 - decay) * p.data


class EMA:
    """Exponential moving averages of trained variables, used for inference.

    Shadows are initialized to exact copies of the parameters.
    """

    def __init__(self, params: Mapping[str, Tensor], decay: float = 0.99):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.params: Dict[str, Tensor] = dict(params)
        self.shadows: Dict[str, np.ndarray] = {
            name: p.data.copy() for name, p in self.params.items()
        }

    def update(self) -> None:
        ema_update(self.params, self.shadows, self.decay)

    def swap_in(self) -> Dict[str, np.ndarray]:
        """Replace parameter values by shadows; returns the saved originals."""
        saved = {}
        for name, p in self.params.items():
            saved[name] = p.data
            p.data = self.shadows[name].copy()
        return saved

    def swap_out(self, saved: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = saved[name]

    def bake(self) -> None:
        """Overwrite parameters with their shadows (used at phase boundaries)."""
        for name, p in self.params.items():
            p.data = self.shadows[name].copy()

    class _Swapped:
        def __init__(self, ema: "EMA"):
            self.ema = ema
            self.saved = None

        def __enter__(self):
            self.saved = self.ema.swap_in()
            return self.ema

        def __exit__(self, exc_type, exc, tb):
            self.ema.swap_out(self.saved)

    def averaged(self) -> "_Swapped":
        """Context manager that evaluates under the shadow values."""
        return EMA._Swapped(self)
