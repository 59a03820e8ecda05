"""Caffe-convention SGD with momentum and weight decay, and the poly schedule."""
from dataclasses import dataclass

import numpy as np


@dataclass
class ScheduleSpec:
    base_lr: float = 0.001
    max_iter: int = 80000
    power: float = 0.9


def poly_lr(iteration, spec):
    """base_lr * (1 - iter / max_iter) ** power."""
    if not 0 <= iteration <= spec.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {spec.max_iter}]")
    return spec.base_lr * (1.0 - iteration / spec.max_iter) ** spec.power


class NonFiniteGradient(FloatingPointError):
    pass


class SGD:
    """v <- momentum * v - lr * (g + weight_decay * w);  w <- w + v"""

    def __init__(self, params, momentum=0.9, weight_decay=0.0005):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.data) for name, p in params}
        self.iteration = 0

    def step(self, lr):
        grads = {}
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
            grads[name] = g
        dt = np.float32
        for name, p in self.params:
            dt = p.data.dtype.type
            v = self.buffers[name]
            v *= dt(self.momentum)
            v -= dt(lr) * (grads[name] + dt(self.weight_decay) * p.data)
            p.data += v
        self.iteration += 1

    def state_arrays(self):
        return {f"momentum/{k}": v for k, v in self.buffers.items()}

    def load_arrays(self, arrays, iteration):
        for k in self.buffers:
            self.buffers[k][...] = arrays[f"momentum/{k}"]
        self.iteration = iteration


def sgd_step(w, g, v, lr, momentum=0.9, weight_decay=0.0005):
    """Functional form of one update on plain arrays; returns (w', v')."""
    v = momentum * v - lr * (g + weight_decay * w)
    return w + v, v
