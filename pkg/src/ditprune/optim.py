"""Adam with decoupled weight decay, gradient clipping, EMA, and LR schedules.

Adam keeps its moments in flat buffers and pins each parameter's .grad to a
view into one flat gradient buffer, so a step costs a handful of vectorized
calls instead of per-parameter ones.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """AdamW-style optimizer over a list of parameter tensors."""

    def __init__(self, params: list[Tensor], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        total = sum(p.size for p in self.params)
        self.flat_grad = np.zeros(total)
        self.m = np.zeros(total)
        self.v = np.zeros(total)
        self._views = []
        off = 0
        for p in self.params:
            self._views.append((p, off, off + p.size))
            off += p.size
        self.zero_grad()

    def zero_grad(self) -> None:
        """Reset gradients; re-pins every param's grad to its flat view."""
        self.flat_grad.fill(0.0)
        for p, lo, hi in self._views:
            p.grad = self.flat_grad[lo:hi].reshape(p.shape)

    def grad_norm_sq(self) -> float:
        return float(self.flat_grad @ self.flat_grad)

    def scale_grads(self, factor: float) -> None:
        self.flat_grad *= factor

    def step(self) -> None:
        if not self.params:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        g = self.flat_grad
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * g * g
        denom = np.sqrt(self.v / (1.0 - b2 ** self.t))
        denom += self.eps
        update = self.m / (1.0 - b1 ** self.t)
        update /= denom
        step_size = self.lr
        for p, lo, hi in self._views:
            if self.weight_decay != 0.0:
                p.data -= step_size * self.weight_decay * p.data
            p.data -= step_size * update[lo:hi].reshape(p.shape)


def clip_grad_groups(optimizers: list[Adam], max_norm: float) -> float:
    """Jointly clip the global grad norm across several optimizers' params."""
    total = sum(opt.grad_norm_sq() for opt in optimizers)
    norm = float(np.sqrt(total))
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for opt in optimizers:
            opt.scale_grads(factor)
    return norm


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale raw .grad arrays in place so their global L2 norm <= max_norm."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float((g.reshape(-1) @ g.reshape(-1)))
    norm = float(np.sqrt(total))
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads:
            g *= factor
    return norm


class EMA:
    """Exponential moving average of named parameters."""

    def __init__(self, named_params: list[tuple[str, Tensor]], decay: float = 0.999):
        self.decay = decay
        self.shadow = {name: p.data.copy() for name, p in named_params}

    def update(self, named_params: list[tuple[str, Tensor]]) -> None:
        d = self.decay
        for name, p in named_params:
            s = self.shadow[name]
            s *= d
            s += (1.0 - d) * p.data


def halving_lr(base_lr: float, step: int, total_steps: int, halvings: int = 4) -> float:
    """Progressively halve the learning rate at evenly spaced milestones."""
    if halvings <= 0 or total_steps <= 0:
        return base_lr
    interval = total_steps / (halvings + 1)
    passed = min(halvings, int(step / interval))
    return base_lr * (0.5 ** passed)
