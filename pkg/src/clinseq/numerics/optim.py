"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epsilon: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params, **kw):
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **kw,
        )


@dataclass
class AdamW:
    params: list
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epsilon: float = 1e-8
    # only tensors with ndim >= 2 are decayed
    decay_mask: list = field(default=None)
    state: OptimizerState = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = OptimizerState.for_params(
                self.params, beta1=self.beta1, beta2=self.beta2,
                weight_decay=self.weight_decay, epsilon=self.epsilon)
        if self.decay_mask is None:
            self.decay_mask = [p.data.ndim >= 2 for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        return adamw_step(self.params, grads, self.state, lr, self.decay_mask)


def adamw_step(params, grads, state, lr, decay_mask=None):
    """One AdamW update in place. Returns False (and leaves params untouched)
    when any gradient is non-finite."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if len(params) != len(state.first_moment):
        raise ValueError("optimizer state does not match parameter list")
    for p, m in zip(params, state.first_moment):
        if p.data.shape != m.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter shape {p.data.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return False

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        if decay_mask is None or decay_mask[i]:
            update = update + state.weight_decay * p.data
        p.data -= lr * update
    return True


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None)))


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            if g is not None:
                g *= scale
    return norm
