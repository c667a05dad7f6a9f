"""Adam, the step learning-rate schedule, and batch normalization state."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, batch_norm_op


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray] | None = None,
              lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient counts
    as zero. Raises if any gradient is non-finite, before touching anything.
    """
    lr = state.lr if lr is None else lr
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    resolved = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        resolved[name] = g

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = resolved[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_at(epoch: int, base: float = 0.01, factor: float = 0.5, every: int = 50) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * factor ** (epoch // every)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(dim), requires_grad=True),
            beta=Tensor(np.zeros(dim), requires_grad=True),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Column-wise batch normalization.

    Training mode uses the batch mean and biased variance and updates the
    running statistics (unbiased variance, as in most frameworks); eval mode
    uses the running statistics.
    """
    if x.value.ndim != 2 or x.shape[1] != state.gamma.shape[0]:
        raise ValueError(f"batch_norm: expected (rows, {state.gamma.shape[0]}), got {x.shape}")
    if training:
        n = x.shape[0]
        if n < 2:
            raise ValueError("batch_norm: training mode needs at least 2 rows")
        mu = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var * n / (n - 1)
        return batch_norm_op(x, state.gamma, state.beta, mu, var, state.eps, batch_stats=True)
    return batch_norm_op(x, state.gamma, state.beta, state.running_mean, state.running_var,
                         state.eps, batch_stats=False)
