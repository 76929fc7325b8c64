"""Adam, and the epoch loop that drives objective minimization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int | None = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 or None (full batch)")

    def replace(self, **kw) -> "OptimizerConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(state: AdamState, grad, cfg: OptimizerConfig):
    """One bias-corrected Adam update. Returns ``(new_state, delta)``."""
    grad = np.asarray(grad, dtype=np.float64)
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    delta = -cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
    return AdamState(m, v, t), delta


class NonFiniteObjective(FloatingPointError):
    pass


@dataclass
class OptimizeResult:
    x: np.ndarray
    initial_value: float
    final_value: float
    history: list[float] = field(default_factory=list)
    steps: int = 0


def minimize(objective_fn, grad_fn, init, cfg: OptimizerConfig, n_items: int | None = None,
             key=()) -> OptimizeResult:
    """Minimize with Adam over epochs of shuffled minibatches.

    Parameters
    ----------
    objective_fn : callable ``(x) -> float``
        Full objective; evaluated at the start and at the end only.
    grad_fn : callable ``(x, idx, epoch) -> (batch_value, grad)``
        Minibatch value and gradient. ``idx`` is ``None`` for a full batch.
        Stochastic pieces inside must be keyed on ``epoch`` so that every
        minibatch of an epoch sees the same noise.
    init : ndarray
    n_items : int, optional
        Number of data items to shuffle. ``None`` or ``cfg.batch_size=None``
        means one full-batch step per epoch.
    key : tuple of int
        Extra entropy for the shuffling stream, on top of ``cfg.seed``.

    ``history`` holds, per epoch, the average of the minibatch objective values
    seen along the trajectory.
    """
    x = np.array(init, dtype=np.float64)
    f0 = float(objective_fn(x))
    if not np.isfinite(f0):
        raise NonFiniteObjective(f"objective is {f0} at the initial point")
    result = OptimizeResult(x=x, initial_value=f0, final_value=f0)
    if cfg.epochs == 0:
        return result
    state = AdamState.zeros(x.shape)
    rng = np.random.default_rng([cfg.seed, *key])
    full = n_items is None or cfg.batch_size is None or cfg.batch_size >= n_items
    for epoch in range(cfg.epochs):
        if full:
            batches = [None]
        else:
            order = rng.permutation(n_items)
            batches = [order[lo:lo + cfg.batch_size] for lo in range(0, n_items, cfg.batch_size)]
        total = 0.0
        for idx in batches:
            value, grad = grad_fn(x, idx, epoch)
            if not (np.isfinite(value) and np.all(np.isfinite(grad))):
                raise NonFiniteObjective(
                    f"non-finite objective or gradient at epoch {epoch}, step {result.steps}"
                )
            state, delta = adam_step(state, grad, cfg)
            x = x + delta
            total += value
            result.steps += 1
        result.history.append(total / len(batches))
    result.x = x
    result.final_value = float(objective_fn(x))
    if not np.isfinite(result.final_value):
        raise NonFiniteObjective("objective is not finite at the returned point")
    if result.final_value > result.initial_value + 1e-3:
        log.warning("objective increased during optimization: %.6g -> %.6g",
                    result.initial_value, result.final_value)
    return result
