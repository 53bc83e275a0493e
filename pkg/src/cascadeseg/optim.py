"""Momentum SGD on a norm-normalised, multi-batch gradient with a loss-driven
learning-rate schedule."""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    mu: float = 0.9
    n_batches: int = 10
    alpha_init: float = 0.25
    alpha_min: float = 0.001
    window: int = 200
    d_loss: float = 0.98

    def __post_init__(self):
        if not 0.0 <= self.mu < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.mu}")
        if self.n_batches < 1:
            raise ValueError(f"batches per iteration must be >= 1, got {self.n_batches}")
        if not 0.0 < self.alpha_min <= self.alpha_init:
            raise ValueError(f"need 0 < alpha_min <= alpha_init, got {self.alpha_min}, {self.alpha_init}")
        if self.window < 2 or self.window % 2:
            raise ValueError(f"schedule window must be an even integer >= 2, got {self.window}")
        if not 0.0 < self.d_loss < 1.0:
            raise ValueError(f"d_loss must lie in (0, 1), got {self.d_loss}")


@dataclass
class OptimizerState:
    v: np.ndarray
    mu: float
    alpha: float
    alpha_init: float
    alpha_min: float
    n_batches: int
    window: int
    d_loss: float
    loss_history: deque = field(default_factory=deque)
    consecutive_insufficient: int = 0
    since_check: int = 0
    iteration: int = 0

    @classmethod
    def create(cls, n_params: int, config: OptimizerConfig | None = None, dtype=np.float64):
        c = config or OptimizerConfig()
        return cls(v=np.zeros(n_params, dtype=dtype), mu=c.mu, alpha=c.alpha_init,
                   alpha_init=c.alpha_init, alpha_min=c.alpha_min, n_batches=c.n_batches,
                   window=c.window, d_loss=c.d_loss, loss_history=deque(maxlen=c.window))


def accumulate_gradient(batches: Sequence, grad_fn: Callable) -> tuple[float, np.ndarray]:
    """Sum (not mean) of per-batch losses and gradients.

    ``grad_fn(batch)`` returns ``(loss, flat_gradient)``. Batches are reduced
    in the given order so the result is reproducible.
    """
    if len(batches) < 1:
        raise ValueError("need at least one batch")
    total_loss = 0.0
    total = None
    for i, batch in enumerate(batches):
        loss, g = grad_fn(batch)
        g = np.asarray(g)
        if not np.isfinite(g).all() or not np.isfinite(loss):
            raise FloatingPointError(f"non-finite gradient or loss in batch {i}")
        total = g.copy() if total is None else total + g
        total_loss += float(loss)
    return total_loss, total


def step(state: OptimizerState, gradient: np.ndarray, parameters: np.ndarray) -> tuple[np.ndarray, OptimizerState]:
    """v <- mu*v - alpha*g/||g||, theta <- theta + v.

    A zero gradient leaves both the parameters and the update vector alone.
    """
    gradient = np.asarray(gradient, dtype=state.v.dtype)
    norm = float(np.linalg.norm(gradient))
    if norm == 0.0:
        warnings.warn("zero gradient norm; update skipped", RuntimeWarning, stacklevel=2)
        return parameters, state
    state.v = state.mu * state.v - state.alpha * (gradient / norm)
    return parameters + state.v.astype(parameters.dtype, copy=False), state


def schedule_update(state: OptimizerState, iteration_loss: float) -> OptimizerState:
    """Record one iteration's loss and apply the windowed decay rule.

    Every ``window`` iterations the mean of the last half-window is compared
    with the mean of the half-window before it. Insufficient decrease halves
    the learning rate (floored at ``alpha_min``); two in a row double the
    window.
    """
    if state.loss_history.maxlen is None or state.loss_history.maxlen < state.window:
        state.loss_history = deque(state.loss_history, maxlen=state.window)
    state.loss_history.append(float(iteration_loss))
    state.iteration += 1
    state.since_check += 1
    if state.since_check < state.window or len(state.loss_history) < state.window:
        return state
    state.since_check = 0
    hist = list(state.loss_history)[-state.window:]
    half = state.window // 2
    previous = float(np.mean(hist[:half]))
    current = float(np.mean(hist[half:]))
    if current > state.d_loss * previous:
        state.alpha = max(state.alpha / 2, state.alpha_min)
        state.consecutive_insufficient += 1
        logger.debug("iteration %d: insufficient decrease, alpha=%g", state.iteration, state.alpha)
        if state.consecutive_insufficient >= 2:
            state.window *= 2
            state.consecutive_insufficient = 0
            state.loss_history = deque(state.loss_history, maxlen=state.window)
    else:
        state.consecutive_insufficient = 0
    return state


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a).ravel() for a in arrays])


def unflatten(vector: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for a in like:
        out.append(vector[pos:pos + a.size].reshape(a.shape).astype(a.dtype, copy=False))
        pos += a.size
    if pos != vector.size:
        raise ValueError(f"vector of size {vector.size} does not match {pos} parameters")
    return out
