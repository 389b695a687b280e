"""Adam with global-norm clipping, linear warm-up and a plateau scheduler."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    lr: float
    clip: float | None = None
    warmup: int = 500
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # plateau scheduler
    patience: int = 3
    factor: float = 0.6
    threshold: float = 0.01
    best: float = float("inf")
    bad_evals: int = 0
    skipped: int = 0

    @classmethod
    def create(cls, n_params: int, lr: float, clip: float | None = None, warmup: int = 500,
               dtype=np.float64, **kw) -> "OptimizerState":
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        return cls(np.zeros(n_params, dtype=dtype), np.zeros(n_params, dtype=dtype), float(lr), clip, warmup, **kw)

    def current_lr(self, step: int | None = None) -> float:
        """Learning rate applied at (1-based) update ``step``."""
        step = self.step + 1 if step is None else step
        if self.warmup and step < self.warmup:
            return self.lr * step / self.warmup
        return self.lr

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in (
            "lr", "clip", "warmup", "step", "beta1", "beta2", "eps", "patience",
            "factor", "threshold", "best", "bad_evals", "skipped")}


def clip_by_global_norm(grads: np.ndarray, threshold: float | None):
    norm = float(np.sqrt(np.sum(np.square(grads, dtype=np.float64))))
    if threshold is not None and norm > threshold:
        return grads * (threshold / norm), norm
    return grads, norm


def adam_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> bool:
    """Update ``params`` in place.  Returns False (and skips) on non-finite grads."""
    if not np.all(np.isfinite(grads)):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return False
    grads, _ = clip_by_global_norm(grads, state.clip)
    step = state.step + 1
    lr = state.current_lr(step)
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1**step)
    v_hat = state.v / (1 - b2**step)
    update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params -= update.astype(params.dtype)
    state.step = step
    return True


def scheduler_step(state: OptimizerState, metric: float) -> OptimizerState:
    """Plateau rule on a metric to minimise (validation NMSE in dB).

    An evaluation counts as an improvement when it beats the best value by
    more than ``threshold``; after more than ``patience`` consecutive
    non-improvements the base rate is multiplied by ``factor``.
    """
    if not np.isfinite(metric):
        raise ValueError("scheduler metric must be finite")
    if metric < state.best - state.threshold:
        state.best = float(metric)
        state.bad_evals = 0
    else:
        state.bad_evals += 1
        if state.bad_evals > state.patience:
            state.lr *= state.factor
            state.bad_evals = 0
            log.info("plateau: learning rate reduced to %.3g", state.lr)
    return state
